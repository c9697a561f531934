use jcr::alignment::{align_global, extract_point_cloud, AlignConfig, AlignError, AlignInit, PairGraph};
use jcr::synth::{generate_dataset, Dataset, DatasetSpec, NoiseProfile};

fn dataset(seed: u64, views: usize, noise: NoiseProfile, scale: f64) -> Dataset {
    let mut spec = DatasetSpec::standard(seed, noise);
    spec.trajectory.num_poses = views;
    spec.scale = scale;
    generate_dataset(&spec).unwrap()
}

fn assert_monotone(history: &[f64]) {
    assert!(history.len() >= 2);
    for w in history.windows(2) {
        assert!(w[1] <= w[0], "objective rose from {} to {}", w[0], w[1]);
    }
}

#[test]
fn objective_never_increases() {
    let ds = dataset(2, 5, NoiseProfile::default(), 0.5);
    let r = align_global(&ds.predictions, &ds.graph, &AlignConfig::default()).unwrap();
    assert_monotone(&r.history);
    assert_eq!(*r.history.last().unwrap(), r.objective);
    assert!(r.pair_scales.iter().all(|&s| s > 0.0));
    assert!(r.converged);
}

#[test]
fn descent_from_identity_initialization() {
    let ds = dataset(3, 3, NoiseProfile::zero(), 0.5);
    let cfg = AlignConfig {
        init: AlignInit::Identity,
        max_iters: 300,
        ..AlignConfig::default()
    };
    let r = align_global(&ds.predictions, &ds.graph, &cfg).unwrap();
    assert_monotone(&r.history);
    assert!(r.objective < 0.5 * r.history[0], "{} vs {}", r.objective, r.history[0]);
}

#[test]
fn noiseless_objective_is_negligible_per_term() {
    let noise = NoiseProfile {
        pair_dropout: 0.5,
        ..NoiseProfile::zero()
    };
    let ds = dataset(4, 6, noise, 0.5);
    assert!(ds.graph.edges.len() < 30, "dropout should remove some pairs");
    let r = align_global(&ds.predictions, &ds.graph, &AlignConfig::default()).unwrap();
    assert!(r.objective < 1e-8 * r.residual_terms as f64);
}

#[test]
fn zeroed_pair_matches_removed_pair() {
    let ds = dataset(5, 5, NoiseProfile::default(), 0.5);
    let target = (2, 4);
    let mut zeroed = ds.predictions.clone();
    for p in zeroed.iter_mut().filter(|p| (p.first, p.second) == target) {
        p.confidence_self.iter_mut().for_each(|c| *c = 0.0);
        p.confidence_other.iter_mut().for_each(|c| *c = 0.0);
    }
    let removed = PairGraph::new(
        ds.graph.num_views,
        ds.graph.edges.iter().copied().filter(|&e| e != target).collect(),
    )
    .unwrap();
    let cfg = AlignConfig::default();
    let a = align_global(&zeroed, &ds.graph, &cfg).unwrap();
    let b = align_global(&ds.predictions, &removed, &cfg).unwrap();
    for (pa, pb) in a.world_from_camera.iter().zip(&b.world_from_camera) {
        let (dr, dt) = pa.distance_to(pb);
        assert!(dr < 1e-6 && dt < 1e-6, "rot {dr:e} trans {dt:e}");
    }
    assert!((a.objective - b.objective).abs() < 1e-6);
}

#[test]
fn gauge_normalized_result_ignores_global_scale() {
    // Halving λ doubles every model-unit coordinate of the inputs.
    let a = dataset(6, 4, NoiseProfile::zero(), 0.5);
    let b = dataset(6, 4, NoiseProfile::zero(), 0.25);
    let cfg = AlignConfig::default();
    let ra = align_global(&a.predictions, &a.graph, &cfg).unwrap();
    let rb = align_global(&b.predictions, &b.graph, &cfg).unwrap();
    for (pa, pb) in ra.world_from_camera.iter().zip(&rb.world_from_camera) {
        assert!(pa.rotation.angle_to(&pb.rotation) < 1e-6);
        assert!((pa.translation * 2.0 - pb.translation).norm() < 1e-6);
    }
    for (sa, sb) in ra.pair_scales.iter().zip(&rb.pair_scales) {
        assert!((sa - sb).abs() < 1e-6 * sa);
    }
}

#[test]
fn recovered_poses_match_truth_in_camera_zero_gauge() {
    let ds = dataset(7, 5, NoiseProfile::zero(), 0.5);
    let r = align_global(&ds.predictions, &ds.graph, &AlignConfig::default()).unwrap();
    let c0_inv = ds.camera_model[0].inverse();
    for (est, truth) in r.camera_poses().iter().zip(&ds.camera_model) {
        let (dr, dt) = est.distance_to(&truth.compose(&c0_inv));
        assert!(dr < 1e-6 && dt < 1e-6, "rot {dr:e} trans {dt:e}");
    }
}

#[test]
fn median_threshold_keeps_exactly_the_points_above_it() {
    let ds = dataset(8, 3, NoiseProfile::default(), 0.5);
    let r = align_global(&ds.predictions, &ds.graph, &AlignConfig::default()).unwrap();
    let mut all: Vec<f64> = r.confidences.iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    let median = all[all.len() / 2];
    let expected = all.iter().filter(|&&c| c > median).count();
    let cloud = extract_point_cloud(&r, median).unwrap();
    assert_eq!(cloud.len(), expected);
    for p in &cloud {
        let i = p.pixel.1 * r.width + p.pixel.0;
        assert_eq!(r.confidences[p.view][i], p.confidence);
        assert_eq!(r.pointmaps[p.view][i], p.point);
    }
    let max = *all.last().unwrap();
    assert!(matches!(extract_point_cloud(&r, max + 1.0), Err(AlignError::EmptyCloud { .. })));
}

#[test]
fn graph_with_isolated_view_is_rejected() {
    let ds = dataset(9, 4, NoiseProfile::zero(), 0.5);
    let edges = ds.graph.edges.iter().copied().filter(|&(a, b)| a != 3 && b != 3).collect();
    let graph = PairGraph::new(4, edges).unwrap();
    assert!(matches!(
        align_global(&ds.predictions, &graph, &AlignConfig::default()),
        Err(AlignError::DisconnectedGraph { views: 4 })
    ));
}
