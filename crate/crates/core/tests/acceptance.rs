//! Acceptance criteria, one line each. Runs as a plain binary so the
//! verdicts are always printed; exits nonzero if any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jcr::alignment::{align_global, extract_point_cloud, AlignConfig};
use jcr::calibration::{
    calibrate, motion_pairs, solve_rotation, solve_translation_scale, srp_cost, translation_for_scale,
    CalibrationConfig, CalibrationError, MotionPair, ScaleSearchConfig,
};
use jcr::fields::{
    gradient_check, holdout_split, occupancy_accuracy, train_color, train_occupancy, train_segmentation,
    LossKind, TrainConfig,
};
use jcr::geometry::{exp_map, inv_sqrt_psd, log_map, AxisAngle, Frame, Mat3, Pose, Rotation, Vec3};
use jcr::reconstruction::{
    default_confidence_threshold, join_pixel_labels, object_heights, transform_to_base, LabelImage,
    LabeledPointCloud,
};
use jcr::synth::{
    generate_dataset, perturb_pose, sample_surface, single_axis_trajectory, DatasetSpec, NoiseProfile, SceneSpec,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn unit_vector(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_rotation(rng: &mut impl Rng) -> Rotation {
    exp_map(&AxisAngle(unit_vector(rng) * rng.random_range(0.0..3.1)))
}

/// 1. Noiseless round trip through alignment and calibration.
fn noiseless_round_trip() -> Verdict {
    let (mut worst_r, mut worst_t, mut worst_s) = (0.0f64, 0.0f64, 0.0f64);
    let mut slowest = Duration::ZERO;
    let mut failures = 0;
    for seed in 0..50 {
        let start = Instant::now();
        let spec = DatasetSpec::standard(seed, NoiseProfile::zero());
        let outcome = generate_dataset(&spec).ok().and_then(|ds| {
            let al = align_global(&ds.predictions, &ds.graph, &AlignConfig::default()).ok()?;
            calibrate(&ds.end_effector, &al.camera_poses(), &CalibrationConfig::default()).ok()
        });
        slowest = slowest.max(start.elapsed());
        let Some(cal) = outcome else {
            failures += 1;
            continue;
        };
        let (dr, dt) = cal.hand_eye().distance_to(&spec.hand_eye);
        worst_r = worst_r.max(dr);
        worst_t = worst_t.max(dt);
        worst_s = worst_s.max((cal.scale / spec.scale - 1.0).abs());
    }
    Verdict {
        pass: failures == 0 && worst_r < 1e-5 && worst_t < 1e-5 && worst_s < 1e-5 && slowest.as_secs_f64() < 5.0,
        detail: format!(
            "50 datasets, {failures} failed; worst rot {worst_r:.2e} rad, trans {worst_t:.2e} m, λ rel {worst_s:.2e}; slowest {:.2} s",
            slowest.as_secs_f64()
        ),
    }
}

struct NoisyRun {
    converged_in_band: bool,
    mean_dt: f64,
    mean_dr: f64,
    worst_height_error: f64,
}

fn noisy_run(seed: u64) -> Option<NoisyRun> {
    let spec = DatasetSpec::standard(seed, NoiseProfile::default());
    let ds = generate_dataset(&spec).ok()?;
    let al = align_global(&ds.predictions, &ds.graph, &AlignConfig::default()).ok()?;
    let cal = calibrate(&ds.end_effector, &al.camera_poses(), &CalibrationConfig::default()).ok()?;
    let (mean_dt, mean_dr) = (cal.mean_translation_residual(), cal.mean_rotation_residual());

    let points = extract_point_cloud(&al, default_confidence_threshold(&al)).ok()?;
    let cloud = LabeledPointCloud::from_cloud_points(&points, (ds.width, ds.height));
    let base = transform_to_base(&cloud, &al.camera_poses(), &ds.end_effector, &cal, true).ok()?;
    let seg: Vec<LabelImage<i32>> = ds
        .labels
        .iter()
        .map(|l| LabelImage {
            width: ds.width,
            height: ds.height,
            data: l.clone(),
        })
        .collect();
    let base = join_pixel_labels(&base, Some(&seg), None).ok()?;
    let heights = object_heights(&base, 0, 0.15).ok()?;
    let mut worst: f64 = 0.0;
    for p in &spec.scene.primitives {
        if let (Some(h), true) = (p.height(), p.class_id != 0) {
            let err = heights.get(&p.class_id).map_or(f64::INFINITY, |m| (m / h - 1.0).abs() * 100.0);
            worst = worst.max(err);
        }
    }
    Some(NoisyRun {
        converged_in_band: cal.converged && mean_dt < 0.1 && mean_dr < 0.15,
        mean_dt,
        mean_dr,
        worst_height_error: worst,
    })
}

/// 2 and 3 share the same 20 noisy datasets.
fn noisy_criteria() -> (Verdict, Verdict) {
    let runs: Vec<Option<NoisyRun>> = (0..20).map(noisy_run).collect();
    let ok: Vec<&NoisyRun> = runs.iter().flatten().collect();
    let converged = ok.iter().filter(|r| r.converged_in_band).count();
    let max_dt = ok.iter().map(|r| r.mean_dt).fold(0.0, f64::max);
    let max_dr = ok.iter().map(|r| r.mean_dr).fold(0.0, f64::max);
    let within = ok.iter().filter(|r| r.worst_height_error <= 3.1).count();
    let worst_h = ok.iter().map(|r| r.worst_height_error).fold(0.0, f64::max);
    (
        Verdict {
            pass: converged as f64 >= 0.95 * 20.0,
            detail: format!(
                "{converged}/20 seeds converged in band; largest mean δt {max_dt:.4}, largest mean δR {max_dr:.4}"
            ),
        },
        Verdict {
            pass: within as f64 >= 0.9 * 20.0,
            detail: format!("{within}/20 seeds with every object height within 3.1%; worst {worst_h:.2}%"),
        },
    )
}

/// 4. Four noiseless views: objective per term and poses after gauge fixing.
fn alignment_exactness() -> Verdict {
    let mut spec = DatasetSpec::standard(7, NoiseProfile::zero());
    spec.trajectory.num_poses = 4;
    let Ok(ds) = generate_dataset(&spec) else {
        return Verdict {
            pass: false,
            detail: "dataset generation failed".into(),
        };
    };
    let Ok(al) = align_global(&ds.predictions, &ds.graph, &AlignConfig::default()) else {
        return Verdict {
            pass: false,
            detail: "alignment failed".into(),
        };
    };
    let per_term = al.objective / al.residual_terms as f64;
    // Ground truth in the camera-0 gauge.
    let c0 = ds.camera_model[0].inverse();
    let (mut worst_rot_deg, mut worst_dir) = (0.0f64, 0.0f64);
    for (est, truth) in al.camera_poses().iter().zip(&ds.camera_model) {
        let truth = truth.compose(&c0);
        worst_rot_deg = worst_rot_deg.max(est.rotation.angle_to(&truth.rotation).to_degrees());
        if truth.translation.norm() > 1e-9 {
            let d = (est.translation.normalize() - truth.translation.normalize()).norm();
            worst_dir = worst_dir.max(d);
        }
    }
    Verdict {
        pass: per_term < 1e-8 && worst_rot_deg < 0.5 && worst_dir < 0.01,
        detail: format!(
            "objective/term {per_term:.2e} over {} terms; worst rot {worst_rot_deg:.2e}°, translation direction {:.2e}%",
            al.residual_terms,
            worst_dir * 100.0
        ),
    }
}

fn random_problem(rng: &mut ChaCha8Rng) -> (Vec<MotionPair>, f64) {
    let x = Pose::new(random_rotation(rng), unit_vector(rng) * 0.1, Frame::EndEffector);
    let scale = rng.random_range(0.1..3.0);
    let ee: Vec<Pose> = (0..8)
        .map(|_| Pose::new(random_rotation(rng), unit_vector(rng) * rng.random_range(0.2..0.8), Frame::EndEffector))
        .collect();
    // Camera poses from E = X C, then mild noise so the minimum is not zero.
    let cam: Vec<Pose> = ee
        .iter()
        .map(|e| {
            let c = x.inverse().compose(e);
            perturb_pose(&c, 0.005, 0.003, rng).with_scaled_translation(1.0 / scale).with_frame(Frame::CameraModel)
        })
        .collect();
    (motion_pairs(&ee, &cam).expect("8 poses"), scale)
}

/// 5. Closed-form translation vs dense random search at fixed λ.
fn closed_form_vs_search() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_gain = f64::NEG_INFINITY;
    for _ in 0..20 {
        let (pairs, scale) = random_problem(&mut rng);
        let rotation = solve_rotation(&pairs).expect("diverse rotations");
        let t_star = translation_for_scale(&pairs, &rotation, scale).expect("full rank");
        let best = srp_cost(&pairs, &rotation, &t_star, scale).sqrt();
        for _ in 0..10_000 {
            let d = Vec3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            );
            let r = srp_cost(&pairs, &rotation, &(t_star + d), scale).sqrt();
            worst_gain = worst_gain.max(best - r);
        }
    }
    Verdict {
        pass: worst_gain <= 1e-9,
        detail: format!("20 problems × 10⁴ samples; largest improvement over t* {worst_gain:.2e}"),
    }
}

/// 6. Gradient checks for the three heads.
fn gradient_checks() -> Verdict {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, kind, outputs) in [
        ("BCE", LossKind::BinaryCrossEntropy, 1),
        ("softmax-CE", LossKind::CrossEntropy, 4),
        ("MSE", LossKind::MeanSquared, 3),
    ] {
        let worst = (0..5).map(|s| gradient_check(5, 8, outputs, kind, 20, s)).fold(0.0, f64::max);
        pass &= worst < 1e-4;
        parts.push(format!("{name} {worst:.2e}"));
    }
    Verdict {
        pass,
        detail: format!("max relative error: {}", parts.join(", ")),
    }
}

/// 7. Field quality: occupancy, segmentation and color.
fn field_quality() -> Verdict {
    let cfg = TrainConfig::default();

    // Box and cylinder, no table.
    let mut scene = SceneSpec::tabletop();
    scene.primitives.retain(|p| p.name == "box" || p.name == "mug");
    scene.density = 40_000.0;
    let surface = sample_surface(&scene);
    let (train, test) = holdout_split(surface.len(), 0.2, 1);
    let mut cloud = LabeledPointCloud::from_points(train.iter().map(|&i| surface[i].point).collect(), Frame::RobotBase);
    cloud.colors = Some(train.iter().map(|&i| surface[i].color).collect());

    let start = Instant::now();
    let occ = train_occupancy(&cloud, &cfg).expect("occupancy training");
    let occ_time = start.elapsed().as_secs_f64();
    let positives: Vec<Vec3> = test.iter().map(|&i| surface[i].point).collect();
    let all: Vec<Vec3> = surface.iter().map(|s| s.point).collect();
    let (lo, hi) = (occ.normalization.min, occ.normalization.max);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut negatives = Vec::new();
    while negatives.len() < positives.len() {
        let p = Vec3::new(
            rng.random_range(lo[0]..hi[0]),
            rng.random_range(lo[1]..hi[1]),
            rng.random_range(lo[2]..hi[2]),
        );
        if all.iter().all(|q| (q - p).norm() > 0.02) {
            negatives.push(p);
        }
    }
    let mut points = positives.clone();
    points.extend(&negatives);
    let labels: Vec<bool> = (0..points.len()).map(|i| i < positives.len()).collect();
    let occ_acc = occupancy_accuracy(&occ, &points, &labels);

    let color = train_color(&cloud, &cfg).expect("color training");
    let predicted = color.query(&positives);
    let mae = predicted
        .iter()
        .zip(&test)
        .map(|(c, &i)| (0..3).map(|k| (c[k] - surface[i].color[k]).abs()).sum::<f64>() / 3.0)
        .sum::<f64>()
        / positives.len() as f64;

    // Two clusters 0.5 m apart.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let centers = [Vec3::new(-0.25, 0.0, 0.1), Vec3::new(0.25, 0.0, 0.1)];
    let samples: Vec<(Vec3, i32)> = (0..4000)
        .map(|i| {
            let c = (i % 2) as i32;
            (centers[c as usize] + unit_vector(&mut rng) * rng.random_range(0.0..0.08), c)
        })
        .collect();
    let (train, test) = holdout_split(samples.len(), 0.2, 2);
    let mut clusters = LabeledPointCloud::from_points(train.iter().map(|&i| samples[i].0).collect(), Frame::RobotBase);
    clusters.segmentation = Some(train.iter().map(|&i| samples[i].1).collect());
    let seg = train_segmentation(&clusters, &cfg).expect("segmentation training");
    let test_points: Vec<Vec3> = test.iter().map(|&i| samples[i].0).collect();
    let classes = seg.predict_classes(&test_points).expect("segmentation head");
    let seg_acc = classes.iter().zip(&test).filter(|(c, &i)| **c == samples[i].1).count() as f64 / test.len() as f64;

    Verdict {
        pass: occ_acc >= 0.95 && occ_time < 60.0 && seg_acc >= 0.98 && mae <= 0.05,
        detail: format!(
            "occupancy {:.2}% in {occ_time:.1} s; segmentation {:.2}%; color MAE {mae:.4}",
            occ_acc * 100.0,
            seg_acc * 100.0
        ),
    }
}

/// 8. Single-axis trajectories and rotation-free end-effector motion.
fn degeneracy_detection() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut single_axis = 0;
    for _ in 0..20 {
        let axis = unit_vector(&mut rng);
        let ee = single_axis_trajectory(10, &axis, &mut rng);
        let x = Pose::new(random_rotation(&mut rng), unit_vector(&mut rng) * 0.1, Frame::EndEffector);
        let cam: Vec<Pose> = ee
            .iter()
            .map(|e| x.inverse().compose(e).with_scaled_translation(2.0).with_frame(Frame::CameraModel))
            .collect();
        if matches!(
            calibrate(&ee, &cam, &CalibrationConfig::default()),
            Err(CalibrationError::DegenerateMotion(_))
        ) {
            single_axis += 1;
        }
    }
    let mut rank_deficient = 0;
    for _ in 0..20 {
        let rotation = random_rotation(&mut rng);
        let pairs: Vec<MotionPair> = (0..9)
            .map(|_| {
                let t = unit_vector(&mut rng) * rng.random_range(0.05..0.3);
                MotionPair {
                    end_effector: Pose::new(Rotation::identity(), t, Frame::EndEffector),
                    camera: Pose::new(Rotation::identity(), rotation.inverse().rotate(&t) * 2.0, Frame::CameraModel),
                }
            })
            .collect();
        if matches!(
            solve_translation_scale(&pairs, &rotation, &ScaleSearchConfig::default()),
            Err(CalibrationError::RankDeficientC { .. })
        ) {
            rank_deficient += 1;
        }
    }
    Verdict {
        pass: single_axis == 20 && rank_deficient == 20,
        detail: format!("DegenerateMotion {single_axis}/20; RankDeficientC {rank_deficient}/20"),
    }
}

/// 9. Lie-group properties.
fn lie_properties() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_log = 0.0f64;
    for _ in 0..10_000 {
        let v = unit_vector(&mut rng) * rng.random_range(0.0..std::f64::consts::PI - 1e-3);
        let back = log_map(&exp_map(&AxisAngle(v)));
        worst_log = worst_log.max((back.vector() - v).norm());
    }
    let mut worst_sqrt = 0.0f64;
    for _ in 0..1000 {
        let q = *random_rotation(&mut rng).matrix();
        let magnitude = 10f64.powf(rng.random_range(-3.0..3.0));
        let eig = Mat3::from_diagonal(&Vec3::new(
            magnitude,
            magnitude * 10f64.powf(rng.random_range(0.0..5.99)),
            magnitude * 10f64.powf(rng.random_range(0.0..5.99)),
        ));
        let a = q * eig * q.transpose();
        let a = (a + a.transpose()) * 0.5;
        match inv_sqrt_psd(&a, 1e-12) {
            Ok(s) => worst_sqrt = worst_sqrt.max((s * a * s - Mat3::identity()).norm()),
            Err(_) => worst_sqrt = f64::INFINITY,
        }
    }
    Verdict {
        pass: worst_log < 1e-9 && worst_sqrt < 1e-7,
        detail: format!("exp/log worst {worst_log:.2e} over 10⁴; ‖SAS − I‖ worst {worst_sqrt:.2e} over 10³"),
    }
}

fn main() {
    // `cargo test -- <filter>` passes arguments through; ignore them.
    let start = Instant::now();
    let (noisy, heights) = noisy_criteria();
    let verdicts = [
        ("noiseless round trip", noiseless_round_trip()),
        ("noisy plausibility band", noisy),
        ("scale accuracy (object heights)", heights),
        ("alignment exactness", alignment_exactness()),
        ("closed form vs brute force", closed_form_vs_search()),
        ("gradient checks", gradient_checks()),
        ("field quality", field_quality()),
        ("degeneracy detection", degeneracy_detection()),
        ("Lie-group properties", lie_properties()),
    ];
    let mut failed = 0;
    for (i, (name, v)) in verdicts.iter().enumerate() {
        println!(
            "criterion {}: {} {name}: {}",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    println!(
        "acceptance: {}/{} passed in {:.1} s",
        verdicts.len() - failed,
        verdicts.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
