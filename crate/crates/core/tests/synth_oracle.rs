use std::fs;
use std::path::Path;

use jcr::calibration::{calibrate, motion_pairs, residuals, CalibrationConfig};
use jcr::geometry::{Frame, Pose, Vec3};
use jcr::io::write_dataset;
use jcr::synth::{generate_dataset, look_at, ray_cast, DatasetSpec, Intrinsics, NoiseProfile, SceneSpec};

#[test]
fn noiseless_data_satisfies_hand_eye_equation() {
    for seed in 0..5 {
        let spec = DatasetSpec::standard(seed, NoiseProfile::zero());
        let ds = generate_dataset(&spec).unwrap();
        let pairs = motion_pairs(&ds.end_effector, &ds.camera_model).unwrap();
        let x = &spec.hand_eye;
        for r in residuals(&pairs, &x.rotation, &x.translation, spec.scale) {
            assert!(r.translation < 1e-10 && r.rotation < 1e-10, "{r:?}");
        }
    }
}

#[test]
fn pointmaps_map_back_onto_scene_surfaces() {
    let spec = DatasetSpec::standard(1, NoiseProfile::zero());
    let ds = generate_dataset(&spec).unwrap();
    let x = spec.hand_eye;
    let mut checked = 0;
    for (e, pred) in ds.predictions.iter().enumerate().take(12) {
        let n = pred.first;
        let per_meter = ds.truth.pair_scales[e];
        let cam_from_base = ds.truth.camera_metric[n];
        let base_from_cam = ds.end_effector[n].inverse().compose(&x);
        let origin = cam_from_base.inverse().translation;
        for (p, &c) in pred.pointmap_self.iter().zip(&pred.confidence_self) {
            if c == 0.0 {
                continue;
            }
            let metric = p / per_meter;
            // The hand-eye route and the direct camera route agree.
            let via_hand_eye = base_from_cam.transform_point(&metric);
            let direct = cam_from_base.inverse().transform_point(&metric);
            assert!((via_hand_eye - direct).norm() < 1e-9);
            // And the point is the first surface hit along its ray.
            let dir = (direct - origin).normalize();
            let (t, _, _) = ds.truth.scene.cast(&origin, &dir).expect("hit");
            assert!((t - (direct - origin).norm()).abs() < 1e-9);
            checked += 1;
        }
    }
    assert!(checked > 1000);
}

#[test]
fn identity_hand_eye_and_unit_scale_give_equal_poses() {
    let mut spec = DatasetSpec::standard(2, NoiseProfile::zero());
    spec.hand_eye = Pose::identity(Frame::EndEffector);
    spec.scale = 1.0;
    let ds = generate_dataset(&spec).unwrap();
    for (e, c) in ds.end_effector.iter().zip(&ds.camera_model) {
        let (dr, dt) = e.distance_to(c);
        assert!(dr < 1e-12 && dt < 1e-12);
    }
}

#[test]
fn camera_facing_away_sees_nothing() {
    let scene = SceneSpec::tabletop();
    let c = scene.centroid();
    let eye = c + Vec3::new(0.0, 0.0, 0.6);
    let cam = look_at(&eye, &(eye + Vec3::new(0.0, 0.0, 1.0)), 0.0);
    let cast = ray_cast(&scene, &cam, &Intrinsics::default()).unwrap();
    assert!(cast.confidence.iter().all(|&c| c == 0.0));
    assert!(cast.labels.iter().all(|&l| l == -1));
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let spec = DatasetSpec::standard(21, NoiseProfile::default());
    write_dataset(a.path(), &generate_dataset(&spec).unwrap(), 21).unwrap();
    write_dataset(b.path(), &generate_dataset(&spec).unwrap(), 21).unwrap();
    let other = DatasetSpec::standard(22, NoiseProfile::default());
    write_dataset(c.path(), &generate_dataset(&other).unwrap(), 22).unwrap();
    let (fa, fb, fc) = (files(a.path()), files(b.path()), files(c.path()));
    assert!(fa.len() > 20);
    assert_eq!(fa, fb);
    assert_ne!(fa, fc);
}

#[test]
fn residual_grows_with_translation_noise() {
    let sweep = [0.0, 0.001, 0.002, 0.004, 0.008];
    let mut means = Vec::new();
    for &sigma in &sweep {
        let mut total = 0.0;
        for seed in 0..20 {
            let mut spec = DatasetSpec::standard(seed, NoiseProfile {
                ee_trans: sigma,
                ..NoiseProfile::zero()
            });
            // Only poses matter here; a tiny image keeps generation cheap.
            spec.intrinsics = Intrinsics {
                width: 8,
                height: 6,
                fov_deg: 60.0,
            };
            let ds = generate_dataset(&spec).unwrap();
            let r = calibrate(&ds.end_effector, &ds.camera_model, &CalibrationConfig::default()).unwrap();
            total += r.mean_translation_residual();
        }
        means.push(total / 20.0);
    }
    for w in means.windows(2) {
        assert!(w[1] >= w[0], "{means:?}");
    }
    assert!(means[0] < 1e-9 && means[4] > 1e-3, "{means:?}");
}
