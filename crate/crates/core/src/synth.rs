//! Synthetic ground truth: scenes made of boxes, cylinders and table planes,
//! view-sphere trajectories, and the pairwise pointmaps a foundation model
//! would predict for them under a hidden hand-eye transform and scale.
//!
//! Conventions match the rest of the crate: camera poses are camera from
//! base (metric) or camera from world (model units, metric / λ), end-effector
//! poses are end-effector from base, and the hidden hand-eye transform is
//! end-effector from camera, so `E_n = X C_n`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{PairGraph, PairwisePrediction};
use crate::geometry::{exp_map, log_map, AxisAngle, Frame, Mat3, Pose, Rotation, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("insufficient rotation diversity: {0}")]
    InsufficientDiversity(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned box.
    Box { center: [f64; 3], half_extents: [f64; 3] },
    /// Vertical cylinder standing on `base_center`.
    Cylinder {
        base_center: [f64; 3],
        radius: f64,
        height: f64,
    },
    /// Horizontal rectangle at height `center.z`, facing up.
    Plane { center: [f64; 3], half_extents: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub name: String,
    pub shape: Shape,
    pub color: [f64; 3],
    pub class_id: i32,
}

impl Primitive {
    /// Vertical extent for objects; `None` for planes.
    pub fn height(&self) -> Option<f64> {
        match self.shape {
            Shape::Box { half_extents, .. } => Some(2.0 * half_extents[2]),
            Shape::Cylinder { height, .. } => Some(height),
            Shape::Plane { .. } => None,
        }
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        match self.shape {
            Shape::Box { center, half_extents } => {
                let c = Vec3::from(center);
                let h = Vec3::from(half_extents);
                (c - h, c + h)
            }
            Shape::Cylinder {
                base_center,
                radius,
                height,
            } => {
                let b = Vec3::from(base_center);
                (
                    b - Vec3::new(radius, radius, 0.0),
                    b + Vec3::new(radius, radius, height),
                )
            }
            Shape::Plane { center, half_extents } => {
                let c = Vec3::from(center);
                let h = Vec3::new(half_extents[0], half_extents[1], 0.0);
                (c - h, c + h)
            }
        }
    }

    /// Nearest intersection `(t, outward normal)` of `o + t d`, `t > eps`.
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
        const EPS: f64 = 1e-9;
        match self.shape {
            Shape::Plane { center, half_extents } => {
                if d.z.abs() < 1e-15 {
                    return None;
                }
                let t = (center[2] - o.z) / d.z;
                let p = o + d * t;
                (t > EPS
                    && (p.x - center[0]).abs() <= half_extents[0]
                    && (p.y - center[1]).abs() <= half_extents[1])
                    .then_some((t, Vec3::z()))
            }
            Shape::Box { .. } => {
                let (lo, hi) = self.bounds();
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis_near = 0;
                for k in 0..3 {
                    if d[k].abs() < 1e-15 {
                        if o[k] < lo[k] || o[k] > hi[k] {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
                    let (a, b) = if a < b { (a, b) } else { (b, a) };
                    if a > t_near {
                        t_near = a;
                        axis_near = k;
                    }
                    t_far = t_far.min(b);
                }
                if t_near > t_far || t_near <= EPS {
                    return None;
                }
                let mut n = Vec3::zeros();
                n[axis_near] = -d[axis_near].signum();
                Some((t_near, n))
            }
            Shape::Cylinder {
                base_center,
                radius,
                height,
            } => {
                let b = Vec3::from(base_center);
                let mut best: Option<(f64, Vec3)> = None;
                let mut consider = |t: f64, n: Vec3| {
                    if t > EPS && best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, n));
                    }
                };
                let (ox, oy) = (o.x - b.x, o.y - b.y);
                let qa = d.x * d.x + d.y * d.y;
                if qa > 1e-15 {
                    let qb = 2.0 * (ox * d.x + oy * d.y);
                    let qc = ox * ox + oy * oy - radius * radius;
                    let disc = qb * qb - 4.0 * qa * qc;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)] {
                            let z = o.z + t * d.z;
                            if z >= b.z && z <= b.z + height {
                                let p = o + d * t;
                                let n = Vec3::new(p.x - b.x, p.y - b.y, 0.0) / radius;
                                consider(t, n);
                            }
                        }
                    }
                }
                if d.z.abs() > 1e-15 {
                    for (z, n) in [(b.z + height, Vec3::z()), (b.z, -Vec3::z())] {
                        let t = (z - o.z) / d.z;
                        let p = o + d * t;
                        if (p.x - b.x).powi(2) + (p.y - b.y).powi(2) <= radius * radius {
                            consider(t, n);
                        }
                    }
                }
                best
            }
        }
    }

    fn area(&self) -> f64 {
        match self.shape {
            Shape::Box { half_extents: h, .. } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
            Shape::Cylinder { radius, height, .. } => 2.0 * PI * radius * (radius + height),
            Shape::Plane { half_extents: h, .. } => 4.0 * h[0] * h[1],
        }
    }

    /// Uniform surface sample.
    fn sample(&self, rng: &mut impl Rng) -> Vec3 {
        match self.shape {
            Shape::Plane { center, half_extents } => Vec3::new(
                center[0] + rng.random_range(-half_extents[0]..=half_extents[0]),
                center[1] + rng.random_range(-half_extents[1]..=half_extents[1]),
                center[2],
            ),
            Shape::Box { center, half_extents: h } => {
                let faces = [h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                let mut face = 5;
                for (i, a) in faces.iter().enumerate() {
                    if pick < *a {
                        face = i;
                        break;
                    }
                    pick -= a;
                }
                let axis = face / 2;
                let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
                let mut p = Vec3::new(
                    rng.random_range(-h[0]..=h[0]),
                    rng.random_range(-h[1]..=h[1]),
                    rng.random_range(-h[2]..=h[2]),
                );
                p[axis] = sign * h[axis];
                p + Vec3::from(center)
            }
            Shape::Cylinder {
                base_center,
                radius,
                height,
            } => {
                let side = 2.0 * PI * radius * height;
                let cap = PI * radius * radius;
                let pick = rng.random_range(0.0..side + 2.0 * cap);
                let b = Vec3::from(base_center);
                if pick < side {
                    let a = rng.random_range(0.0..2.0 * PI);
                    b + Vec3::new(radius * a.cos(), radius * a.sin(), rng.random_range(0.0..=height))
                } else {
                    let r = radius * rng.random_range(0.0f64..1.0).sqrt();
                    let a = rng.random_range(0.0..2.0 * PI);
                    let z = if pick < side + cap { height } else { 0.0 };
                    b + Vec3::new(r * a.cos(), r * a.sin(), z)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub workspace_min: [f64; 3],
    pub workspace_max: [f64; 3],
    /// Surface samples per square meter for [`sample_surface`].
    pub density: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Table with a box, a cylinder and a short box on top.
    pub fn tabletop() -> Self {
        SceneSpec {
            primitives: vec![
                Primitive {
                    name: "table".into(),
                    shape: Shape::Plane {
                        center: [0.0, 0.0, 0.0],
                        half_extents: [0.35, 0.35],
                    },
                    color: [0.8, 0.75, 0.6],
                    class_id: 0,
                },
                Primitive {
                    name: "box".into(),
                    shape: Shape::Box {
                        center: [0.09, 0.06, 0.06],
                        half_extents: [0.05, 0.04, 0.06],
                    },
                    color: [0.9, 0.2, 0.1],
                    class_id: 1,
                },
                Primitive {
                    name: "mug".into(),
                    shape: Shape::Cylinder {
                        base_center: [-0.09, -0.05, 0.0],
                        radius: 0.04,
                        height: 0.10,
                    },
                    color: [0.1, 0.3, 0.9],
                    class_id: 2,
                },
                Primitive {
                    name: "tape".into(),
                    shape: Shape::Box {
                        center: [-0.08, 0.12, 0.025],
                        half_extents: [0.035, 0.035, 0.025],
                    },
                    color: [0.2, 0.8, 0.2],
                    class_id: 3,
                },
            ],
            workspace_min: [-0.4, -0.4, -0.05],
            workspace_max: [0.4, 0.4, 0.4],
            density: 20_000.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let lo = Vec3::from(self.workspace_min);
        let hi = Vec3::from(self.workspace_max);
        if (0..3).any(|k| lo[k] >= hi[k]) {
            return Err(SynthError::InvalidScene("empty workspace box".into()));
        }
        for p in &self.primitives {
            let (a, b) = p.bounds();
            if (0..3).any(|k| a[k] < lo[k] - 1e-12 || b[k] > hi[k] + 1e-12) {
                return Err(SynthError::InvalidScene(format!(
                    "primitive '{}' leaves the workspace",
                    p.name
                )));
            }
        }
        Ok(())
    }

    /// Center of the object primitives (planes excluded when objects exist).
    pub fn centroid(&self) -> Vec3 {
        let objs: Vec<&Primitive> = self.primitives.iter().filter(|p| p.height().is_some()).collect();
        let set: Vec<&Primitive> = if objs.is_empty() { self.primitives.iter().collect() } else { objs };
        if set.is_empty() {
            return Vec3::zeros();
        }
        set.iter()
            .map(|p| {
                let (a, b) = p.bounds();
                (a + b) * 0.5
            })
            .sum::<Vec3>()
            / set.len() as f64
    }

    /// Nearest hit along a base-frame ray.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3, usize)> {
        self.primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(origin, dir).map(|(t, n)| (t, n, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

/// Labeled surface sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub point: Vec3,
    pub class_id: i32,
    pub color: [f64; 3],
}

/// Samples each primitive's surface at the scene density.
pub fn sample_surface(scene: &SceneSpec) -> Vec<SurfacePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    scene
        .primitives
        .iter()
        .flat_map(|p| {
            let n = (p.area() * scene.density).round().max(1.0) as usize;
            (0..n)
                .map(|_| SurfacePoint {
                    point: p.sample(&mut rng),
                    class_id: p.class_id,
                    color: p.color,
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view, degrees.
    pub fov_deg: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Intrinsics {
            width: 64,
            height: 48,
            fov_deg: 60.0,
        }
    }
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.fov_deg > 10.0 && self.fov_deg < 120.0) {
            return Err(SynthError::InvalidCamera(format!(
                "field of view {}° outside (10°, 120°)",
                self.fov_deg
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SynthError::InvalidCamera("empty image".into()));
        }
        Ok(())
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }

    /// Camera-frame direction (z = 1) through the center of pixel `(w, h)`.
    pub fn ray(&self, w: usize, h: usize) -> Vec3 {
        let f = self.focal();
        Vec3::new(
            (w as f64 + 0.5 - 0.5 * self.width as f64) / f,
            (h as f64 + 0.5 - 0.5 * self.height as f64) / f,
            1.0,
        )
    }
}

/// Per-view ray-cast output in the camera frame (metric).
#[derive(Debug, Clone, PartialEq)]
pub struct ViewCast {
    pub points: Vec<Vec3>,
    /// Zero for misses.
    pub confidence: Vec<f64>,
    /// Class id per pixel, -1 for misses.
    pub labels: Vec<i32>,
    pub colors: Vec<[f64; 3]>,
}

/// Confidence in [0.5, 3] from incidence angle and a distance falloff.
fn hit_confidence(cos_incidence: f64, depth: f64) -> f64 {
    let falloff = 1.0 / (1.0 + depth * depth);
    0.5 + 2.5 * cos_incidence.abs().min(1.0) * falloff
}

/// Ray-casts every pixel of a camera at `camera` (camera from base, metric).
pub fn ray_cast(scene: &SceneSpec, camera: &Pose, intrinsics: &Intrinsics) -> Result<ViewCast, SynthError> {
    intrinsics.validate()?;
    let world_from_cam = camera.inverse();
    let origin = world_from_cam.translation;
    let n = intrinsics.width * intrinsics.height;
    let mut out = ViewCast {
        points: vec![Vec3::zeros(); n],
        confidence: vec![0.0; n],
        labels: vec![-1; n],
        colors: vec![[0.0; 3]; n],
    };
    for h in 0..intrinsics.height {
        for w in 0..intrinsics.width {
            let ray_cam = intrinsics.ray(w, h);
            let dir = world_from_cam.rotation.rotate(&ray_cam);
            if let Some((t, normal, idx)) = scene.cast(&origin, &dir) {
                let i = h * intrinsics.width + w;
                let p = ray_cam * t;
                let cos = normal.dot(&dir) / dir.norm();
                out.points[i] = p;
                out.confidence[i] = hit_confidence(cos, p.norm());
                out.labels[i] = scene.primitives[idx].class_id;
                out.colors[i] = scene.primitives[idx].color;
            }
        }
    }
    Ok(out)
}

/// Look-at camera (camera from base) at `eye` facing `target`, rolled by
/// `roll` about the optical axis. Camera axes: x right, y down, z forward.
pub fn look_at(eye: &Vec3, target: &Vec3, roll: f64) -> Pose {
    let z = (target - eye).normalize();
    let helper = if z.cross(&Vec3::z()).norm() > 1e-6 { Vec3::z() } else { Vec3::x() };
    let x0 = helper.cross(&z).normalize();
    let y0 = z.cross(&x0);
    let (s, c) = roll.sin_cos();
    let x = x0 * c + y0 * s;
    let y = z.cross(&x);
    let world_from_cam = Mat3::from_columns(&[x, y, z]);
    let rot = Rotation::from_matrix_normalized(world_from_cam.transpose()).expect("finite frame");
    Pose::new(rot, -rot.rotate(eye), Frame::CameraMetric)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    pub num_poses: usize,
    /// Camera distance from the scene centroid, meters.
    pub radius: f64,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
    /// Azimuth span covered by the sweep, degrees.
    pub azimuth_span_deg: f64,
    pub max_roll_deg: f64,
    /// Relative per-pose radius jitter.
    pub radius_jitter: f64,
    /// Per-pose look-at target jitter, meters.
    pub target_jitter: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            num_poses: 10,
            radius: 0.6,
            min_elevation_deg: 35.0,
            max_elevation_deg: 65.0,
            azimuth_span_deg: 200.0,
            max_roll_deg: 180.0,
            radius_jitter: 0.5,
            target_jitter: 0.1,
        }
    }
}

/// Camera poses (camera from base, metric) on a view sphere around the
/// scene centroid with look-at orientation and random roll.
///
/// Radius and target are jittered per pose: cameras that all look at one
/// point from one distance share a fixed point, which leaves hand-eye
/// translation and scale unidentifiable.
pub fn view_sphere_cameras(
    scene: &SceneSpec,
    spec: &TrajectorySpec,
    rng: &mut impl Rng,
) -> Result<Vec<Pose>, SynthError> {
    if spec.num_poses < 3 {
        return Err(SynthError::InsufficientDiversity(format!(
            "need at least 3 poses, got {}",
            spec.num_poses
        )));
    }
    let target = scene.centroid();
    let n = spec.num_poses;
    let az0 = rng.random_range(0.0..2.0 * PI);
    let poses: Vec<Pose> = (0..n)
        .map(|i| {
            let frac = i as f64 / (n - 1) as f64;
            let az = az0 + spec.azimuth_span_deg.to_radians() * frac + rng.random_range(-0.1..0.1);
            // Alternate elevation so consecutive motions tilt as well as pan.
            let el = if i % 2 == 0 {
                spec.min_elevation_deg
            } else {
                spec.max_elevation_deg
            }
            .to_radians()
                + rng.random_range(-0.05..0.05);
            let r = spec.radius * (1.0 + rng.random_range(-1.0..=1.0) * spec.radius_jitter);
            let eye = target + Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * r;
            let j = spec.target_jitter;
            let aim = target
                + Vec3::new(
                    rng.random_range(-1.0..=1.0) * j,
                    rng.random_range(-1.0..=1.0) * j,
                    rng.random_range(-1.0..=1.0) * j,
                );
            let roll = rng.random_range(-spec.max_roll_deg..=spec.max_roll_deg).to_radians();
            look_at(&eye, &aim, roll)
        })
        .collect();
    check_diversity(&poses)?;
    Ok(poses)
}

/// Cameras on a horizontal circle around the centroid with zero roll:
/// every relative rotation is about the vertical axis.
pub fn turntable_cameras(scene: &SceneSpec, spec: &TrajectorySpec) -> Vec<Pose> {
    let target = scene.centroid();
    let el = (0.5 * (spec.min_elevation_deg + spec.max_elevation_deg)).to_radians();
    let n = spec.num_poses.max(1);
    (0..n)
        .map(|i| {
            let az = spec.azimuth_span_deg.to_radians() * i as f64 / n as f64;
            let eye = target + Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * spec.radius;
            look_at(&eye, &target, 0.0)
        })
        .collect()
}

/// Errors unless consecutive relative rotations span at least two
/// non-parallel axes.
pub fn check_diversity(poses: &[Pose]) -> Result<(), SynthError> {
    let axes: Vec<Vec3> = poses
        .windows(2)
        .map(|w| *log_map(&(w[1].rotation * w[0].rotation.inverse())).vector())
        .filter(|v| v.norm() > 1e-6)
        .map(|v| v.normalize())
        .collect();
    let diverse = axes
        .iter()
        .enumerate()
        .any(|(i, a)| axes[i + 1..].iter().any(|b| a.cross(b).norm() > 1e-3));
    if diverse {
        Ok(())
    } else {
        Err(SynthError::InsufficientDiversity(
            "relative rotations share a single axis".into(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseProfile {
    /// Per-axis std of end-effector rotation noise, radians.
    pub ee_rot: f64,
    /// Per-axis std of end-effector translation noise, meters.
    pub ee_trans: f64,
    /// Pointmap noise std (model units) at confidence 1; scales as 1/confidence.
    pub pointmap: f64,
    /// Probability of dropping a pair outside the consecutive spanning chain.
    pub pair_dropout: f64,
    /// Log-std of the arbitrary per-pair prediction scale.
    pub pair_scale_jitter: f64,
}

impl NoiseProfile {
    pub fn zero() -> Self {
        NoiseProfile {
            ee_rot: 0.0,
            ee_trans: 0.0,
            pointmap: 0.0,
            pair_dropout: 0.0,
            pair_scale_jitter: 0.2,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.ee_rot, self.ee_trans, self.pointmap, self.pair_scale_jitter]
            .iter()
            .all(|s| s.is_finite() && *s >= 0.0)
            && (0.0..=1.0).contains(&self.pair_dropout)
    }
}

impl Default for NoiseProfile {
    /// 0.5° / 2 mm end-effector noise and confidence-scaled pointmap noise.
    fn default() -> Self {
        NoiseProfile {
            ee_rot: 0.5f64.to_radians(),
            ee_trans: 0.002,
            pointmap: 0.002,
            pair_dropout: 0.0,
            pair_scale_jitter: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub intrinsics: Intrinsics,
    /// End-effector from camera.
    pub hand_eye: Pose,
    /// Meters per model unit.
    pub scale: f64,
    pub noise: NoiseProfile,
    pub seed: u64,
}

impl DatasetSpec {
    /// Tabletop scene, 10 poses, `X = (rot, (0.03, -0.02, 0.10))`, λ = 0.5.
    pub fn standard(seed: u64, noise: NoiseProfile) -> Self {
        DatasetSpec {
            scene: SceneSpec::tabletop(),
            trajectory: TrajectorySpec::default(),
            intrinsics: Intrinsics::default(),
            hand_eye: Pose::new(
                Rotation::from_axis_angle(&Vec3::new(0.1, -0.15, 1.2)),
                Vec3::new(0.03, -0.02, 0.10),
                Frame::EndEffector,
            ),
            scale: 0.5,
            noise,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub hand_eye: Pose,
    pub scale: f64,
    /// Camera from base, metric.
    pub camera_metric: Vec<Pose>,
    /// Noise-free end-effector poses.
    pub end_effector: Vec<Pose>,
    /// Model units per meter of each pair's prediction, parallel to the graph.
    pub pair_scales: Vec<f64>,
    pub scene: SceneSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    /// Recorded (possibly noisy) end-effector poses.
    pub end_effector: Vec<Pose>,
    /// Exact camera from world poses in model units.
    pub camera_model: Vec<Pose>,
    pub predictions: Vec<PairwisePrediction>,
    pub graph: PairGraph,
    /// Per-view segmentation labels (-1 for background misses).
    pub labels: Vec<Vec<i32>>,
    pub colors: Vec<Vec<[f64; 3]>>,
    pub truth: GroundTruth,
}

/// RNG stream for one purpose of one dataset.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_TRAJECTORY: u64 = 1;
const STREAM_EE_NOISE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_PAIR_BASE: u64 = 1000;

/// Generates a complete dataset satisfying `E_n = X C_n` and
/// `P_n = C_n` with translations divided by λ.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, SynthError> {
    spec.scene.validate()?;
    spec.intrinsics.validate()?;
    if !spec.noise.is_valid() {
        return Err(SynthError::InvalidScene("noise parameters must be non-negative".into()));
    }
    if !(spec.scale > 0.0) {
        return Err(SynthError::InvalidScene("scale must be positive".into()));
    }
    let cameras = view_sphere_cameras(
        &spec.scene,
        &spec.trajectory,
        &mut stream(spec.seed, STREAM_TRAJECTORY),
    )?;
    build_dataset(spec, cameras)
}

/// Dataset from explicit camera poses (camera from base, metric).
pub fn build_dataset(spec: &DatasetSpec, cameras: Vec<Pose>) -> Result<Dataset, SynthError> {
    let n = cameras.len();
    if n < 2 {
        return Err(SynthError::InsufficientDiversity(format!("need at least 2 views, got {n}")));
    }
    let truth_ee: Vec<Pose> = cameras
        .iter()
        .map(|c| spec.hand_eye.compose(c).with_frame(Frame::EndEffector))
        .collect();
    let camera_model: Vec<Pose> = cameras
        .iter()
        .map(|c| c.with_scaled_translation(1.0 / spec.scale).with_frame(Frame::CameraModel))
        .collect();

    let mut ee_rng = stream(spec.seed, STREAM_EE_NOISE);
    let end_effector = truth_ee
        .iter()
        .map(|e| perturb_pose(e, spec.noise.ee_rot, spec.noise.ee_trans, &mut ee_rng))
        .collect();

    let casts: Vec<ViewCast> = cameras
        .iter()
        .map(|c| ray_cast(&spec.scene, c, &spec.intrinsics))
        .collect::<Result<_, _>>()?;

    let graph = dropout_graph(n, spec.noise.pair_dropout, &mut stream(spec.seed, STREAM_DROPOUT));
    let mut predictions = Vec::with_capacity(graph.edges.len());
    let mut pair_scales = Vec::with_capacity(graph.edges.len());
    for (e, &(a, b)) in graph.edges.iter().enumerate() {
        let mut rng = stream(spec.seed, STREAM_PAIR_BASE + e as u64);
        let jitter = if e == 0 {
            0.0
        } else {
            spec.noise.pair_scale_jitter * sample_normal(&mut rng)
        };
        let s = jitter.exp() / spec.scale;
        let b_to_a = cameras[a].compose(&cameras[b].inverse());
        let noisy = |p: Vec3, c: f64, rng: &mut ChaCha8Rng| -> Vec3 {
            if spec.noise.pointmap > 0.0 && c > 0.0 {
                let sd = spec.noise.pointmap / c;
                p + Vec3::new(sample_normal(rng), sample_normal(rng), sample_normal(rng)) * sd
            } else {
                p
            }
        };
        let pointmap_self = casts[a]
            .points
            .iter()
            .zip(&casts[a].confidence)
            .map(|(p, &c)| noisy(p * s, c, &mut rng))
            .collect();
        let pointmap_other = casts[b]
            .points
            .iter()
            .zip(&casts[b].confidence)
            .map(|(p, &c)| {
                let q = if c > 0.0 { b_to_a.transform_point(p) } else { Vec3::zeros() };
                noisy(q * s, c, &mut rng)
            })
            .collect();
        predictions.push(PairwisePrediction {
            first: a,
            second: b,
            width: spec.intrinsics.width,
            height: spec.intrinsics.height,
            pointmap_self,
            pointmap_other,
            confidence_self: casts[a].confidence.clone(),
            confidence_other: casts[b].confidence.clone(),
        });
        pair_scales.push(s);
    }

    Ok(Dataset {
        width: spec.intrinsics.width,
        height: spec.intrinsics.height,
        end_effector,
        camera_model,
        predictions,
        graph,
        labels: casts.iter().map(|c| c.labels.clone()).collect(),
        colors: casts.iter().map(|c| c.colors.clone()).collect(),
        truth: GroundTruth {
            hand_eye: spec.hand_eye,
            scale: spec.scale,
            camera_metric: cameras,
            end_effector: truth_ee,
            pair_scales,
            scene: spec.scene.clone(),
        },
    })
}

fn sample_normal(rng: &mut impl Rng) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

/// Left-multiplies a small random rotation and adds translation noise.
pub fn perturb_pose(p: &Pose, rot_sd: f64, trans_sd: f64, rng: &mut impl Rng) -> Pose {
    if rot_sd == 0.0 && trans_sd == 0.0 {
        return *p;
    }
    let w = Vec3::new(sample_normal(rng), sample_normal(rng), sample_normal(rng)) * rot_sd;
    let t = Vec3::new(sample_normal(rng), sample_normal(rng), sample_normal(rng)) * trans_sd;
    Pose::new(exp_map(&AxisAngle(w)) * p.rotation, p.translation + t, p.frame)
}

/// Complete graph (both orderings) minus randomly dropped pairs; the
/// consecutive chain `(i, i+1)` and `(i+1, i)` is always kept.
pub fn dropout_graph(n: usize, dropout: f64, rng: &mut impl Rng) -> PairGraph {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let chain = a.abs_diff(b) == 1;
            // Draw for every pair so the stream does not depend on `chain`.
            let drop = rng.random_range(0.0..1.0) < dropout;
            if chain || !drop {
                edges.push((a, b));
            }
        }
    }
    PairGraph {
        num_views: n,
        edges,
    }
}

/// End-effector poses whose relative rotations all share `axis`, for
/// exercising degeneracy detection.
pub fn single_axis_trajectory(n: usize, axis: &Vec3, rng: &mut impl Rng) -> Vec<Pose> {
    let axis = axis.normalize();
    let base = Pose::new(
        Rotation::from_axis_angle(&Vec3::new(0.2, -0.3, 0.1)),
        Vec3::new(0.3, 0.1, 0.4),
        Frame::EndEffector,
    );
    (0..n)
        .map(|i| {
            let angle = 0.15 * i as f64 + rng.random_range(0.0..0.05);
            let motion = Pose::new(
                Rotation::from_axis_angle(&(axis * angle)),
                Vec3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                ),
                Frame::EndEffector,
            );
            motion.compose(&base)
        })
        .collect()
}
