//! Marker-free hand-eye calibration with unknown camera scale.
//!
//! Given end-effector poses `E_i` (end-effector from base, meters) and camera
//! poses `P_i` (camera from world, model units), solves
//! `T_E X = X T_P(λ)` for the camera-to-end-effector transform `X` and the
//! meters-per-model-unit scale `λ`:
//!
//! 1. rotation: `R = (MᵀM)^(-1/2) Mᵀ` with `M = Σ log(R_P) log(R_E)ᵀ`;
//! 2. translation + scale: for each `λ` the translation has the closed form
//!    `t(λ) = (CᵀC)⁻¹ Cᵀ d(λ)` with `C_i = I - R_E`, `d_i = t_E - λ R t_P`,
//!    and `λ` itself is found by a bracketed golden-section search.

use log::debug;
use nalgebra::{Matrix3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    inv_sqrt_psd, log_map, project_to_so3, relative_transform, Frame, GeometryError, Mat3, Pose,
    Rotation, Vec3, DEFAULT_MIN_EIGENVALUE,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("pose lists differ in length: {end_effector} end-effector vs {camera} camera poses")]
    LengthMismatch { end_effector: usize, camera: usize },
    #[error("need at least 3 poses, got {0}")]
    TooFewPoses(usize),
    #[error("insufficient rotation diversity: {0}")]
    DegenerateMotion(String),
    #[error("translation system is rank deficient (smallest eigenvalue of CᵀC = {min_eigenvalue:.3e})")]
    RankDeficientC { min_eigenvalue: f64 },
    #[error("scale optimum {scale:.6e} lies within 1% of search bound {bound:.6e}")]
    ScaleAtBound { scale: f64, bound: f64 },
    #[error("scale is unidentifiable: residual is flat over [{lo:.3e}, {hi:.3e}]")]
    ScaleUnidentifiable { lo: f64, hi: f64 },
    #[error("invalid scale search configuration: {0}")]
    InvalidSearch(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Relative end-effector motion paired with the matching camera motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionPair {
    /// `E_{j} E_{i}⁻¹`, meters.
    pub end_effector: Pose,
    /// `P_{j} P_{i}⁻¹`, model units.
    pub camera: Pose,
}

impl MotionPair {
    /// Difference of the two rotation angles; small for consistent data.
    pub fn angle_discrepancy(&self) -> f64 {
        (self.end_effector.rotation.angle() - self.camera.rotation.angle()).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    /// `(i, i+1)` for consecutive poses.
    #[default]
    Consecutive,
    /// Every `(i, j)` with `i < j`.
    AllPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaleSearchConfig {
    pub lower: f64,
    pub upper: f64,
    /// Log-spaced probes used to bracket the basin before golden-section.
    pub probes: usize,
    /// Relative tolerance on λ.
    pub rel_tol: f64,
    /// Optimum within this relative distance of a bound is rejected.
    pub bound_margin: f64,
}

impl Default for ScaleSearchConfig {
    fn default() -> Self {
        ScaleSearchConfig {
            lower: 1e-3,
            upper: 1e3,
            probes: 20,
            rel_tol: 1e-8,
            bound_margin: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub pairing: PairingMode,
    pub scale_search: ScaleSearchConfig,
    /// Convergence threshold on mean δ_t (meters).
    pub tau_translation: f64,
    /// Convergence threshold on mean δ_R.
    pub tau_rotation: f64,
    /// Singular-value ratio of M below which a direction counts as missing.
    pub rank_tol: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            pairing: PairingMode::Consecutive,
            scale_search: ScaleSearchConfig::default(),
            tau_translation: 0.1,
            tau_rotation: 0.15,
            rank_tol: 1e-6,
        }
    }
}

/// Per-pair hand-eye residual `δT = T_E X - X T_P(λ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairResidual {
    /// L2 norm of the translation block, meters.
    pub translation: f64,
    /// Frobenius norm of the rotation block.
    pub rotation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub rotation: Rotation,
    /// Camera origin in the end-effector frame, meters.
    pub translation: Vec3,
    /// Meters per model unit.
    pub scale: f64,
    pub residuals: Vec<PairResidual>,
    pub converged: bool,
    pub num_pairs: usize,
}

impl CalibrationResult {
    /// End-effector from camera (metric).
    pub fn hand_eye(&self) -> Pose {
        Pose::new(self.rotation, self.translation, Frame::EndEffector)
    }

    pub fn mean_translation_residual(&self) -> f64 {
        mean(self.residuals.iter().map(|r| r.translation))
    }

    pub fn mean_rotation_residual(&self) -> f64 {
        mean(self.residuals.iter().map(|r| r.rotation))
    }

    pub fn max_translation_residual(&self) -> f64 {
        self.residuals.iter().map(|r| r.translation).fold(0.0, f64::max)
    }

    pub fn max_rotation_residual(&self) -> f64 {
        self.residuals.iter().map(|r| r.rotation).fold(0.0, f64::max)
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        return 0.0;
    }
    it.sum::<f64>() / n as f64
}

/// Consecutive relative motions `(E_{i+1} E_i⁻¹, P_{i+1} P_i⁻¹)`.
pub fn motion_pairs(
    end_effector: &[Pose],
    camera: &[Pose],
) -> Result<Vec<MotionPair>, CalibrationError> {
    motion_pairs_with(end_effector, camera, PairingMode::Consecutive)
}

pub fn motion_pairs_with(
    end_effector: &[Pose],
    camera: &[Pose],
    mode: PairingMode,
) -> Result<Vec<MotionPair>, CalibrationError> {
    if end_effector.len() != camera.len() {
        return Err(CalibrationError::LengthMismatch {
            end_effector: end_effector.len(),
            camera: camera.len(),
        });
    }
    let n = end_effector.len();
    if n < 3 {
        return Err(CalibrationError::TooFewPoses(n));
    }
    let make = |i: usize, j: usize| MotionPair {
        end_effector: relative_transform(&end_effector[i], &end_effector[j]),
        camera: relative_transform(&camera[i], &camera[j]),
    };
    let pairs = match mode {
        PairingMode::Consecutive => (0..n - 1).map(|i| make(i, i + 1)).collect(),
        PairingMode::AllPairs => (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| make(i, j))
            .collect(),
    };
    Ok(pairs)
}

fn singular_ratios(m: &Mat3) -> (f64, f64) {
    let sv = SVD::new(*m, false, false).singular_values;
    let mut s = [sv[0], sv[1], sv[2]];
    s.sort_by(|a, b| b.total_cmp(a));
    if s[0] <= 0.0 {
        return (0.0, 0.0);
    }
    (s[1] / s[0], s[2] / s[0])
}

/// Best-fit rotation from the log-map outer products.
///
/// Pairs spanning only two rotation-axis directions make `M` rank 2; the
/// missing direction is supplied by the cross product of the two most
/// distinct axes, which the rotation maps consistently.
pub fn solve_rotation(pairs: &[MotionPair]) -> Result<Rotation, CalibrationError> {
    solve_rotation_with_tol(pairs, CalibrationConfig::default().rank_tol)
}

pub fn solve_rotation_with_tol(
    pairs: &[MotionPair],
    rank_tol: f64,
) -> Result<Rotation, CalibrationError> {
    if pairs.len() < 2 {
        return Err(CalibrationError::DegenerateMotion(format!(
            "need at least 2 motion pairs, got {}",
            pairs.len()
        )));
    }
    let logs: Vec<(Vec3, Vec3)> = pairs
        .iter()
        .map(|p| {
            (
                *log_map(&p.end_effector.rotation).vector(),
                *log_map(&p.camera.rotation).vector(),
            )
        })
        .collect();

    let mut m: Mat3 = logs.iter().map(|(a, b)| b * a.transpose()).sum();
    let (r2, r3) = singular_ratios(&m);
    if r2 < rank_tol {
        return Err(CalibrationError::DegenerateMotion(
            "all rotation axes are parallel".into(),
        ));
    }
    if r3 < rank_tol {
        let mut best = (0usize, 0usize, 0.0f64);
        for i in 0..logs.len() {
            for j in i + 1..logs.len() {
                let c = logs[i].0.cross(&logs[j].0).norm();
                if c > best.2 {
                    best = (i, j, c);
                }
            }
        }
        let (i, j, _) = best;
        let a = logs[i].0.cross(&logs[j].0);
        let b = logs[i].1.cross(&logs[j].1);
        debug!("rank-2 rotation system; augmenting with cross product of pairs {i} and {j}");
        m += b * a.transpose();
        let (_, r3) = singular_ratios(&m);
        if r3 < rank_tol {
            return Err(CalibrationError::DegenerateMotion(format!(
                "rotation system rank < 3 (singular value ratio {r3:.3e})"
            )));
        }
    }

    let mtm = m.transpose() * m;
    let floor = DEFAULT_MIN_EIGENVALUE * mtm.norm().max(1.0);
    let s = inv_sqrt_psd(&mtm, floor).map_err(|e| match e {
        GeometryError::DegenerateMatrix { .. } => {
            CalibrationError::DegenerateMotion(e.to_string())
        }
        other => other.into(),
    })?;
    let mut r = s * m.transpose();
    if r.determinant() < 0.0 {
        debug!("best-fit rotation is a reflection; projecting to SO(3)");
    }
    r = project_to_so3(&r);
    Ok(Rotation::from_matrix_normalized(r)?)
}

/// Precomputed least-squares system for the translation stage.
///
/// `t(λ) = a - λ b` where `a = (CᵀC)⁻¹ Cᵀ t_E` and `b = (CᵀC)⁻¹ Cᵀ (R t_P)`.
struct TranslationSystem<'a> {
    pairs: &'a [MotionPair],
    rotation: Rotation,
    base: Vec3,
    slope: Vec3,
}

impl<'a> TranslationSystem<'a> {
    fn new(pairs: &'a [MotionPair], rotation: &Rotation) -> Result<Self, CalibrationError> {
        let mut ctc = Mat3::zeros();
        let mut ct_te = Vec3::zeros();
        let mut ct_g = Vec3::zeros();
        for p in pairs {
            let c = Mat3::identity() - p.end_effector.rotation.matrix();
            let g = rotation.rotate(&p.camera.translation);
            ctc += c.transpose() * c;
            ct_te += c.transpose() * p.end_effector.translation;
            ct_g += c.transpose() * g;
        }
        let eig = ctc.symmetric_eigenvalues();
        let lo = eig.min();
        let hi = eig.max();
        if lo <= 1e-9 * hi.max(1e-3) {
            return Err(CalibrationError::RankDeficientC { min_eigenvalue: lo });
        }
        let inv: Matrix3<f64> = ctc
            .try_inverse()
            .ok_or(CalibrationError::RankDeficientC { min_eigenvalue: lo })?;
        Ok(TranslationSystem {
            pairs,
            rotation: *rotation,
            base: inv * ct_te,
            slope: inv * ct_g,
        })
    }

    fn translation(&self, scale: f64) -> Vec3 {
        self.base - self.slope * scale
    }

    fn cost(&self, scale: f64) -> f64 {
        srp_cost(self.pairs, &self.rotation, &self.translation(scale), scale)
    }
}

/// Closed-form translation for a fixed scale.
pub fn translation_for_scale(
    pairs: &[MotionPair],
    rotation: &Rotation,
    scale: f64,
) -> Result<Vec3, CalibrationError> {
    Ok(TranslationSystem::new(pairs, rotation)?.translation(scale))
}

/// Scale-recovery objective `Σ ||C_i t - d_i(λ)||²`.
pub fn srp_cost(pairs: &[MotionPair], rotation: &Rotation, translation: &Vec3, scale: f64) -> f64 {
    pairs
        .iter()
        .map(|p| {
            let c = Mat3::identity() - p.end_effector.rotation.matrix();
            let d = p.end_effector.translation - rotation.rotate(&p.camera.translation) * scale;
            (c * translation - d).norm_squared()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslationScale {
    pub translation: Vec3,
    pub scale: f64,
    pub cost: f64,
}

/// Joint translation and scale: log-spaced pre-scan to bracket the basin,
/// then golden-section on `ln λ`.
pub fn solve_translation_scale(
    pairs: &[MotionPair],
    rotation: &Rotation,
    search: &ScaleSearchConfig,
) -> Result<TranslationScale, CalibrationError> {
    if !(search.lower > 0.0 && search.upper > search.lower && search.probes >= 3) {
        return Err(CalibrationError::InvalidSearch(format!(
            "need 0 < lower < upper and probes >= 3, got [{}, {}] with {} probes",
            search.lower, search.upper, search.probes
        )));
    }
    let system = TranslationSystem::new(pairs, rotation)?;
    let (ln_lo, ln_hi) = (search.lower.ln(), search.upper.ln());
    let step = (ln_hi - ln_lo) / (search.probes - 1) as f64;
    let probes: Vec<(f64, f64)> = (0..search.probes)
        .map(|k| {
            let u = ln_lo + step * k as f64;
            (u, system.cost(u.exp()))
        })
        .collect();

    let (kmin, &(_, fmin)) = probes
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("at least 3 probes");
    let fmax = probes.iter().map(|p| p.1).fold(f64::MIN, f64::max);
    // Flat relative to the data, not just to itself: an exactly zero curve
    // is pure rounding noise.
    let data: f64 = pairs.iter().map(|p| p.end_effector.translation.norm_squared()).sum();
    if fmax - fmin <= 1e-12 * (fmax.abs() + data).max(f64::MIN_POSITIVE) {
        return Err(CalibrationError::ScaleUnidentifiable {
            lo: search.lower,
            hi: search.upper,
        });
    }

    let a = probes[kmin.saturating_sub(1)].0;
    let b = probes[(kmin + 1).min(probes.len() - 1)].0;
    let (u, _) = golden_section(|u| system.cost(u.exp()), a, b, search.rel_tol);
    let scale = u.exp();

    for bound in [search.lower, search.upper] {
        if (scale / bound - 1.0).abs() < search.bound_margin {
            return Err(CalibrationError::ScaleAtBound { scale, bound });
        }
    }
    Ok(TranslationScale {
        translation: system.translation(scale),
        scale,
        cost: system.cost(scale),
    })
}

/// Minimizes a unimodal `f` on `[a, b]` until the bracket is narrower
/// than `tol`. Returns `(x, f(x))`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    // 200 iterations shrink any finite bracket below f64 resolution.
    for _ in 0..200 {
        if (b - a).abs() <= tol {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Per-pair residual norms of `T_E X - X T_P(λ)`.
pub fn residuals(
    pairs: &[MotionPair],
    rotation: &Rotation,
    translation: &Vec3,
    scale: f64,
) -> Vec<PairResidual> {
    let x = Pose::new(*rotation, *translation, Frame::EndEffector).to_homogeneous();
    pairs
        .iter()
        .map(|p| {
            let te = p.end_effector.to_homogeneous();
            let tp = p.camera.with_scaled_translation(scale).to_homogeneous();
            let delta = te * x - x * tp;
            PairResidual {
                translation: delta.fixed_view::<3, 1>(0, 3).norm(),
                rotation: delta.fixed_view::<3, 3>(0, 0).norm(),
            }
        })
        .collect()
}

/// Full calibration: motion pairs, rotation, translation + scale, residuals.
pub fn calibrate(
    end_effector: &[Pose],
    camera: &[Pose],
    config: &CalibrationConfig,
) -> Result<CalibrationResult, CalibrationError> {
    let pairs = motion_pairs_with(end_effector, camera, config.pairing)?;
    let rotation = solve_rotation_with_tol(&pairs, config.rank_tol)?;
    let ts = solve_translation_scale(&pairs, &rotation, &config.scale_search)?;
    let residuals = residuals(&pairs, &rotation, &ts.translation, ts.scale);
    let mut result = CalibrationResult {
        rotation,
        translation: ts.translation,
        scale: ts.scale,
        residuals,
        converged: false,
        num_pairs: pairs.len(),
    };
    result.converged = result.mean_translation_residual() < config.tau_translation
        && result.mean_rotation_residual() < config.tau_rotation;
    debug!(
        "calibrated: scale {:.6}, mean δt {:.4e}, mean δR {:.4e}, converged {}",
        result.scale,
        result.mean_translation_residual(),
        result.mean_rotation_residual(),
        result.converged
    );
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_map, AxisAngle};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, frame: Frame) -> Pose {
        let v = Vec3::new(
            rng.random_range(-1.2..1.2),
            rng.random_range(-1.2..1.2),
            rng.random_range(-1.2..1.2),
        );
        let t = Vec3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        Pose::new(exp_map(&AxisAngle(v)), t, frame)
    }

    /// Camera poses consistent with `E_i = X P_i(λ) W` for a fixed world `W`.
    fn consistent_poses(
        rng: &mut ChaCha8Rng,
        n: usize,
        x: &Pose,
        scale: f64,
    ) -> (Vec<Pose>, Vec<Pose>) {
        let w = random_pose(rng, Frame::CameraMetric);
        let ee: Vec<Pose> = (0..n).map(|_| random_pose(rng, Frame::EndEffector)).collect();
        let cam = ee
            .iter()
            .map(|e| {
                let metric = x.inverse().compose(e).compose(&w.inverse());
                metric.with_scaled_translation(1.0 / scale).with_frame(Frame::CameraModel)
            })
            .collect();
        (ee, cam)
    }

    fn ground_truth(rng: &mut ChaCha8Rng) -> Pose {
        random_pose(rng, Frame::EndEffector)
    }

    #[test]
    fn identical_poses_give_identity_motion() {
        let p = Pose::new(
            Rotation::from_axis_angle(&Vec3::new(0.1, 0.2, 0.3)),
            Vec3::new(1.0, 2.0, 3.0),
            Frame::EndEffector,
        );
        let pairs = motion_pairs(&[p, p, p], &[p, p, p]).unwrap();
        assert_eq!(pairs.len(), 2);
        assert!(pairs[0].end_effector.rotation.angle() < 1e-12);
        assert!(pairs[0].end_effector.translation.norm() < 1e-12);
    }

    #[test]
    fn motion_pairs_match_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ee: Vec<Pose> = (0..3).map(|_| random_pose(&mut rng, Frame::EndEffector)).collect();
        let cam: Vec<Pose> = (0..3).map(|_| random_pose(&mut rng, Frame::CameraModel)).collect();
        let pairs = motion_pairs(&ee, &cam).unwrap();
        for i in 0..2 {
            let expect = ee[i + 1].to_homogeneous() * ee[i].to_homogeneous().try_inverse().unwrap();
            assert!((pairs[i].end_effector.to_homogeneous() - expect).norm() < 1e-12);
            let expect = cam[i + 1].to_homogeneous() * cam[i].to_homogeneous().try_inverse().unwrap();
            assert!((pairs[i].camera.to_homogeneous() - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn motion_pairs_errors() {
        let p = Pose::identity(Frame::EndEffector);
        assert_eq!(
            motion_pairs(&[p, p], &[p, p, p]),
            Err(CalibrationError::LengthMismatch {
                end_effector: 2,
                camera: 3
            })
        );
        assert_eq!(motion_pairs(&[p, p], &[p, p]), Err(CalibrationError::TooFewPoses(2)));
    }

    #[test]
    fn all_pairs_mode_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ee: Vec<Pose> = (0..5).map(|_| random_pose(&mut rng, Frame::EndEffector)).collect();
        let pairs = motion_pairs_with(&ee, &ee, PairingMode::AllPairs).unwrap();
        assert_eq!(pairs.len(), 10);
    }

    #[test]
    fn rotation_identity_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Pose::identity(Frame::EndEffector);
        let (ee, cam) = consistent_poses(&mut rng, 8, &x, 1.0);
        let r = solve_rotation(&motion_pairs(&ee, &cam).unwrap()).unwrap();
        assert!((r.matrix() - Mat3::identity()).norm() < 1e-9);
    }

    #[test]
    fn rotation_recovery_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = ground_truth(&mut rng);
        let (ee, cam) = consistent_poses(&mut rng, 21, &x, 0.7);
        let r = solve_rotation(&motion_pairs(&ee, &cam).unwrap()).unwrap();
        assert!((r.matrix() - x.rotation.matrix()).norm() < 1e-6);
    }

    #[test]
    fn rotation_two_axis_directions_uses_cross_product() {
        let x = Pose::new(
            Rotation::from_axis_angle(&Vec3::new(0.3, -0.5, 0.2)),
            Vec3::zeros(),
            Frame::EndEffector,
        );
        let axes = [Vec3::x(), Vec3::y(), Vec3::x() * 0.5];
        let pairs: Vec<MotionPair> = axes
            .iter()
            .map(|a| {
                let te = Pose::new(Rotation::from_axis_angle(&(a * 0.7)), Vec3::zeros(), Frame::EndEffector);
                let tp = x.inverse().compose(&te).compose(&x);
                MotionPair { end_effector: te, camera: tp }
            })
            .collect();
        let r = solve_rotation(&pairs).unwrap();
        assert!(r.angle_to(&x.rotation) < 1e-9);
    }

    #[test]
    fn rotation_single_axis_is_degenerate() {
        let x = Pose::new(
            Rotation::from_axis_angle(&Vec3::new(0.3, -0.5, 0.2)),
            Vec3::new(0.0, 0.1, 0.0),
            Frame::EndEffector,
        );
        let axis = Vec3::new(1.0, 1.0, 0.0).normalize();
        let pairs: Vec<MotionPair> = (1..6)
            .map(|k| {
                let te = Pose::new(
                    Rotation::from_axis_angle(&(axis * 0.2 * k as f64)),
                    Vec3::new(0.01 * k as f64, 0.0, 0.0),
                    Frame::EndEffector,
                );
                MotionPair { end_effector: te, camera: x.inverse().compose(&te).compose(&x) }
            })
            .collect();
        assert!(matches!(solve_rotation(&pairs), Err(CalibrationError::DegenerateMotion(_))));
    }

    #[test]
    fn translation_scale_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Pose::new(
            Rotation::from_axis_angle(&Vec3::new(0.2, 0.4, -0.1)),
            Vec3::new(0.03, -0.02, 0.10),
            Frame::EndEffector,
        );
        let (ee, cam) = consistent_poses(&mut rng, 10, &x, 0.5);
        let pairs = motion_pairs(&ee, &cam).unwrap();
        let ts = solve_translation_scale(&pairs, &x.rotation, &ScaleSearchConfig::default()).unwrap();
        assert!((ts.scale / 0.5 - 1.0).abs() < 1e-6, "scale {}", ts.scale);
        assert!((ts.translation - x.translation).norm() / x.translation.norm() < 1e-6);
    }

    #[test]
    fn closed_form_beats_random_translations() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = ground_truth(&mut rng);
        let (ee, mut cam) = consistent_poses(&mut rng, 8, &x, 0.5);
        // Noise so the optimum is not exactly zero.
        for c in cam.iter_mut() {
            c.translation += Vec3::new(rng.random_range(-0.01..0.01), 0.0, rng.random_range(-0.01..0.01));
        }
        let pairs = motion_pairs(&ee, &cam).unwrap();
        let t = translation_for_scale(&pairs, &x.rotation, 0.5).unwrap();
        let best = srp_cost(&pairs, &x.rotation, &t, 0.5);
        for _ in 0..1000 {
            let cand = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            assert!(best <= srp_cost(&pairs, &x.rotation, &cand, 0.5));
        }
    }

    #[test]
    fn zero_camera_translation_is_unidentifiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = ground_truth(&mut rng);
        let (ee, cam) = consistent_poses(&mut rng, 8, &x, 0.5);
        let mut pairs = motion_pairs(&ee, &cam).unwrap();
        for p in pairs.iter_mut() {
            p.camera.translation = Vec3::zeros();
        }
        let err = solve_translation_scale(&pairs, &x.rotation, &ScaleSearchConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            CalibrationError::ScaleUnidentifiable { .. } | CalibrationError::ScaleAtBound { .. }
        ));
    }

    #[test]
    fn scale_outside_search_range_hits_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = ground_truth(&mut rng);
        let (ee, cam) = consistent_poses(&mut rng, 8, &x, 50.0);
        let pairs = motion_pairs(&ee, &cam).unwrap();
        let search = ScaleSearchConfig { lower: 0.01, upper: 10.0, ..Default::default() };
        assert!(matches!(
            solve_translation_scale(&pairs, &x.rotation, &search),
            Err(CalibrationError::ScaleAtBound { .. })
        ));
    }

    #[test]
    fn pure_translation_motion_is_rank_deficient() {
        let pairs: Vec<MotionPair> = (0..4)
            .map(|k| MotionPair {
                end_effector: Pose::new(Rotation::identity(), Vec3::new(0.1, k as f64 * 0.05, 0.0), Frame::EndEffector),
                camera: Pose::new(Rotation::identity(), Vec3::new(0.2, k as f64 * 0.1, 0.0), Frame::CameraModel),
            })
            .collect();
        assert!(matches!(
            solve_translation_scale(&pairs, &Rotation::identity(), &ScaleSearchConfig::default()),
            Err(CalibrationError::RankDeficientC { .. })
        ));
    }

    #[test]
    fn residuals_zero_when_consistent_and_grow_with_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = ground_truth(&mut rng);
        let (ee, cam) = consistent_poses(&mut rng, 10, &x, 0.5);
        let pairs = motion_pairs(&ee, &cam).unwrap();
        let res = residuals(&pairs, &x.rotation, &x.translation, 0.5);
        assert!(res.iter().all(|r| r.translation < 1e-9 && r.rotation < 1e-9));
        let mean_t = |r: &[PairResidual]| r.iter().map(|x| x.translation).sum::<f64>() / r.len() as f64;
        let bumped = residuals(&pairs, &x.rotation, &(x.translation + Vec3::new(0.01, 0.0, 0.0)), 0.5);
        assert!(mean_t(&bumped) > mean_t(&res));
    }

    #[test]
    fn calibrate_end_to_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = ground_truth(&mut rng);
        let (ee, cam) = consistent_poses(&mut rng, 10, &x, 0.5);
        let res = calibrate(&ee, &cam, &CalibrationConfig::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.num_pairs, 9);
        assert!(res.rotation.angle_to(&x.rotation) < 1e-8);
        assert!((res.translation - x.translation).norm() < 1e-6);
        assert!((res.scale / 0.5 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn golden_section_on_parabola() {
        let (x, fx) = golden_section(|x| (x - 1.234).powi(2), -10.0, 10.0, 1e-10);
        assert!((x - 1.234).abs() < 1e-9);
        assert!(fx < 1e-18);
        // A constant offset limits resolution to about sqrt(eps).
        let (x, _) = golden_section(|x| (x - 1.234).powi(2) + 2.0, -10.0, 10.0, 1e-10);
        assert!((x - 1.234).abs() < 1e-7);
    }
}
