//! Pipeline manifest: input files plus per-stage configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use jcr::alignment::AlignConfig;
use jcr::calibration::CalibrationConfig;
use jcr::fields::TrainConfig;
use jcr::geometry::{Frame, Pose, Rotation, Vec3};
use jcr::io::{self, PoseRecord};
use jcr::reconstruction::DEFAULT_CONFIDENCE_QUANTILE;
use jcr::synth::{Intrinsics, NoiseProfile, SceneSpec, TrajectorySpec};

use crate::error::{InStage, StageError};

/// Input files, relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Inputs {
    /// Pose-list JSON of end-effector poses, one per image.
    pub end_effector: PathBuf,
    /// `pairs.json` sidecar of the JCRPM1 pointmaps.
    pub pairs: PathBuf,
    /// Per-view segmentation label images (optional).
    pub segmentation: Vec<PathBuf>,
    /// Per-view color label images (optional).
    pub colors: Vec<PathBuf>,
    /// Synthetic ground truth, used only by `eval`.
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructConfig {
    /// Absolute confidence threshold; overrides the quantile.
    pub confidence_threshold: Option<f64>,
    pub confidence_quantile: f64,
    pub force_uncalibrated: bool,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        ReconstructConfig {
            confidence_threshold: None,
            confidence_quantile: DEFAULT_CONFIDENCE_QUANTILE,
            force_uncalibrated: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Occupancy,
    Segmentation,
    Color,
}

impl FieldKind {
    pub fn name(self) -> &'static str {
        match self {
            FieldKind::Occupancy => "occupancy",
            FieldKind::Segmentation => "segmentation",
            FieldKind::Color => "color",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldStage {
    pub train: TrainConfig,
    /// Fields to train; label-dependent ones are skipped when the cloud has
    /// no such labels.
    pub fields: Vec<FieldKind>,
}

impl Default for FieldStage {
    fn default() -> Self {
        FieldStage {
            train: TrainConfig::default(),
            fields: vec![FieldKind::Occupancy, FieldKind::Segmentation, FieldKind::Color],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineManifest {
    /// Single source of randomness; stages derive their own streams.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub inputs: Inputs,
    pub align: AlignConfig,
    pub calibrate: CalibrationConfig,
    pub reconstruct: ReconstructConfig,
    pub field: FieldStage,
    /// Directory the relative input paths resolve against. Not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineManifest {
    /// Loads and checks that every referenced input exists.
    pub fn load(path: &Path) -> Result<Self, StageError> {
        let mut m: PipelineManifest = io::read_json(path).stage("manifest")?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.check_inputs()?;
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn check_inputs(&self) -> Result<(), StageError> {
        let i = &self.inputs;
        let required = [("end_effector", &i.end_effector), ("pairs", &i.pairs)];
        for (name, p) in required {
            if p.as_os_str().is_empty() {
                return Err(StageError::input("manifest", format!("inputs.{name} is not set")));
            }
        }
        let all = required
            .iter()
            .map(|(_, p)| *p)
            .chain(&i.segmentation)
            .chain(&i.colors)
            .chain(i.ground_truth.as_ref());
        for p in all {
            let full = self.resolve(p);
            if !full.is_file() {
                return Err(StageError::input(
                    "manifest",
                    format!("referenced file {} does not exist", full.display()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// View sphere with look-at orientation and random roll.
    #[default]
    ViewSphere,
    /// Horizontal circle with zero roll; single rotation axis.
    Turntable,
}

/// Configuration of the `synth` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub trajectory_kind: TrajectoryKind,
    pub intrinsics: Intrinsics,
    /// Hidden end-effector-from-camera transform.
    pub hand_eye: PoseRecord,
    /// Hidden meters per model unit.
    pub scale: f64,
    pub noise: NoiseProfile,
    /// Stage settings copied into the generated pipeline manifest.
    pub pipeline: PipelineManifest,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let hand_eye = Pose::new(
            Rotation::from_axis_angle(&Vec3::new(0.1, -0.15, 1.2)),
            Vec3::new(0.03, -0.02, 0.10),
            Frame::EndEffector,
        );
        SynthConfig {
            scene: SceneSpec::tabletop(),
            trajectory: TrajectorySpec::default(),
            trajectory_kind: TrajectoryKind::ViewSphere,
            intrinsics: Intrinsics::default(),
            hand_eye: PoseRecord::from(&hand_eye),
            scale: 0.5,
            noise: NoiseProfile::default(),
            pipeline: PipelineManifest::default(),
        }
    }
}
