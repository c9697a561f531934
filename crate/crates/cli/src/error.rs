use std::fmt;

use jcr::alignment::AlignError;
use jcr::calibration::CalibrationError;
use jcr::fields::FieldError;
use jcr::geometry::GeometryError;
use jcr::io::IoError;
use jcr::reconstruction::ReconstructionError;
use jcr::synth::SynthError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Input,
    Degenerate,
    NonConvergence,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Input => 2,
            Kind::Degenerate => 3,
            Kind::NonConvergence => 4,
        }
    }
}

/// A failed stage: which one, how to exit, and why.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub kind: Kind,
    pub message: String,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage '{}' failed: {}", self.stage, self.message)
    }
}

impl std::error::Error for StageError {}

impl StageError {
    pub fn new(stage: &'static str, kind: Kind, message: impl Into<String>) -> Self {
        StageError {
            stage,
            kind,
            message: message.into(),
        }
    }

    pub fn input(stage: &'static str, message: impl Into<String>) -> Self {
        Self::new(stage, Kind::Input, message)
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

/// Errors that know their exit class.
pub trait Classify: fmt::Display {
    fn kind(&self) -> Kind;
}

impl Classify for IoError {
    fn kind(&self) -> Kind {
        Kind::Input
    }
}

impl Classify for AlignError {
    fn kind(&self) -> Kind {
        match self {
            AlignError::DisconnectedGraph { .. } | AlignError::UnposedView(_) => Kind::Degenerate,
            AlignError::NonConvergence { .. } => Kind::NonConvergence,
            _ => Kind::Input,
        }
    }
}

impl Classify for CalibrationError {
    fn kind(&self) -> Kind {
        match self {
            CalibrationError::DegenerateMotion(_)
            | CalibrationError::RankDeficientC { .. }
            | CalibrationError::ScaleUnidentifiable { .. }
            | CalibrationError::ScaleAtBound { .. }
            | CalibrationError::Geometry(GeometryError::DegenerateMatrix { .. }) => Kind::Degenerate,
            _ => Kind::Input,
        }
    }
}

impl Classify for ReconstructionError {
    fn kind(&self) -> Kind {
        match self {
            ReconstructionError::UncalibratedInput => Kind::NonConvergence,
            _ => Kind::Input,
        }
    }
}

impl Classify for FieldError {
    fn kind(&self) -> Kind {
        match self {
            FieldError::DegenerateBounds(_) | FieldError::SingleClass(_) => Kind::Degenerate,
            _ => Kind::Input,
        }
    }
}

impl Classify for SynthError {
    fn kind(&self) -> Kind {
        match self {
            SynthError::InsufficientDiversity(_) => Kind::Degenerate,
            _ => Kind::Input,
        }
    }
}

/// Tags a module error with its stage.
pub trait InStage<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T, E: Classify> InStage<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|e| StageError::new(stage, e.kind(), e.to_string()))
    }
}
