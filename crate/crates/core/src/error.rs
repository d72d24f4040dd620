use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("header mismatch: {0}")]
    HeaderMismatch(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("unknown label {label} (not in vocabulary)")]
    UnknownLabel { label: i32 },

    #[error("region masks violate ET ⊆ TC ⊆ WT nesting at voxel {0:?}")]
    NestingViolation([usize; 3]),

    #[error("invalid region mapping: {0}")]
    InvalidMapping(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(String),

    #[error("image and label grids are misaligned: {0}")]
    MisalignedPair(String),

    #[error("unknown model variant `{0}`")]
    UnknownVariant(String),

    #[error("invalid architecture spec: {0}")]
    InvalidSpec(String),

    #[error("spatial shape {shape:?} not divisible by {divisor}")]
    IndivisibleShape { shape: [usize; 3], divisor: usize },

    #[error("invalid loss config: {0}")]
    InvalidLossConfig(String),

    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),

    #[error("dataset has no labeled training cases")]
    EmptyDataset,

    #[error("loss diverged at step {step}: {value}")]
    DivergedLoss { step: u64, value: f64 },

    #[error("patch of {voxels} voxels exceeds the inference budget of {budget}; use a smaller patch")]
    OomShape { voxels: usize, budget: usize },

    #[error("ensemble group is empty")]
    EmptyGroup,

    #[error("invalid ensemble config: {0}")]
    InvalidEnsemble(String),

    #[error("mask is empty")]
    EmptyMask,

    #[error("cohort is empty")]
    EmptyCohort,

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("malformed volume file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
