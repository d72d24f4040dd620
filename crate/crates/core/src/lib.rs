//! Multi-modal 3D brain tumor segmentation: data model and NIfTI I/O,
//! augmentation, UNet3D/ONet3D networks with their training loop, sliding
//! window inference with group ensembling, mask postprocessing and
//! lesion-wise evaluation.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod infer;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod morphology;
pub mod nifti;
pub mod nn;
pub mod optim;
pub mod postprocess;
pub mod synth;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use model::{spec_for_variant, ArchitectureSpec, Model};
pub use volume::{LabelMap, Mask, MultiModalVolume, Region, RegionMapping, RegionMaskSet};
