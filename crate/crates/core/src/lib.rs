//! Large-context 3D U-Net segmentation of small structures in CT volumes.
//!
//! The crate covers the whole pipeline: NIfTI ingestion, spacing and
//! intensity normalisation, patch geometry planning, a from-scratch 3D
//! U-Net with exact gradients, Dice + cross-entropy training with
//! Nesterov SGD, k-fold cross-validation, Gaussian-weighted sliding-window
//! inference with fold ensembling, and overlap/surface/volume metrics.

pub mod augment;
pub mod config;
pub mod error;
pub mod inference;
pub mod loss_grad;
pub mod metrics;
pub mod net;
pub mod nifti;
pub mod patch_plan;
pub mod pipeline;
pub mod preprocess;
pub mod render;
pub mod report;
pub mod rng;
pub mod synth;
pub mod trainer;
pub mod volume;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use volume::{Axis, Geometry, LabelMask, Volume3};
