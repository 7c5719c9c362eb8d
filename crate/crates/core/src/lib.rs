//! Volumetric segmentation engine.
//!
//! A 3D fully-convolutional U-shaped network built from hand-differentiated
//! layer primitives, trained with a per-class Jaccard-distance loss, plus
//! evaluation metrics, augmentation, receptive-field analysis, synthetic
//! data and a finite-difference gradient checker.

pub mod augment;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod rf;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use layers::{BatchNormConfig, BatchNormState, ConvKind, ConvParams, Mode, PReluParams};
pub use loss::{ClassSet, LossKind};
pub use metrics::{RegionMap, RegionMetrics};
pub use network::{ArchSpec, InitScheme, Network, OutputActivation, SegmentationOutput, SkipMode};
pub use optim::{AdamConfig, Sample, TrainConfig};
pub use tensor::{LabelVolume, Real, Tensor};
