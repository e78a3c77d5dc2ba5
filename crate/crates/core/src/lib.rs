//! Adversarially robust shape detector at desk scale.
//!
//! The crate implements a small SSD-style detector with dynamically mixed
//! convolution kernels, an adversarial image discriminator that produces the
//! mixing weights, a variational reconstruction head, the PGD attacks used to
//! train and evaluate it, mAP evaluation, and the gradient-conflict
//! diagnostics that motivate the design.

pub mod aaconv;
pub mod aid;
pub mod attack;
pub mod boxes;
pub mod cfr;
pub mod data;
pub mod detect;
pub mod diag;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod rng;
pub mod train;

pub use aaconv::KernelBank;
pub use aid::{MixtureWeights, SampleKind};
pub use attack::{AttackConfig, AttackLoss};
pub use boxes::{iou, BoxXYWH, CenterBox};
pub use cfr::GaussianFeature;
pub use data::{DatasetManifest, ImageSample, LoadedDataset};
pub use detect::{AnchorSet, DetectionSet, DetectorOutput, MatchResult};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use graph::{Graph, Tensor, Var};
pub use model::{DetectorModel, Mode, ModelConfig, Variant};
pub use train::{Checkpoint, LossWeights, TrainConfig};
