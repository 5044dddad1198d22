//! Layer-transition-discrepancy detector for AI-generated images.
//!
//! A frozen ViT backbone yields the CLS token after every layer. The head picks
//! a window of consecutive mid-level layers with a straight-through
//! Gumbel-softmax, differences adjacent layers, runs raw and differenced
//! sequences through a shared transformer block and classifies real vs fake.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod archive;
pub mod autodiff;
pub mod backbone;
pub mod block;
pub mod data;
pub mod error;
pub mod head;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;

pub use analysis::{export_features, layer_profiles, FeatureTable, LayerProfile};
pub use archive::{Archive, NormConstants};
pub use autodiff::{Gradients, Tape, Var};
pub use backbone::{BackboneConfig, BackboneWeights, LayerFeatures};
pub use block::{Activation, BlockParams, BlockShape};
pub use data::{DatasetManifest, DegradeSpec, ImageTensor, PreprocessTarget, Record, FAKE, REAL};
pub use error::{ArchiveError, LtdError, Result};
pub use head::{Branches, HeadConfig, LtdHeadParams, SelectMode, SelectionResult};
pub use metrics::{accuracy, average_precision, MetricsReport};
pub use optim::{AdamConfig, AdamState};
pub use tensor::{Real, Tensor};
pub use train::{evaluate, resume, train, Checkpoint, EpochLog, TrainConfig};
