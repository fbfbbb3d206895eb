//! Siamese change detection on image pairs, built on a small reverse-mode
//! autodiff engine.

pub mod augment;
pub mod backbone;
pub mod config;
pub mod cross_transformer;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod relation_aware;
pub mod scale_aware;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use config::{AugmentConfig, DataConfig, Difficulty, NetworkConfig, RunConfig, Selection, Toggles, TrainConfig};
pub use dataset::{ChangePair, DatasetSplit, PatchRef};
pub use error::{Error, Result};
pub use metrics::{ConfusionStats, Scores};
pub use model::{ChangeDetector, Trace};
pub use tensor::{Checkpoint, Graph, ParamId, ParamStore, Parameter, Precision, Scalar, Tensor, Var};
