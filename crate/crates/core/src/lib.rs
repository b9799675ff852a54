//! Restricted Boltzmann Machines, Deep Belief Networks and the residual
//! (layer-wise reinforced) DBN variant, with greedy pretraining, softmax
//! fine-tuning, IDX dataset loading and paired significance testing.

pub mod config;
pub mod data;
pub mod dbn;
mod error;
pub mod experiment;
pub mod finetune;
pub mod model_io;
pub mod rbm;
pub mod rng;
pub mod stats;

pub use data::{DatasetSplit, PixelEncoding};
pub use dbn::{DbnMode, DbnModel, LayerActivation, PretrainConfig, PretrainReport};
pub use error::{Error, Result};
pub use finetune::{ClassifierModel, FineTuneConfig, SoftmaxHead};
pub use rbm::{BinaryVector, CdOptions, ProbVector, RbmLayer};
pub use rng::RngStream;
