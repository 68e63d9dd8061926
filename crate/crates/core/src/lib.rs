//! Video captioning with a training-only support set and semantic-space
//! losses, built on a small tape-based autodiff engine.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod counters;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod sst_losses;
pub mod support_set;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ModelDims, ModelParams};
pub use sst_losses::SstConfig;
pub use support_set::{Mode, SupportConfig};
pub use tensor::Tensor;
pub use training::{LossReport, TrainConfig};
pub use vocab::Vocabulary;
