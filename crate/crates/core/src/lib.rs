//! A small CNN framework for cooking-state image classification: tensors and
//! layers, a truncated-VGG19 model with a custom head, optimizers, augmentation,
//! dataset ingestion, training and metrics.

pub mod augment;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
pub use model::{build, Model, ModelSpec};
pub use tensor::{Shape4, Tensor};
