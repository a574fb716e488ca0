//! Neural decoder: reverse-mode autodiff over dense f64 tensors, the
//! Conformer classifier, losses, training loop and checkpoints.

pub mod checkpoint;
pub mod decoder;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use decoder::ConformerDecoder;
pub use graph::{Graph, Var};
pub use model::{Model, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainData};
