//! Neural network layers with hand-written backward passes, the four OSD
//! architectures, and checkpoints.

pub mod attention;
pub mod checkpoint;
pub mod conv;
pub mod encoders;
pub mod layers;
pub mod lstm;
pub mod model;
pub mod params;

pub use checkpoint::Checkpoint;
pub use layers::Ctx;
pub use model::{build_model, EmbeddingMatrix, Family, ForwardCache, Model, ModelConfig, PredictionMatrix};
pub use params::{Grads, ParamStore};
