//! The decoder testbed: configuration, positional interpolation, the model
//! and its backward pass, loss, optimiser, training loop and checkpoints.

mod checkpoint;
mod config;
mod loss;
mod model;
mod optim;
mod positions;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{DecoderConfig, TrainConfig};
pub use loss::cross_entropy;
pub use model::{
    DecoderModel, ForwardTrace, Generation, GenerationStatus, HeadTrace, LayerWeights, TrainItem, VisualPrefix, Weights,
};
pub use optim::{adamw_update, cosine_schedule, AdamW};
pub use positions::interpolate_positions;
pub use train::{train, StepRecord, TrainExample};
