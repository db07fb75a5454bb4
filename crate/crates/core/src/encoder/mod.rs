//! Transformer encoder with a masked-token prediction head.

mod checkpoint;
mod config;
mod infer;
mod masking;
mod model;
mod train;

pub use config::{MaskingMode, ModelConfig};
pub use infer::{predict_next_distribution, predict_next_distributions, prediction_sample};
pub use masking::{mlm_mask, MaskedBatch, IGNORE_INDEX};
pub use model::{mlm_loss_graph, Batch, EncoderModel, ForwardOutput};
pub use train::{train, EpochReport, TrainOptions, TrainReport};
