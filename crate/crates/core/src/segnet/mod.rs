//! Encoder-decoder segmentation model, training loop and checkpoints.

mod checkpoint;
mod model;
mod train;

pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, MAGIC, VERSION};
pub use model::{Layer, Model, ModelConfig, INPUT_CHANNELS};
pub use train::{mean_miou_unclipped, record_maxima, train, EpochLog, LabeledImages, TrainConfig, TrainReport};

use crate::error::Result;
use crate::tensor::Tensor;

pub fn build_model(config: ModelConfig, seed: u64) -> Result<Model> {
    Model::build(config, seed)
}

/// Evaluation-mode logits `(1, num_classes, H, W)` for a `1 × 3 × H × W` image.
pub fn predict(model: &Model, image: &Tensor<f32>) -> Result<Tensor<f32>> {
    model.predict(image)
}
