//! Forward and backward kernels for the layer types the segmentation model uses.

mod conv;
mod loss;
mod upsample;

pub use conv::{conv2d_backward, conv2d_forward, Conv2d, ConvGrads};
pub(crate) use conv::conv2d_backward_into;
pub use loss::{cross_entropy_loss, softmax_channels};
pub use upsample::{upsample_nearest, upsample_nearest_backward};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-layer forward inputs cached for the backward pass.
#[derive(Clone, Debug)]
pub struct GradientTape<T = f32> {
    inputs: Vec<Option<Tensor<T>>>,
}

impl<T: Element> GradientTape<T> {
    pub fn new(layers: usize) -> Self {
        Self {
            inputs: vec![None; layers],
        }
    }

    pub fn record(&mut self, layer: usize, input: Tensor<T>) {
        self.inputs[layer] = Some(input);
    }

    pub fn cached_input(&self, layer: usize, op: &'static str) -> Result<&Tensor<T>> {
        self.inputs
            .get(layer)
            .and_then(Option::as_ref)
            .ok_or(Error::MissingForwardCache(op))
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}
