//! Batched layers with forward caches and hand-written backward passes.
//!
//! Each layer exposes the same lifecycle: `forward` stores a cache,
//! `backward` consumes it (adding into the layer's gradient buffers) and
//! returns the gradient with respect to the layer input. `infer` evaluates
//! without touching any state.

mod activation;
mod conv;
mod dense;
mod norm;
pub(crate) mod similarity;
mod softmax;

pub use activation::Relu;
pub use conv::ConvLayer;
pub use dense::DenseLayer;
pub use norm::{BatchNorm, LayerNorm, NormMode, BATCHNORM_MOMENTUM, NORM_EPSILON};
pub use softmax::{softmax, SoftmaxRescale};

use crate::tensor::Tensor;

/// A learnable tensor and its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub(crate) fn accumulate(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.grad.len());
        for (g, d) in self.grad.data_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }
}
