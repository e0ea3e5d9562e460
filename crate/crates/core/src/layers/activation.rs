use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `max(0, x)`. The gradient at exactly zero is taken as zero.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn infer(&self, input: &Tensor) -> Tensor {
        input.map(|v| v.max(0.0))
    }

    pub fn forward(&mut self, input: &Tensor) -> Tensor {
        let out = self.infer(input);
        self.cache = Some(input.clone());
        out
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let input = self.cache.take().ok_or(Error::MissingCache("relu_backward"))?;
        relu_backward(upstream, &input)
    }

    /// Smallest `|x|` seen by the last forward pass; useful to keep finite
    /// differences away from the kink.
    pub(crate) fn min_abs_input(&self) -> Option<f64> {
        self.cache
            .as_ref()
            .map(|t| t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())))
    }
}

/// Masks `upstream` where the cached input is not strictly positive.
pub fn relu_backward(upstream: &Tensor, input: &Tensor) -> Result<Tensor> {
    upstream.zip_map(input, |g, x| if x > 0.0 { g } else { 0.0 })
}
