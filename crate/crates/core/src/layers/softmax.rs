use super::Param;
use crate::error::{Error, Result};
use crate::init::OUTPUT_SCALE_INIT;
use crate::tensor::Tensor;

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Output head: `softmax(γ_out · z)` with a single learnable scale.
///
/// Bounded kernels produce logits in `[-1, 1]`; the scale restores enough
/// dynamic range for a confident softmax.
#[derive(Debug, Clone)]
pub struct SoftmaxRescale {
    scale: Param,
    cache: Option<Tensor>,
}

impl Default for SoftmaxRescale {
    fn default() -> Self {
        Self::new(OUTPUT_SCALE_INIT)
    }
}

impl SoftmaxRescale {
    pub fn new(scale: f64) -> Self {
        Self {
            scale: Param::new(Tensor::scalar(scale)),
            cache: None,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale.value.data()[0]
    }

    pub fn param(&self) -> &Param {
        &self.scale
    }

    pub fn param_mut(&mut self) -> &mut Param {
        &mut self.scale
    }

    pub fn infer(&self, logits: &Tensor) -> Tensor {
        let s = self.scale();
        softmax(&logits.map(|v| v * s))
    }

    pub fn forward(&mut self, logits: &Tensor) -> Tensor {
        let out = self.infer(logits);
        self.cache = Some(logits.clone());
        out
    }

    /// Takes the gradient with respect to the scaled logits `γ_out · z` (what
    /// a fused softmax cross-entropy produces) and returns `∂L/∂z`.
    pub fn backward(&mut self, d_scaled: &Tensor) -> Result<Tensor> {
        let z = self.cache.take().ok_or(Error::MissingCache("softmax_rescale_backward"))?;
        if z.shape() != d_scaled.shape() {
            return Err(Error::Shape {
                op: "softmax_rescale_backward",
                left: d_scaled.shape().to_vec(),
                right: z.shape().to_vec(),
            });
        }
        let d_scale: f64 = d_scaled.data().iter().zip(z.data()).map(|(d, z)| d * z).sum();
        self.scale.grad.data_mut()[0] += d_scale;
        let s = self.scale();
        Ok(d_scaled.map(|v| v * s))
    }
}
