//! Layer and batch normalization baselines.

use super::Param;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to batch variances, and used as the floor on layer-norm standard
/// deviations.
pub const NORM_EPSILON: f64 = 1e-5;

/// Decay of batch-norm running statistics.
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
struct Affine {
    gamma: Param,
    beta: Param,
}

impl Affine {
    fn new(features: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::filled(&[features], 1.0)),
            beta: Param::new(Tensor::zeros(&[features])),
        }
    }
}

/// Standardizes each example over all of its features, optionally followed by
/// a learned per-feature re-scale `γ` and re-shift `β`.
///
/// The standard deviation is floored at [`NORM_EPSILON`] instead of being
/// padded by it, so rows with real spread normalize exactly to unit variance
/// and constant rows map to zeros.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    width: usize,
    epsilon: f64,
    affine: Option<Affine>,
    cache: Option<LnCache>,
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Tensor,
    sigma: Vec<f64>,
}

impl LayerNorm {
    pub fn new(width: usize, affine: bool) -> Result<Self> {
        if width < 2 {
            return Err(Error::WidthTooSmall(width));
        }
        Ok(Self {
            width,
            epsilon: NORM_EPSILON,
            affine: affine.then(|| Affine::new(width)),
            cache: None,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_affine(&self) -> bool {
        self.affine.is_some()
    }

    pub fn gamma(&self) -> Option<&Param> {
        self.affine.as_ref().map(|a| &a.gamma)
    }

    pub fn beta(&self) -> Option<&Param> {
        self.affine.as_ref().map(|a| &a.beta)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.affine.iter().flat_map(|a| [&a.gamma, &a.beta]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.affine.iter_mut().flat_map(|a| [&mut a.gamma, &mut a.beta]).collect()
    }

    fn normalize(&self, input: &Tensor) -> Result<LnCache> {
        if input.row_len() != self.width {
            return Err(Error::Shape {
                op: "layernorm_forward",
                left: input.shape().to_vec(),
                right: vec![self.width],
            });
        }
        let n = self.width as f64;
        let mut xhat = input.clone();
        let mut sigma = Vec::with_capacity(input.rows());
        for r in 0..input.rows() {
            let row = xhat.row_mut(r);
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let s = var.sqrt().max(self.epsilon);
            row.iter_mut().for_each(|v| *v = (*v - mu) / s);
            sigma.push(s);
        }
        Ok(LnCache { xhat, sigma })
    }

    fn scale_shift(&self, xhat: &Tensor) -> Tensor {
        let mut out = xhat.clone();
        if let Some(a) = &self.affine {
            for r in 0..out.rows() {
                for ((v, g), b) in out.row_mut(r).iter_mut().zip(a.gamma.value.data()).zip(a.beta.value.data()) {
                    *v = *v * g + b;
                }
            }
        }
        out
    }

    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.scale_shift(&self.normalize(input)?.xhat))
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let cache = self.normalize(input)?;
        let out = self.scale_shift(&cache.xhat);
        self.cache = Some(cache);
        Ok(out)
    }

    /// Differentiates through the per-example mean and standard deviation.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let LnCache { xhat, sigma } = self.cache.take().ok_or(Error::MissingCache("layernorm_backward"))?;
        if upstream.shape() != xhat.shape() {
            return Err(Error::Shape {
                op: "layernorm_backward",
                left: upstream.shape().to_vec(),
                right: xhat.shape().to_vec(),
            });
        }
        let n = self.width as f64;
        let mut dx = upstream.clone();
        if let Some(a) = self.affine.as_mut() {
            for r in 0..upstream.rows() {
                for (i, (&dy, &xh)) in upstream.row(r).iter().zip(xhat.row(r)).enumerate() {
                    a.gamma.grad.data_mut()[i] += dy * xh;
                    a.beta.grad.data_mut()[i] += dy;
                }
            }
            for r in 0..dx.rows() {
                for (v, g) in dx.row_mut(r).iter_mut().zip(a.gamma.value.data()) {
                    *v *= g;
                }
            }
        }
        for (r, &s) in sigma.iter().enumerate() {
            let xh = xhat.row(r);
            let row = dx.row_mut(r);
            let mean_g = row.iter().sum::<f64>() / n;
            if s > self.epsilon {
                let mean_gx = row.iter().zip(xh).map(|(g, x)| g * x).sum::<f64>() / n;
                for (v, &x) in row.iter_mut().zip(xh) {
                    *v = (*v - mean_g - x * mean_gx) / s;
                }
            } else {
                // Floored σ is a constant; only the mean depends on the input.
                for v in row.iter_mut() {
                    *v = (*v - mean_g) / s;
                }
            }
        }
        Ok(dx)
    }
}

/// Standardizes each feature (or channel, for `B×C×H×W` input) with
/// mini-batch statistics while training and with running averages at
/// inference.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    features: usize,
    epsilon: f64,
    momentum: f64,
    mode: NormMode,
    affine: Option<Affine>,
    running_mean: Tensor,
    running_var: Tensor,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BnStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(features: usize, affine: bool) -> Self {
        Self {
            features,
            epsilon: NORM_EPSILON,
            momentum: BATCHNORM_MOMENTUM,
            mode: NormMode::Train,
            affine: affine.then(|| Affine::new(features)),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::filled(&[features], 1.0),
            cache: None,
        }
    }

    pub(crate) fn with_running(mut self, mean: Tensor, var: Tensor) -> Result<Self> {
        if mean.shape() != [self.features] || var.shape() != [self.features] {
            return Err(Error::Shape {
                op: "batchnorm running stats",
                left: mean.shape().to_vec(),
                right: vec![self.features],
            });
        }
        self.running_mean = mean;
        self.running_var = var;
        Ok(self)
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: NormMode) {
        self.mode = mode;
    }

    pub fn is_affine(&self) -> bool {
        self.affine.is_some()
    }

    pub fn gamma(&self) -> Option<&Param> {
        self.affine.as_ref().map(|a| &a.gamma)
    }

    pub fn beta(&self) -> Option<&Param> {
        self.affine.as_ref().map(|a| &a.beta)
    }

    pub fn running_mean(&self) -> &Tensor {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Tensor {
        &self.running_var
    }

    pub fn params(&self) -> Vec<&Param> {
        self.affine.iter().flat_map(|a| [&a.gamma, &a.beta]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.affine.iter_mut().flat_map(|a| [&mut a.gamma, &mut a.beta]).collect()
    }

    /// Elements per feature per example (1 for dense input).
    fn spatial(&self, input: &Tensor) -> Result<usize> {
        let shape = input.shape();
        if shape.len() < 2 || shape[1] != self.features {
            return Err(Error::Shape {
                op: "batchnorm_forward",
                left: shape.to_vec(),
                right: vec![self.features],
            });
        }
        Ok(shape[2..].iter().product())
    }

    fn batch_stats(&self, input: &Tensor, spatial: usize) -> BnStats {
        let (b, f) = (input.rows(), self.features);
        let count = (b * spatial) as f64;
        let data = input.data();
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for c in 0..f {
            let mut s = 0.0;
            for e in 0..b {
                let base = (e * f + c) * spatial;
                s += data[base..base + spatial].iter().sum::<f64>();
            }
            let mu = s / count;
            let mut ss = 0.0;
            for e in 0..b {
                let base = (e * f + c) * spatial;
                ss += data[base..base + spatial].iter().map(|v| (v - mu).powi(2)).sum::<f64>();
            }
            mean[c] = mu;
            var[c] = ss / count;
        }
        BnStats { mean, var }
    }

    fn apply(&self, input: &Tensor, spatial: usize, mean: &[f64], var: &[f64]) -> (Tensor, BnCache) {
        let f = self.features;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let mut xhat = input.clone();
        for (i, chunk) in xhat.data_mut().chunks_mut(spatial).enumerate() {
            let c = i % f;
            chunk.iter_mut().for_each(|v| *v = (*v - mean[c]) * inv_std[c]);
        }
        let mut out = xhat.clone();
        if let Some(a) = &self.affine {
            let (g, bt) = (a.gamma.value.data(), a.beta.value.data());
            for (i, chunk) in out.data_mut().chunks_mut(spatial).enumerate() {
                let c = i % f;
                chunk.iter_mut().for_each(|v| *v = *v * g[c] + bt[c]);
            }
        }
        (out, BnCache { xhat, inv_std })
    }

    /// Inference-mode evaluation with the running statistics.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let spatial = self.spatial(input)?;
        Ok(self
            .apply(input, spatial, self.running_mean.data(), self.running_var.data())
            .0)
    }

    /// Evaluates in the layer's current mode. Train mode normalizes with the
    /// batch statistics and folds them into the running averages.
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let spatial = self.spatial(input)?;
        match self.mode {
            NormMode::Infer => {
                let (out, cache) = self.apply(input, spatial, self.running_mean.data(), self.running_var.data());
                self.cache = Some(cache);
                Ok(out)
            }
            NormMode::Train => {
                if input.rows() < 2 {
                    return Err(Error::BatchTooSmall(input.rows()));
                }
                let stats = self.batch_stats(input, spatial);
                let (out, cache) = self.apply(input, spatial, &stats.mean, &stats.var);
                let m = self.momentum;
                for (r, s) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
                    *r = m * *r + (1.0 - m) * s;
                }
                for (r, s) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
                    *r = m * *r + (1.0 - m) * s;
                }
                self.cache = Some(cache);
                Ok(out)
            }
        }
    }

    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let BnCache { xhat, inv_std } = self.cache.take().ok_or(Error::MissingCache("batchnorm_backward"))?;
        if upstream.shape() != xhat.shape() {
            return Err(Error::Shape {
                op: "batchnorm_backward",
                left: upstream.shape().to_vec(),
                right: xhat.shape().to_vec(),
            });
        }
        let f = self.features;
        let spatial = xhat.len() / (xhat.rows() * f);
        let count = (xhat.rows() * spatial) as f64;

        let mut sum_dy = vec![0.0; f];
        let mut sum_dy_xhat = vec![0.0; f];
        for (i, (dy, xh)) in upstream.data().chunks(spatial).zip(xhat.data().chunks(spatial)).enumerate() {
            let c = i % f;
            for (&g, &x) in dy.iter().zip(xh) {
                sum_dy[c] += g;
                sum_dy_xhat[c] += g * x;
            }
        }
        let gamma: Vec<f64> = match self.affine.as_mut() {
            Some(a) => {
                a.gamma.accumulate(&sum_dy_xhat);
                a.beta.accumulate(&sum_dy);
                a.gamma.value.data().to_vec()
            }
            None => vec![1.0; f],
        };

        let mut dx = upstream.clone();
        for (i, (chunk, xh)) in dx.data_mut().chunks_mut(spatial).zip(xhat.data().chunks(spatial)).enumerate() {
            let c = i % f;
            let k = gamma[c] * inv_std[c];
            match self.mode {
                NormMode::Train => {
                    let (mg, mgx) = (sum_dy[c] / count, sum_dy_xhat[c] / count);
                    for (v, &x) in chunk.iter_mut().zip(xh) {
                        *v = k * (*v - mg - x * mgx);
                    }
                }
                NormMode::Infer => chunk.iter_mut().for_each(|v| *v *= k),
            }
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layernorm_hand_example() {
        let mut ln = LayerNorm::new(3, false).unwrap();
        let out = ln.forward(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap()).unwrap();
        let r = (1.5f64).sqrt();
        for (a, b) in out.data().iter().zip([-r, 0.0, r]) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn layernorm_constant_row_maps_to_zero() {
        let ln = LayerNorm::new(4, true).unwrap();
        let out = ln.infer(&Tensor::filled(&[2, 4], 3.5)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layernorm_rejects_narrow_width() {
        assert!(matches!(LayerNorm::new(1, false), Err(Error::WidthTooSmall(1))));
    }

    #[test]
    fn batchnorm_on_standardized_batch_is_near_identity() {
        let x = Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let mut bn = BatchNorm::new(2, true);
        let out = bn.forward(&x).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_train_needs_two_examples() {
        let mut bn = BatchNorm::new(2, false);
        assert!(matches!(bn.forward(&Tensor::zeros(&[1, 2])), Err(Error::BatchTooSmall(1))));
        bn.set_mode(NormMode::Infer);
        assert!(bn.forward(&Tensor::zeros(&[1, 2])).is_ok());
    }

    #[test]
    fn batchnorm_running_stats_and_inference() {
        let x = Tensor::from_rows(&[vec![2.0], vec![4.0]]).unwrap();
        let mut bn = BatchNorm::new(1, false);
        bn.forward(&x).unwrap();
        assert!((bn.running_mean().data()[0] - 0.3).abs() < 1e-15);
        assert!((bn.running_var().data()[0] - (0.9 + 0.1)).abs() < 1e-15);
        bn.set_mode(NormMode::Infer);
        let a = bn.infer(&x).unwrap();
        let b = bn.infer(&x).unwrap();
        assert_eq!(a, b);
        let expect = (2.0 - 0.3) / (1.0f64 + 1e-5).sqrt();
        assert!((a.data()[0] - expect).abs() < 1e-15);
    }
}
