use super::similarity::{self, SimCache};
use super::Param;
use crate::error::{Error, Result};
use crate::init::BIAS_INIT;
use crate::kernels::SimilarityKind;
use crate::tensor::Tensor;

/// Fully connected layer whose pre-activation is a similarity kernel.
///
/// Weights are `out_dim × (in_dim + 1)`; column 0 pairs with a constant input
/// coordinate `x₀` (normally 1.0) so neither vector can be all zeros.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    kind: SimilarityKind,
    bias_input: f64,
    weights: Param,
    /// Per-unit gain, present only for weight normalization.
    gain: Option<Param>,
    cache: Option<(SimCache, Vec<usize>)>,
}

impl DenseLayer {
    /// Builds a layer from an `out_dim × in_dim` weight matrix; the bias
    /// column is prepended with value [`BIAS_INIT`].
    pub fn new(kind: SimilarityKind, weights: &Tensor) -> Result<Self> {
        let (out_dim, in_dim) = weights.dims2("dense")?;
        let mut w = Vec::with_capacity(out_dim * (in_dim + 1));
        for r in 0..out_dim {
            w.push(BIAS_INIT);
            w.extend_from_slice(weights.row(r));
        }
        Self::from_augmented(kind, Tensor::new(vec![out_dim, in_dim + 1], w)?, None, 1.0)
    }

    /// Builds a layer from an already augmented weight matrix.
    pub fn from_augmented(
        kind: SimilarityKind,
        weights: Tensor,
        gain: Option<Tensor>,
        bias_input: f64,
    ) -> Result<Self> {
        let (out_dim, aug) = weights.dims2("dense")?;
        if aug < 2 {
            return Err(Error::Config("dense layer needs at least one input".into()));
        }
        let gain = match (kind, gain) {
            (SimilarityKind::WeightNorm, Some(g)) if g.shape() == [out_dim] => Some(Param::new(g)),
            (SimilarityKind::WeightNorm, None) => Some(Param::new(Tensor::filled(&[out_dim], 1.0))),
            (SimilarityKind::WeightNorm, Some(g)) => {
                return Err(Error::Shape {
                    op: "dense gain",
                    left: g.shape().to_vec(),
                    right: vec![out_dim],
                })
            }
            (_, _) => None,
        };
        Ok(Self {
            in_dim: aug - 1,
            out_dim,
            kind,
            bias_input,
            weights: Param::new(weights),
            gain,
            cache: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn kind(&self) -> SimilarityKind {
        self.kind
    }

    pub fn bias_input(&self) -> f64 {
        self.bias_input
    }

    /// Augmented weights; column 0 is the bias weight.
    pub fn weights(&self) -> &Param {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Param {
        &mut self.weights
    }

    pub fn gain(&self) -> Option<&Param> {
        self.gain.as_ref()
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weights).chain(self.gain.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weights).chain(self.gain.as_mut()).collect()
    }

    /// Zeroes the bias weights and the constant input coordinate, removing the
    /// bias path entirely.
    pub fn zero_bias(&mut self) {
        self.bias_input = 0.0;
        let w = self.in_dim + 1;
        for row in self.weights.value.data_mut().chunks_mut(w) {
            row[0] = 0.0;
        }
    }

    fn augment(&self, input: &Tensor) -> Result<Vec<f64>> {
        if input.row_len() != self.in_dim {
            return Err(Error::Shape {
                op: "dense_forward",
                left: input.shape().to_vec(),
                right: vec![self.out_dim, self.in_dim],
            });
        }
        let mut x = Vec::with_capacity(input.rows() * (self.in_dim + 1));
        for r in 0..input.rows() {
            x.push(self.bias_input);
            x.extend_from_slice(input.row(r));
        }
        Ok(x)
    }

    fn evaluate(&self, input: &Tensor) -> Result<SimCache> {
        let x = self.augment(input)?;
        Ok(similarity::forward(
            self.kind,
            self.weights.value.data(),
            self.gain.as_ref().map(|g| g.value.data()),
            self.out_dim,
            self.in_dim + 1,
            x,
        ))
    }

    /// `B × in_dim` (or any tensor whose trailing axes flatten to `in_dim`) to
    /// `B × out_dim`.
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let cache = self.evaluate(input)?;
        let out = Tensor::new(vec![input.rows(), self.out_dim], cache.output().to_vec())?;
        self.cache = Some((cache, input.shape().to_vec()));
        Ok(out)
    }

    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let cache = self.evaluate(input)?;
        Tensor::new(vec![input.rows(), self.out_dim], cache.into_output())
    }

    /// Adds this batch's weight gradients (summed over examples) into the
    /// gradient buffers and returns the input gradient with the bias
    /// coordinate stripped.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        self.backward_inner(upstream, true)
            .map(|g| g.expect("input gradient requested"))
    }

    pub(crate) fn backward_inner(&mut self, upstream: &Tensor, need_dx: bool) -> Result<Option<Tensor>> {
        let (cache, in_shape) = self.cache.take().ok_or(Error::MissingCache("dense_backward"))?;
        if upstream.shape() != [cache.rows(), self.out_dim] {
            return Err(Error::Shape {
                op: "dense_backward",
                left: upstream.shape().to_vec(),
                right: vec![cache.rows(), self.out_dim],
            });
        }
        let grads = similarity::backward(
            &cache,
            upstream.data(),
            self.gain.as_ref().map(|g| g.value.data()),
            need_dx,
        );
        self.weights.accumulate(&grads.d_w);
        if let Some(g) = self.gain.as_mut() {
            g.accumulate(&grads.d_gain);
        }
        grads
            .d_x
            .map(|dx| {
                let w = self.in_dim + 1;
                let stripped: Vec<f64> = dx.chunks(w).flat_map(|r| r[1..].iter().copied()).collect();
                Tensor::new(in_shape, stripped)
            })
            .transpose()
    }
}
