use super::similarity::{self, SimCache};
use super::Param;
use crate::error::{Error, Result};
use crate::init::BIAS_INIT;
use crate::kernels::SimilarityKind;
use crate::tensor::{PatchGeometry, Tensor};

/// Valid-padding convolution whose per-position response is a similarity
/// kernel between a filter and one receptive field.
///
/// Each flattened receptive field gets a constant coordinate appended, and
/// every filter row carries the matching bias weight as its last entry.
/// Norms and means are taken per receptive field, so neighbouring positions
/// are normalized independently.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    geometry: PatchGeometry,
    filters: usize,
    kind: SimilarityKind,
    bias_input: f64,
    weights: Param,
    gain: Option<Param>,
    cache: Option<(SimCache, usize)>,
}

impl ConvLayer {
    /// `filters` is `F × (C·kh·kw)`; the bias column is appended with value
    /// [`BIAS_INIT`].
    pub fn new(kind: SimilarityKind, geometry: PatchGeometry, filters: &Tensor) -> Result<Self> {
        let (f, len) = filters.dims2("conv")?;
        if len != geometry.patch_len() {
            return Err(Error::Shape {
                op: "conv",
                left: filters.shape().to_vec(),
                right: vec![f, geometry.patch_len()],
            });
        }
        let mut w = Vec::with_capacity(f * (len + 1));
        for r in 0..f {
            w.extend_from_slice(filters.row(r));
            w.push(BIAS_INIT);
        }
        Self::from_augmented(kind, geometry, Tensor::new(vec![f, len + 1], w)?, None, 1.0)
    }

    pub fn from_augmented(
        kind: SimilarityKind,
        geometry: PatchGeometry,
        weights: Tensor,
        gain: Option<Tensor>,
        bias_input: f64,
    ) -> Result<Self> {
        let (f, aug) = weights.dims2("conv")?;
        if aug != geometry.patch_len() + 1 {
            return Err(Error::Shape {
                op: "conv",
                left: weights.shape().to_vec(),
                right: vec![f, geometry.patch_len() + 1],
            });
        }
        let gain = match (kind, gain) {
            (SimilarityKind::WeightNorm, Some(g)) if g.shape() == [f] => Some(Param::new(g)),
            (SimilarityKind::WeightNorm, None) => Some(Param::new(Tensor::filled(&[f], 1.0))),
            (SimilarityKind::WeightNorm, Some(g)) => {
                return Err(Error::Shape {
                    op: "conv gain",
                    left: g.shape().to_vec(),
                    right: vec![f],
                })
            }
            _ => None,
        };
        Ok(Self {
            geometry,
            filters: f,
            kind,
            bias_input,
            weights: Param::new(weights),
            gain,
            cache: None,
        })
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.geometry
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn kind(&self) -> SimilarityKind {
        self.kind
    }

    pub fn bias_input(&self) -> f64 {
        self.bias_input
    }

    /// Per-example output shape `[F, H', W']`.
    pub fn output_shape(&self) -> [usize; 3] {
        [self.filters, self.geometry.out_height(), self.geometry.out_width()]
    }

    /// Augmented filters; the last column is the bias weight.
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

    pub fn zero_bias(&mut self) {
        self.bias_input = 0.0;
        let w = self.geometry.patch_len() + 1;
        for row in self.weights.value.data_mut().chunks_mut(w) {
            row[w - 1] = 0.0;
        }
    }

    fn evaluate(&self, input: &Tensor) -> Result<SimCache> {
        let geo = &self.geometry;
        if input.row_len() != geo.input_len() {
            return Err(Error::Shape {
                op: "conv_forward",
                left: input.shape().to_vec(),
                right: vec![input.rows(), geo.channels, geo.height, geo.width],
            });
        }
        let (p, d) = (geo.positions(), geo.patch_len() + 1);
        let mut x = vec![0.0; input.rows() * p * d];
        for b in 0..input.rows() {
            let block = &mut x[b * p * d..(b + 1) * p * d];
            geo.gather(input.row(b), block, d, 0);
            for row in block.chunks_mut(d) {
                row[d - 1] = self.bias_input;
            }
        }
        Ok(similarity::forward(
            self.kind,
            self.weights.value.data(),
            self.gain.as_ref().map(|g| g.value.data()),
            self.filters,
            d,
            x,
        ))
    }

    /// Rearranges `(B·P) × F` kernel values into `B × F × H' × W'`.
    fn to_output(&self, values: &[f64], batch: usize) -> Result<Tensor> {
        let (p, f) = (self.geometry.positions(), self.filters);
        let mut out = vec![0.0; batch * f * p];
        for b in 0..batch {
            for pos in 0..p {
                for j in 0..f {
                    out[(b * f + j) * p + pos] = values[(b * p + pos) * f + j];
                }
            }
        }
        let [_, oh, ow] = self.output_shape();
        Tensor::new(vec![batch, f, oh, ow], out)
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let cache = self.evaluate(input)?;
        let out = self.to_output(cache.output(), input.rows())?;
        self.cache = Some((cache, input.rows()));
        Ok(out)
    }

    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let cache = self.evaluate(input)?;
        self.to_output(cache.output(), input.rows())
    }

    /// Filter gradients are summed over every position and example; input
    /// gradients of overlapping fields are added together.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        self.backward_inner(upstream, true)
            .map(|g| g.expect("input gradient requested"))
    }

    pub(crate) fn backward_inner(&mut self, upstream: &Tensor, need_dx: bool) -> Result<Option<Tensor>> {
        let (cache, batch) = self.cache.take().ok_or(Error::MissingCache("conv_backward"))?;
        let geo = self.geometry;
        let (p, f, d) = (geo.positions(), self.filters, geo.patch_len() + 1);
        let [_, oh, ow] = self.output_shape();
        if upstream.shape() != [batch, f, oh, ow] {
            return Err(Error::Shape {
                op: "conv_backward",
                left: upstream.shape().to_vec(),
                right: vec![batch, f, oh, ow],
            });
        }
        let up = upstream.data();
        let mut g = vec![0.0; batch * p * f];
        for b in 0..batch {
            for pos in 0..p {
                for j in 0..f {
                    g[(b * p + pos) * f + j] = up[(b * f + j) * p + pos];
                }
            }
        }
        let grads = similarity::backward(&cache, &g, self.gain.as_ref().map(|g| g.value.data()), need_dx);
        self.weights.accumulate(&grads.d_w);
        if let Some(gp) = self.gain.as_mut() {
            gp.accumulate(&grads.d_gain);
        }
        grads
            .d_x
            .map(|dx| {
                let mut d_in = vec![0.0; batch * geo.input_len()];
                for b in 0..batch {
                    geo.scatter_add(
                        &dx[b * p * d..(b + 1) * p * d],
                        d,
                        0,
                        &mut d_in[b * geo.input_len()..(b + 1) * geo.input_len()],
                    );
                }
                Tensor::new(vec![batch, geo.channels, geo.height, geo.width], d_in)
            })
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::init_weights;

    #[test]
    fn one_by_one_dot_field_is_pointwise_dense() {
        let geo = PatchGeometry::new(3, 2, 2, (1, 1), 1).unwrap();
        let filters = init_weights(&[2, 3], 4);
        let mut conv = ConvLayer::new(SimilarityKind::Dot, geo, &filters).unwrap();
        let input = init_weights(&[1, 3, 2, 2], 5).into_shape(&[1, 3, 2, 2]).unwrap();
        let out = conv.forward(&input).unwrap();
        for pix in 0..4 {
            for f in 0..2 {
                let mut expect = 0.0;
                for c in 0..3 {
                    expect += filters.row(f)[c] * input.data()[c * 4 + pix];
                }
                expect += BIAS_INIT;
                assert!((out.data()[f * 4 + pix] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cosine_outputs_are_bounded() {
        let geo = PatchGeometry::new(1, 4, 4, (2, 2), 1).unwrap();
        let mut conv = ConvLayer::new(SimilarityKind::Cosine, geo, &init_weights(&[3, 4], 1)).unwrap();
        let input = init_weights(&[2, 16], 2).into_shape(&[2, 1, 4, 4]).unwrap();
        let out = conv.forward(&input).unwrap();
        assert_eq!(out.shape(), &[2, 3, 3, 3]);
        assert!(out.data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let geo = PatchGeometry::new(1, 4, 4, (2, 2), 2).unwrap();
        let mut conv = ConvLayer::new(SimilarityKind::Pcc, geo, &init_weights(&[2, 4], 1)).unwrap();
        let input = init_weights(&[1, 16], 2).into_shape(&[1, 1, 4, 4]).unwrap();
        conv.forward(&input).unwrap();
        let d = conv.backward(&Tensor::zeros(&[1, 2, 2, 2])).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
        assert!(conv.weights().grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_cache() {
        let geo = PatchGeometry::new(1, 2, 2, (2, 2), 1).unwrap();
        let mut conv = ConvLayer::new(SimilarityKind::Dot, geo, &Tensor::zeros(&[1, 4])).unwrap();
        assert!(matches!(
            conv.backward(&Tensor::zeros(&[1, 1, 1, 1])),
            Err(Error::MissingCache(_))
        ));
    }
}
