//! Layer sequences ending in a re-scaled softmax.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::init::{truncated_normal, INIT_STD};
use crate::kernels::{norm, SimilarityKind};
use crate::layers::{BatchNorm, ConvLayer, DenseLayer, LayerNorm, NormMode, Param, Relu, SoftmaxRescale};
use crate::rng;
use crate::tensor::{PatchGeometry, Tensor};
use crate::train::cross_entropy;

/// Optional normalization layer inserted after every weighted layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormKind {
    None,
    LayerNorm,
    BatchNorm,
}

impl NormKind {
    pub fn name(self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::LayerNorm => "layernorm",
            NormKind::BatchNorm => "batchnorm",
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormKind::None),
            "layernorm" => Ok(NormKind::LayerNorm),
            "batchnorm" => Ok(NormKind::BatchNorm),
            _ => Err(Error::Config(format!(
                "unknown norm layer `{s}` (expected none, layernorm or batchnorm)"
            ))),
        }
    }
}

/// One entry of an [`Architecture`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense { units: usize },
    Conv { filters: usize, field: (usize, usize), stride: usize },
    Relu,
    LayerNorm { affine: bool },
    BatchNorm { affine: bool },
}

/// Per-example input shape plus an ordered layer list. The last weighted
/// layer's width is the number of classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

fn push_norm(layers: &mut Vec<LayerSpec>, norm: NormKind) {
    // Hidden and output layers alike go without re-scale/re-shift; the
    // output head has its own scale.
    match norm {
        NormKind::None => {}
        NormKind::LayerNorm => layers.push(LayerSpec::LayerNorm { affine: false }),
        NormKind::BatchNorm => layers.push(LayerSpec::BatchNorm { affine: false }),
    }
}

impl Architecture {
    /// `input_dim → hidden… → classes`, each hidden layer followed by the
    /// optional norm layer and a ReLU.
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize, norm: NormKind) -> Self {
        let mut layers = Vec::new();
        for &units in hidden {
            layers.push(LayerSpec::Dense { units });
            push_norm(&mut layers, norm);
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense { units: classes });
        push_norm(&mut layers, norm);
        Self {
            input_shape: vec![input_dim],
            layers,
        }
    }

    /// Conv stack (each conv followed by norm and ReLU) and then an MLP head.
    pub fn convnet(
        input_shape: [usize; 3],
        convs: &[(usize, (usize, usize), usize)],
        hidden: &[usize],
        classes: usize,
        norm: NormKind,
    ) -> Self {
        let mut layers = Vec::new();
        for &(filters, field, stride) in convs {
            layers.push(LayerSpec::Conv { filters, field, stride });
            push_norm(&mut layers, norm);
            layers.push(LayerSpec::Relu);
        }
        let mut mlp = Self::mlp(1, hidden, classes, norm);
        layers.append(&mut mlp.layers);
        Self {
            input_shape: input_shape.to_vec(),
            layers,
        }
    }

    pub fn has_conv(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Conv { .. }))
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(DenseLayer),
    Conv(ConvLayer),
    Relu(Relu),
    LayerNorm(LayerNorm),
    BatchNorm(BatchNorm),
}

impl Layer {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.forward(x),
            Layer::Conv(l) => l.forward(x),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::LayerNorm(l) => l.forward(x),
            Layer::BatchNorm(l) => {
                l.set_mode(NormMode::Train);
                l.forward(x)
            }
        }
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.infer(x),
            Layer::Conv(l) => l.infer(x),
            Layer::Relu(l) => Ok(l.infer(x)),
            Layer::LayerNorm(l) => l.infer(x),
            Layer::BatchNorm(l) => l.infer(x),
        }
    }

    fn backward(&mut self, upstream: &Tensor, need_dx: bool) -> Result<Option<Tensor>> {
        match self {
            Layer::Dense(l) => l.backward_inner(upstream, need_dx),
            Layer::Conv(l) => l.backward_inner(upstream, need_dx),
            Layer::Relu(l) => l.backward(upstream).map(Some),
            Layer::LayerNorm(l) => l.backward(upstream).map(Some),
            Layer::BatchNorm(l) => l.backward(upstream).map(Some),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Dense(l) => l.params(),
            Layer::Conv(l) => l.params(),
            Layer::Relu(_) => Vec::new(),
            Layer::LayerNorm(l) => l.params(),
            Layer::BatchNorm(l) => l.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Dense(l) => l.params_mut(),
            Layer::Conv(l) => l.params_mut(),
            Layer::Relu(_) => Vec::new(),
            Layer::LayerNorm(l) => l.params_mut(),
            Layer::BatchNorm(l) => l.params_mut(),
        }
    }

    /// Per-example output shape for a per-example input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let numel: usize = input.iter().product();
        let mismatch = |op: &'static str, want: Vec<usize>| Error::Shape {
            op,
            left: input.to_vec(),
            right: want,
        };
        match self {
            Layer::Dense(l) if l.in_dim() == numel => Ok(vec![l.out_dim()]),
            Layer::Dense(l) => Err(mismatch("dense", vec![l.in_dim()])),
            Layer::Conv(l) => {
                let g = l.geometry();
                if input == [g.channels, g.height, g.width] {
                    Ok(l.output_shape().to_vec())
                } else {
                    Err(mismatch("conv", vec![g.channels, g.height, g.width]))
                }
            }
            Layer::Relu(_) => Ok(input.to_vec()),
            Layer::LayerNorm(l) if l.width() == numel => Ok(input.to_vec()),
            Layer::LayerNorm(l) => Err(mismatch("layernorm", vec![l.width()])),
            Layer::BatchNorm(l) if input.first() == Some(&l.features()) => Ok(input.to_vec()),
            Layer::BatchNorm(l) => Err(mismatch("batchnorm", vec![l.features()])),
        }
    }
}

/// A classifier: weighted/normalization/activation layers followed by a
/// [`SoftmaxRescale`] head.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    classes: usize,
    layers: Vec<Layer>,
    head: SoftmaxRescale,
    probs: Option<Tensor>,
}

/// Stream of the seeded generator used for weight initialization.
const INIT_STREAM: u64 = 0;

impl Network {
    /// Instantiates `arch` with every dense/conv layer using `kind`, weights
    /// drawn from a truncated normal keyed by `seed`.
    pub fn build(arch: &Architecture, kind: SimilarityKind, seed: u64) -> Result<Self> {
        Self::build_with_std(arch, kind, seed, INIT_STD)
    }

    /// [`build`](Self::build) with a custom initial weight standard deviation.
    pub fn build_with_std(arch: &Architecture, kind: SimilarityKind, seed: u64, init_std: f64) -> Result<Self> {
        let mut rng = rng::stream(seed, INIT_STREAM);
        let mut shape = arch.input_shape.clone();
        let mut layers = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            let numel: usize = shape.iter().product();
            let layer = match *spec {
                LayerSpec::Dense { units } => {
                    let w = truncated_normal(&[units, numel], init_std, &mut rng);
                    Layer::Dense(DenseLayer::new(kind, &w)?)
                }
                LayerSpec::Conv { filters, field, stride } => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(Error::Shape {
                            op: "conv",
                            left: shape,
                            right: vec![],
                        });
                    };
                    let geo = PatchGeometry::new(c, h, w, field, stride)?;
                    let f = truncated_normal(&[filters, geo.patch_len()], init_std, &mut rng);
                    Layer::Conv(ConvLayer::new(kind, geo, &f)?)
                }
                LayerSpec::Relu => Layer::Relu(Relu::new()),
                LayerSpec::LayerNorm { affine } => Layer::LayerNorm(LayerNorm::new(numel, affine)?),
                LayerSpec::BatchNorm { affine } => Layer::BatchNorm(BatchNorm::new(shape[0], affine)),
            };
            shape = layer.output_shape(&shape)?;
            layers.push(layer);
        }
        Self::from_layers(arch.input_shape.clone(), layers, SoftmaxRescale::default())
    }

    /// Assembles a network, checking that each layer accepts its
    /// predecessor's output and that the result is a class-score vector.
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer>, head: SoftmaxRescale) -> Result<Self> {
        let mut shape = input_shape.clone();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
        }
        let classes = match shape.as_slice() {
            &[k] if k >= 2 && layers.iter().any(|l| matches!(l, Layer::Dense(_) | Layer::Conv(_))) => k,
            _ => {
                return Err(Error::Config(format!(
                    "network must end in a class-score vector with at least 2 classes, got shape {shape:?}"
                )))
            }
        };
        Ok(Self {
            input_shape,
            classes,
            layers,
            head,
            probs: None,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn head(&self) -> &SoftmaxRescale {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut SoftmaxRescale {
        &mut self.head
    }

    /// Every learnable parameter, layers first and the output scale last.
    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.layers.iter().flat_map(Layer::params).collect();
        out.push(self.head.param());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.layers.iter_mut().flat_map(Layer::params_mut).collect();
        out.push(self.head.param_mut());
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Removes the bias path from every weighted layer (zero bias weights and
    /// zero constant input coordinate).
    pub fn zero_bias(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(l) => l.zero_bias(),
                Layer::Conv(l) => l.zero_bias(),
                _ => {}
            }
        }
    }

    /// Verifies that every weight row of a normalizing kernel still has a
    /// positive norm and that all parameters are finite.
    pub fn check_weights(&self) -> Result<()> {
        if self.params().iter().any(|p| !p.value.all_finite()) {
            return Err(Error::NonFinite("network parameter".into()));
        }
        for layer in &self.layers {
            let (kind, w) = match layer {
                Layer::Dense(l) => (l.kind(), &l.weights().value),
                Layer::Conv(l) => (l.kind(), &l.weights().value),
                _ => continue,
            };
            if kind != SimilarityKind::Dot {
                for r in 0..w.rows() {
                    let row = w.row(r);
                    let n = if kind == SimilarityKind::Pcc {
                        let mu = row.iter().sum::<f64>() / row.len() as f64;
                        row.iter().map(|v| (v - mu).powi(2)).sum::<f64>().sqrt()
                    } else {
                        norm(row)
                    };
                    if n <= 0.0 {
                        return Err(Error::DegenerateVector("weight row after update"));
                    }
                }
            }
        }
        Ok(())
    }

    fn shape_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let mut shape = vec![batch.rows()];
        shape.extend_from_slice(&self.input_shape);
        if batch.shape() == shape.as_slice() {
            return Ok(batch.clone());
        }
        batch.reshape(&shape).map_err(|_| Error::Shape {
            op: "network_forward",
            left: batch.shape().to_vec(),
            right: shape,
        })
    }

    /// Training-mode forward pass; caches everything backward needs and
    /// returns class probabilities.
    pub fn forward(&mut self, batch: &Tensor) -> Result<Tensor> {
        let mut x = self.shape_batch(batch)?;
        for layer in &mut self.layers {
            x = layer.forward(&x)?;
        }
        let probs = self.head.forward(&x);
        self.probs = Some(probs.clone());
        Ok(probs)
    }

    /// Pre-head scores (`B × classes`) without caching; batch norm uses its
    /// running statistics.
    pub fn scores(&self, batch: &Tensor) -> Result<Tensor> {
        let mut x = self.shape_batch(batch)?;
        for layer in &self.layers {
            x = layer.infer(&x)?;
        }
        Ok(x)
    }

    /// Inference-mode probabilities.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.head.infer(&self.scores(batch)?))
    }

    /// Zeroes all gradient buffers, then backpropagates the mean
    /// cross-entropy of the last forward pass. Returns the loss.
    pub fn backward(&mut self, labels: &[usize]) -> Result<f64> {
        let probs = self.probs.take().ok_or(Error::MissingCache("network_backward"))?;
        let (loss, d_scaled) = cross_entropy(&probs, labels)?;
        self.zero_grad();
        let mut g = self.head.backward(&d_scaled)?;
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            match layer.backward(&g, i > 0)? {
                Some(next) => g = next,
                None => break,
            }
        }
        Ok(loss)
    }

    /// Forward pass followed by the mean cross-entropy, without backward.
    pub fn loss(&mut self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        let probs = self.forward(batch)?;
        self.probs = None;
        Ok(cross_entropy(&probs, labels)?.0)
    }

    /// Smallest `|input|` any ReLU saw during the last forward pass.
    pub(crate) fn min_relu_input(&self) -> f64 {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Relu(r) => r.min_abs_input(),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }
}
