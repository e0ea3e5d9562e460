//! Finite-difference verification of every hand-written backward pass.
//!
//! Each target draws random inputs per trial, reduces the component's output
//! to a scalar with a random projection `L = Σ r ⊙ out` and compares the
//! analytic gradient against central differences.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::SimilarityKind;
use crate::layers::{softmax, BatchNorm, ConvLayer, DenseLayer, LayerNorm, Param, Relu, SoftmaxRescale};
use crate::network::{Architecture, Network, NormKind};
use crate::rng::{self, SeededRng};
use crate::tensor::{PatchGeometry, Tensor};
use crate::train::cross_entropy;

pub const FD_STEP: f64 = 1e-5;
pub const COMPONENT_TOLERANCE: f64 = 1e-6;
pub const NETWORK_TOLERANCE: f64 = 1e-5;
/// ReLU inputs closer than this to the kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    debug_assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Kernel(SimilarityKind),
    Dense(SimilarityKind),
    Conv(SimilarityKind),
    Relu,
    LayerNorm,
    BatchNorm,
    SoftmaxCrossEntropy,
    Network(SimilarityKind, NormKind),
    /// Cosine kernel with a deliberately perturbed analytic gradient; must fail.
    NegativeControl,
}

impl Target {
    /// Every real target, in a stable order.
    pub fn all() -> Vec<Target> {
        let mut v: Vec<Target> = SimilarityKind::ALL.iter().map(|&k| Target::Kernel(k)).collect();
        v.extend(SimilarityKind::ALL.iter().map(|&k| Target::Dense(k)));
        v.extend(SimilarityKind::ALL.iter().map(|&k| Target::Conv(k)));
        v.extend([Target::Relu, Target::LayerNorm, Target::BatchNorm, Target::SoftmaxCrossEntropy]);
        v.extend(SimilarityKind::ALL.iter().map(|&k| Target::Network(k, NormKind::None)));
        v.push(Target::Network(SimilarityKind::Dot, NormKind::LayerNorm));
        v.push(Target::Network(SimilarityKind::Dot, NormKind::BatchNorm));
        v
    }

    pub fn name(&self) -> String {
        match self {
            Target::Kernel(k) => k.name().to_string(),
            Target::Dense(k) => format!("dense-{k}"),
            Target::Conv(k) => format!("conv-{k}"),
            Target::Relu => "relu".into(),
            Target::LayerNorm => "layernorm".into(),
            Target::BatchNorm => "batchnorm".into(),
            Target::SoftmaxCrossEntropy => "softmax-ce".into(),
            Target::Network(k, NormKind::None) => format!("network-{k}"),
            Target::Network(_, n) => format!("network-{n}"),
            Target::NegativeControl => "negative-control".into(),
        }
    }

    pub fn tolerance(&self) -> f64 {
        match self {
            Target::Network(..) => NETWORK_TOLERANCE,
            _ => COMPONENT_TOLERANCE,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "negative-control" {
            return Ok(Target::NegativeControl);
        }
        Target::all()
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck target `{s}`")))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    /// Inclusive range of vector widths drawn per trial.
    pub dims: (usize, usize),
    pub trials: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            dims: (2, 64),
            trials: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub target: Target,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<20} trials={:<4} max_rel_err={:.3e} tol={:.0e} {}",
            self.target.name(),
            self.trials,
            self.max_rel_err,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub fn run(target: Target, config: &GradcheckConfig) -> Result<Report> {
    let (lo, hi) = config.dims;
    if config.trials == 0 {
        return Err(Error::Config("gradcheck needs at least one trial".into()));
    }
    if lo < 2 || hi < lo {
        return Err(Error::Config(format!("invalid dims range {lo},{hi} (need 2 ≤ a ≤ b)")));
    }
    let mut worst = 0.0f64;
    for trial in 0..config.trials {
        let mut rng = rng::stream(config.seed, trial as u64 + 1);
        let d = rng.random_range(lo..=hi);
        let err = match target {
            Target::Kernel(k) => kernel_trial(k, d, &mut rng, 1.0)?,
            Target::NegativeControl => kernel_trial(SimilarityKind::Cosine, d, &mut rng, 1.01)?,
            Target::Dense(k) => dense_trial(k, d, &mut rng)?,
            Target::Conv(k) => conv_trial(k, &mut rng)?,
            Target::Relu => relu_trial(d, &mut rng)?,
            Target::LayerNorm => layernorm_trial(d, &mut rng)?,
            Target::BatchNorm => batchnorm_trial(d, trial % 2 == 1, &mut rng)?,
            Target::SoftmaxCrossEntropy => softmax_trial(d.min(16), &mut rng)?,
            Target::Network(k, n) => network_trial(k, n, &mut rng)?,
        };
        worst = worst.max(err);
    }
    Ok(Report {
        target,
        trials: config.trials,
        max_rel_err: worst,
        tolerance: target.tolerance(),
    })
}

fn normal_vec(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn normal_tensor(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(n, rng)).expect("shape product matches")
}

fn project(out: &Tensor, r: &[f64]) -> f64 {
    out.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// `corrupt` scales the analytic weight gradient; 1.0 leaves it untouched.
fn kernel_trial(kind: SimilarityKind, d: usize, rng: &mut SeededRng, corrupt: f64) -> Result<f64> {
    let w = normal_vec(d, rng);
    let x = normal_vec(d, rng);
    let g = rng.random_range(0.5..2.0);
    let (grads, d_g) = kind.backward(&w, &x, g)?;
    let d_w: Vec<f64> = grads.d_w.iter().map(|v| v * corrupt).collect();
    let num_w = central_difference(&w, FD_STEP, |p| kind.forward(p, &x, g))?;
    let num_x = central_difference(&x, FD_STEP, |p| kind.forward(&w, p, g))?;
    let mut err = max_relative_error(&d_w, &num_w).max(max_relative_error(&grads.d_x, &num_x));
    if kind == SimilarityKind::WeightNorm {
        let num_g = central_difference(&[g], FD_STEP, |p| kind.forward(&w, &x, p[0]))?;
        err = err.max(relative_error(d_g, num_g[0]));
    }
    Ok(err)
}

/// Checks every parameter of a layer-like component plus its input.
fn component_errors(
    params: Vec<Param>,
    input: &Tensor,
    analytic_dx: &Tensor,
    mut eval: impl FnMut(&[Tensor], &Tensor) -> Result<f64>,
) -> Result<f64> {
    let values: Vec<Tensor> = params.iter().map(|p| p.value.clone()).collect();
    let mut err = 0.0f64;
    for (i, p) in params.iter().enumerate() {
        let mut probe = values.clone();
        let num = central_difference(p.value.data(), FD_STEP, |v| {
            probe[i].data_mut().copy_from_slice(v);
            eval(&probe, input)
        })?;
        err = err.max(max_relative_error(p.grad.data(), &num));
    }
    let mut probe = input.clone();
    let num = central_difference(input.data(), FD_STEP, |v| {
        probe.data_mut().copy_from_slice(v);
        eval(&values, &probe)
    })?;
    Ok(err.max(max_relative_error(analytic_dx.data(), &num)))
}

fn random_gain(params: &mut [&mut Param], rng: &mut SeededRng) {
    if let Some(g) = params.get_mut(1) {
        for v in g.value.data_mut() {
            *v = rng.random_range(0.5..2.0);
        }
    }
}

fn dense_trial(kind: SimilarityKind, d: usize, rng: &mut SeededRng) -> Result<f64> {
    let units = rng.random_range(2..=5);
    let batch = 3;
    let mut layer = DenseLayer::new(kind, &normal_tensor(&[units, d], rng))?;
    random_gain(&mut layer.params_mut(), rng);
    let input = normal_tensor(&[batch, d], rng);
    let r = normal_vec(batch * units, rng);
    layer.forward(&input)?;
    let dx = layer.backward(&Tensor::new(vec![batch, units], r.clone())?)?;
    let params: Vec<Param> = layer.params().into_iter().cloned().collect();
    let mut probe = layer.clone();
    component_errors(params, &input, &dx, |values, x| {
        for (p, v) in probe.params_mut().into_iter().zip(values) {
            p.value = v.clone();
        }
        Ok(project(&probe.infer(x)?, &r))
    })
}

fn conv_trial(kind: SimilarityKind, rng: &mut SeededRng) -> Result<f64> {
    let channels = rng.random_range(1..=2);
    let (h, w) = (rng.random_range(4..=6), rng.random_range(4..=6));
    let field = (rng.random_range(1..=3), rng.random_range(2..=3));
    let stride = rng.random_range(1..=2);
    let filters = 2;
    let batch = 2;
    let geo = PatchGeometry::new(channels, h, w, field, stride)?;
    let mut layer = ConvLayer::new(kind, geo, &normal_tensor(&[filters, geo.patch_len()], rng))?;
    random_gain(&mut layer.params_mut(), rng);
    let input = normal_tensor(&[batch, channels, h, w], rng);
    let out_shape = layer.output_shape();
    let n_out = batch * out_shape.iter().product::<usize>();
    let r = normal_vec(n_out, rng);
    layer.forward(&input)?;
    let up = Tensor::new(vec![batch, out_shape[0], out_shape[1], out_shape[2]], r.clone())?;
    let dx = layer.backward(&up)?;
    let params: Vec<Param> = layer.params().into_iter().cloned().collect();
    let mut probe = layer.clone();
    component_errors(params, &input, &dx, |values, x| {
        for (p, v) in probe.params_mut().into_iter().zip(values) {
            p.value = v.clone();
        }
        Ok(project(&probe.infer(x)?, &r))
    })
}

fn relu_trial(d: usize, rng: &mut SeededRng) -> Result<f64> {
    let batch = 3;
    let data = (0..batch * d)
        .map(|_| loop {
            let v: f64 = rng.sample(StandardNormal);
            if v.abs() >= KINK_MARGIN {
                break v;
            }
        })
        .collect();
    let input = Tensor::new(vec![batch, d], data)?;
    let r = normal_vec(batch * d, rng);
    let mut relu = Relu::new();
    relu.forward(&input);
    let dx = relu.backward(&Tensor::new(vec![batch, d], r.clone())?)?;
    component_errors(Vec::new(), &input, &dx, |_, x| Ok(project(&relu.infer(x), &r)))
}

fn layernorm_trial(d: usize, rng: &mut SeededRng) -> Result<f64> {
    let batch = 4;
    let mut ln = LayerNorm::new(d, true)?;
    let input = normal_tensor(&[batch, d], rng);
    let r = normal_vec(batch * d, rng);
    ln.forward(&input)?;
    let dx = ln.backward(&Tensor::new(vec![batch, d], r.clone())?)?;
    let params: Vec<Param> = ln.params().into_iter().cloned().collect();
    let mut probe = ln.clone();
    component_errors(params, &input, &dx, |values, x| {
        for (p, v) in probe.params_mut().into_iter().zip(values) {
            p.value = v.clone();
        }
        Ok(project(&probe.infer(x)?, &r))
    })
}

/// `spatial` switches to a `B × C × 2 × 2` input normalized per channel.
fn batchnorm_trial(d: usize, spatial: bool, rng: &mut SeededRng) -> Result<f64> {
    let shape: Vec<usize> = if spatial { vec![3, d.min(8), 2, 2] } else { vec![4, d] };
    let mut bn = BatchNorm::new(shape[1], true);
    let input = normal_tensor(&shape, rng);
    let r = normal_vec(input.len(), rng);
    bn.forward(&input)?;
    let dx = bn.backward(&Tensor::new(shape.clone(), r.clone())?)?;
    let params: Vec<Param> = bn.params().into_iter().cloned().collect();
    let mut probe = bn.clone();
    component_errors(params, &input, &dx, |values, x| {
        for (p, v) in probe.params_mut().into_iter().zip(values) {
            p.value = v.clone();
        }
        Ok(project(&probe.forward(x)?, &r))
    })
}

fn softmax_trial(classes: usize, rng: &mut SeededRng) -> Result<f64> {
    let batch = 4;
    let logits = normal_tensor(&[batch, classes], rng);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let mut head = SoftmaxRescale::new(rng.random_range(0.5..10.0));
    let probs = head.forward(&logits);
    let (_, d_scaled) = cross_entropy(&probs, &labels)?;
    let dz = head.backward(&d_scaled)?;
    let params = vec![head.param().clone()];
    component_errors(params, &logits, &dz, |values, z| {
        let gamma = values[0].data()[0];
        cross_entropy(&softmax(&z.map(|v| v * gamma)), &labels).map(|(l, _)| l)
    })
}

/// End-to-end check on a `6 → 5 → 4 → 3` classifier with ReLU between layers.
fn network_trial(kind: SimilarityKind, norm: NormKind, rng: &mut SeededRng) -> Result<f64> {
    let arch = Architecture::mlp(6, &[5, 4], 3, norm);
    let batch = 4;
    let seed = rng.random();
    let mut net = Network::build_with_std(&arch, kind, seed, 0.5)?;
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..3)).collect();
    let input = loop {
        let candidate = normal_tensor(&[batch, 6], rng);
        net.forward(&candidate)?;
        if net.min_relu_input() >= KINK_MARGIN {
            break candidate;
        }
    };
    net.forward(&input)?;
    net.backward(&labels)?;
    let grads: Vec<Tensor> = net.params().iter().map(|p| p.grad.clone()).collect();
    let values: Vec<Tensor> = net.params().iter().map(|p| p.value.clone()).collect();
    let mut err = 0.0f64;
    for (i, v) in values.iter().enumerate() {
        let num = central_difference(v.data(), FD_STEP, |probe| {
            net.params_mut()[i].value.data_mut().copy_from_slice(probe);
            let loss = net.loss(&input, &labels);
            net.params_mut()[i].value = values[i].clone();
            loss
        })?;
        err = err.max(max_relative_error(grads[i].data(), &num));
    }
    Ok(err)
}
