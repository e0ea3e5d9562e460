//! Pre-activation kernels evaluated on a single (weight, input) pair.
//!
//! A neuron's pre-activation is normally the dot product `w·x`. The kernels
//! here swap that for a bounded similarity:
//!
//! | kernel       | value                                   |
//! |--------------|-----------------------------------------|
//! | `Dot`        | `w·x`                                   |
//! | `Cosine`     | `w·x / (|w| |x|)`                       |
//! | `Pcc`        | cosine of the mean-centered vectors     |
//! | `WeightNorm` | `g · w·x / |w|`                         |
//!
//! Every backward pass is written out by hand. Cosine and PCC require both
//! vectors to have non-zero (centered) norm and report
//! [`Error::DegenerateVector`] otherwise; layers guarantee the precondition by
//! bias augmentation.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Selects the pre-activation computed by a dense or conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SimilarityKind {
    Dot,
    Cosine,
    Pcc,
    WeightNorm,
}

impl SimilarityKind {
    pub const ALL: [SimilarityKind; 4] = [
        SimilarityKind::Dot,
        SimilarityKind::Cosine,
        SimilarityKind::Pcc,
        SimilarityKind::WeightNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SimilarityKind::Dot => "dot",
            SimilarityKind::Cosine => "cosine",
            SimilarityKind::Pcc => "pcc",
            SimilarityKind::WeightNorm => "weightnorm",
        }
    }

    /// True for kernels whose value is bounded to `[-1, 1]`.
    pub fn is_bounded(self) -> bool {
        matches!(self, SimilarityKind::Cosine | SimilarityKind::Pcc)
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            SimilarityKind::Dot => 0,
            SimilarityKind::Cosine => 1,
            SimilarityKind::Pcc => 2,
            SimilarityKind::WeightNorm => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    /// Evaluates the kernel. `gain` is only read by `WeightNorm`.
    pub fn forward(self, w: &[f64], x: &[f64], gain: f64) -> Result<f64> {
        Ok(match self {
            SimilarityKind::Dot => dot_forward(w, x)?,
            SimilarityKind::Cosine => cosine_forward(w, x)?.value,
            SimilarityKind::Pcc => pcc_forward(w, x)?.value,
            SimilarityKind::WeightNorm => weightnorm_forward(w, x, gain)?.value,
        })
    }

    /// Gradients of the kernel value. The third element is `d/d gain`, zero for
    /// kernels without a gain.
    pub fn backward(self, w: &[f64], x: &[f64], gain: f64) -> Result<(KernelGrads, f64)> {
        Ok(match self {
            SimilarityKind::Dot => (dot_backward(w, x)?, 0.0),
            SimilarityKind::Cosine => (cosine_backward(w, x)?, 0.0),
            SimilarityKind::Pcc => (pcc_backward(w, x)?, 0.0),
            SimilarityKind::WeightNorm => weightnorm_backward(w, x, gain)?,
        })
    }
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown kernel `{s}` (expected dot, cosine, pcc or weightnorm)")))
    }
}

/// Forward value plus the statistics the backward pass reuses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelOutput {
    pub value: f64,
    /// `|w|`, or `|w - μ_w|` for PCC.
    pub w_norm: f64,
    /// `|x|`, or `|x - μ_x|` for PCC. Unused (NaN) for weight normalization.
    pub x_norm: f64,
    pub w_mean: f64,
    pub x_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrads {
    pub d_w: Vec<f64>,
    pub d_x: Vec<f64>,
}

fn check_len(op: &'static str, w: &[f64], x: &[f64]) -> Result<()> {
    if w.len() != x.len() || w.is_empty() {
        return Err(Error::Shape {
            op,
            left: vec![w.len()],
            right: vec![x.len()],
        });
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn mean(a: &[f64]) -> f64 {
    a.iter().sum::<f64>() / a.len() as f64
}

fn nonzero(op: &'static str, n: f64) -> Result<f64> {
    if n > 0.0 && n.is_finite() {
        Ok(n)
    } else {
        Err(Error::DegenerateVector(op))
    }
}

pub fn dot_forward(w: &[f64], x: &[f64]) -> Result<f64> {
    check_len("dot_forward", w, x)?;
    Ok(dot(w, x))
}

pub fn dot_backward(w: &[f64], x: &[f64]) -> Result<KernelGrads> {
    check_len("dot_backward", w, x)?;
    Ok(KernelGrads {
        d_w: x.to_vec(),
        d_x: w.to_vec(),
    })
}

pub fn cosine_forward(w: &[f64], x: &[f64]) -> Result<KernelOutput> {
    check_len("cosine_forward", w, x)?;
    let w_norm = nonzero("cosine_forward", norm(w))?;
    let x_norm = nonzero("cosine_forward", norm(x))?;
    Ok(KernelOutput {
        value: dot(w, x) / (w_norm * x_norm),
        w_norm,
        x_norm,
        w_mean: 0.0,
        x_mean: 0.0,
    })
}

/// `∂cos/∂w_i = x_i/(|w||x|) − w_i (w·x)/(|w|³|x|)`, and symmetrically for `x`.
pub fn cosine_backward(w: &[f64], x: &[f64]) -> Result<KernelGrads> {
    let out = cosine_forward(w, x)?;
    Ok(cosine_grads(w, x, &out))
}

fn cosine_grads(w: &[f64], x: &[f64], out: &KernelOutput) -> KernelGrads {
    let (nw, nx) = (out.w_norm, out.x_norm);
    let wx = dot(w, x);
    let a = 1.0 / (nw * nx);
    let bw = wx / (nw * nw * nw * nx);
    let bx = wx / (nw * nx * nx * nx);
    KernelGrads {
        d_w: w.iter().zip(x).map(|(&wi, &xi)| xi * a - wi * bw).collect(),
        d_x: w.iter().zip(x).map(|(&wi, &xi)| wi * a - xi * bx).collect(),
    }
}

fn centered(v: &[f64]) -> (Vec<f64>, f64) {
    let mu = mean(v);
    (v.iter().map(|x| x - mu).collect(), mu)
}

/// Pearson correlation: cosine similarity of the mean-centered vectors.
pub fn pcc_forward(w: &[f64], x: &[f64]) -> Result<KernelOutput> {
    check_len("pcc_forward", w, x)?;
    let (wc, w_mean) = centered(w);
    let (xc, x_mean) = centered(x);
    let inner = cosine_forward(&wc, &xc).map_err(|_| Error::DegenerateVector("pcc_forward"))?;
    Ok(KernelOutput {
        w_mean,
        x_mean,
        ..inner
    })
}

/// Chain rule through centering: the centered-cosine gradient projected onto
/// the zero-mean subspace, `(I − J/n) ∇`.
pub fn pcc_backward(w: &[f64], x: &[f64]) -> Result<KernelGrads> {
    check_len("pcc_backward", w, x)?;
    let (wc, _) = centered(w);
    let (xc, _) = centered(x);
    let inner = cosine_forward(&wc, &xc).map_err(|_| Error::DegenerateVector("pcc_backward"))?;
    let mut g = cosine_grads(&wc, &xc, &inner);
    remove_mean(&mut g.d_w);
    remove_mean(&mut g.d_x);
    Ok(g)
}

pub(crate) fn remove_mean(v: &mut [f64]) {
    let mu = mean(v);
    v.iter_mut().for_each(|x| *x -= mu);
}

/// `g · (w·x) / |w|`.
pub fn weightnorm_forward(w: &[f64], x: &[f64], g: f64) -> Result<KernelOutput> {
    check_len("weightnorm_forward", w, x)?;
    let w_norm = nonzero("weightnorm_forward", norm(w))?;
    Ok(KernelOutput {
        value: g * dot(w, x) / w_norm,
        w_norm,
        x_norm: f64::NAN,
        w_mean: 0.0,
        x_mean: 0.0,
    })
}

/// Returns the input/weight gradients and `∂/∂g = (w·x)/|w|`.
pub fn weightnorm_backward(w: &[f64], x: &[f64], g: f64) -> Result<(KernelGrads, f64)> {
    check_len("weightnorm_backward", w, x)?;
    let nw = nonzero("weightnorm_backward", norm(w))?;
    let wx = dot(w, x);
    let a = g / nw;
    let b = g * wx / (nw * nw * nw);
    let grads = KernelGrads {
        d_w: w.iter().zip(x).map(|(&wi, &xi)| xi * a - wi * b).collect(),
        d_x: w.iter().map(|&wi| wi * a).collect(),
    };
    Ok((grads, wx / nw))
}
