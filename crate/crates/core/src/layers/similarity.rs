//! Batched kernel evaluation between `U` weight rows and `N` input rows.
//!
//! This is the matrix form of [`crate::kernels`]: dense layers feed it one
//! row per example, conv layers one row per receptive field. All norms are
//! per row, so every receptive field gets its own `|x|` (and, for PCC, its
//! own mean).

use crate::kernels::{dot, mean, norm, SimilarityKind};
use crate::tensor::{gemm_acc, transpose};

/// Floor applied to norms so an all-zero row cannot divide by zero. Inputs
/// are bias-augmented so real rows never get near it; gradients treat it as
/// an exact constant.
pub(crate) const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub(crate) struct SimCache {
    kind: SimilarityKind,
    n: usize,
    u: usize,
    d: usize,
    /// Input rows as the kernel saw them (centered for PCC).
    x: Vec<f64>,
    /// Weight rows as the kernel saw them (centered for PCC).
    w: Vec<f64>,
    x_norm: Vec<f64>,
    w_norm: Vec<f64>,
    /// Raw inner products `w·x`, `N × U`.
    raw: Vec<f64>,
    /// Kernel values, `N × U`.
    out: Vec<f64>,
}

pub(crate) struct SimGrads {
    pub d_w: Vec<f64>,
    pub d_gain: Vec<f64>,
    pub d_x: Option<Vec<f64>>,
}

fn center_rows(v: &mut [f64], width: usize) {
    for row in v.chunks_mut(width) {
        let mu = mean(row);
        row.iter_mut().for_each(|x| *x -= mu);
    }
}

fn row_norms(v: &[f64], width: usize) -> Vec<f64> {
    v.chunks(width).map(|r| norm(r).max(NORM_FLOOR)).collect()
}

impl SimCache {
    pub fn output(&self) -> &[f64] {
        &self.out
    }

    pub fn into_output(self) -> Vec<f64> {
        self.out
    }

    pub fn rows(&self) -> usize {
        self.n
    }
}

/// Evaluates `kind` for every (input row, weight row) pair.
///
/// `weights` is `U × D`, `x` is `N × D`; `gain` holds one entry per unit and is
/// only read for weight normalization.
pub(crate) fn forward(
    kind: SimilarityKind,
    weights: &[f64],
    gain: Option<&[f64]>,
    u: usize,
    d: usize,
    mut x: Vec<f64>,
) -> SimCache {
    debug_assert_eq!(weights.len(), u * d);
    debug_assert_eq!(x.len() % d, 0);
    let n = x.len() / d;
    let mut w = weights.to_vec();
    if kind == SimilarityKind::Pcc {
        center_rows(&mut w, d);
        center_rows(&mut x, d);
    }

    let wt = transpose(&w, u, d);
    let mut raw = vec![0.0; n * u];
    gemm_acc(&x, &wt, &mut raw, n, d, u);

    let (x_norm, w_norm) = match kind {
        SimilarityKind::Dot => (Vec::new(), Vec::new()),
        SimilarityKind::WeightNorm => (Vec::new(), row_norms(&w, d)),
        SimilarityKind::Cosine | SimilarityKind::Pcc => (row_norms(&x, d), row_norms(&w, d)),
    };

    let out = match kind {
        SimilarityKind::Dot => raw.clone(),
        SimilarityKind::Cosine | SimilarityKind::Pcc => raw
            .chunks(u)
            .zip(&x_norm)
            .flat_map(|(r, &nx)| r.iter().zip(&w_norm).map(move |(&v, &nw)| v / (nw * nx)))
            .collect(),
        SimilarityKind::WeightNorm => {
            let g = gain.expect("weight normalization needs a gain vector");
            raw.chunks(u)
                .flat_map(|r| {
                    r.iter()
                        .zip(&w_norm)
                        .zip(g)
                        .map(|((&v, &nw), &gi)| gi * v / nw)
                })
                .collect()
        }
    };

    SimCache {
        kind,
        n,
        u,
        d,
        x,
        w,
        x_norm,
        w_norm,
        raw,
        out,
    }
}

/// Backpropagates `upstream` (`N × U`) through the cached evaluation.
///
/// Returns `∂L/∂W` (`U × D`), `∂L/∂gain` (length `U`, zeros unless weight
/// normalization) and, when requested, `∂L/∂X` (`N × D`).
pub(crate) fn backward(
    cache: &SimCache,
    upstream: &[f64],
    gain: Option<&[f64]>,
    need_dx: bool,
) -> SimGrads {
    let SimCache { n, u, d, .. } = *cache;
    debug_assert_eq!(upstream.len(), n * u);

    // Coefficient matrix A (N × U) multiplying the "direct" terms
    // dW += Aᵀ X and dX += A W.
    let a: Vec<f64> = match cache.kind {
        SimilarityKind::Dot => upstream.to_vec(),
        SimilarityKind::Cosine | SimilarityKind::Pcc => upstream
            .chunks(u)
            .zip(&cache.x_norm)
            .flat_map(|(g, &nx)| g.iter().zip(&cache.w_norm).map(move |(&gv, &nw)| gv / (nw * nx)))
            .collect(),
        SimilarityKind::WeightNorm => {
            let gain = gain.expect("weight normalization needs a gain vector");
            upstream
                .chunks(u)
                .flat_map(|g| {
                    g.iter()
                        .zip(&cache.w_norm)
                        .zip(gain)
                        .map(|((&gv, &nw), &gi)| gv * gi / nw)
                })
                .collect()
        }
    };

    let at = transpose(&a, n, u);
    let mut d_w = vec![0.0; u * d];
    gemm_acc(&at, &cache.x, &mut d_w, u, n, d);

    let mut d_gain = vec![0.0; u];
    match cache.kind {
        SimilarityKind::Dot => {}
        SimilarityKind::Cosine | SimilarityKind::Pcc => {
            // Radial term: −w_u · Σ_n G c / |w_u|².
            let mut s = vec![0.0; u];
            for (g, c) in upstream.chunks(u).zip(cache.out.chunks(u)) {
                for j in 0..u {
                    s[j] += g[j] * c[j];
                }
            }
            subtract_scaled_rows(&mut d_w, &cache.w, d, |j| s[j] / (cache.w_norm[j] * cache.w_norm[j]));
        }
        SimilarityKind::WeightNorm => {
            let gain = gain.expect("weight normalization needs a gain vector");
            let mut s = vec![0.0; u];
            for (g, r) in upstream.chunks(u).zip(cache.raw.chunks(u)) {
                for j in 0..u {
                    s[j] += g[j] * r[j];
                }
            }
            for j in 0..u {
                d_gain[j] = s[j] / cache.w_norm[j];
            }
            subtract_scaled_rows(&mut d_w, &cache.w, d, |j| {
                let nw = cache.w_norm[j];
                gain[j] * s[j] / (nw * nw * nw)
            });
        }
    }

    let d_x = need_dx.then(|| {
        let mut d_x = vec![0.0; n * d];
        gemm_acc(&a, &cache.w, &mut d_x, n, u, d);
        if cache.kind.is_bounded() {
            let s: Vec<f64> = upstream
                .chunks(u)
                .zip(cache.out.chunks(u))
                .map(|(g, c)| dot(g, c))
                .collect();
            subtract_scaled_rows(&mut d_x, &cache.x, d, |i| s[i] / (cache.x_norm[i] * cache.x_norm[i]));
        }
        if cache.kind == SimilarityKind::Pcc {
            center_rows(&mut d_x, d);
        }
        d_x
    });

    if cache.kind == SimilarityKind::Pcc {
        center_rows(&mut d_w, d);
    }

    SimGrads { d_w, d_gain, d_x }
}

/// `target[i] −= coef(i) · rows[i]` for every row `i`.
fn subtract_scaled_rows(target: &mut [f64], rows: &[f64], width: usize, coef: impl Fn(usize) -> f64) {
    for (i, (t, r)) in target.chunks_mut(width).zip(rows.chunks(width)).enumerate() {
        let c = coef(i);
        for (tv, &rv) in t.iter_mut().zip(r) {
            *tv -= c * rv;
        }
    }
}
