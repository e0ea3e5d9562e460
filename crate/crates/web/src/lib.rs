//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The exported functions are thin wrappers over plain Rust functions so the
//! same logic can be tested natively.

use cosnorm::data::synth_blobs;
use cosnorm::train::{self, TrainConfig};
use cosnorm::{Architecture, Network, NormKind, SimilarityKind, Tensor};
use wasm_bindgen::prelude::*;

fn parse_vector(s: &str) -> Result<Vec<f64>, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect()
}

fn parse_kernel(s: &str) -> Result<SimilarityKind, String> {
    s.parse().map_err(|e: cosnorm::Error| e.to_string())
}

/// `[dot, cosine, pcc, weightnorm(g = 1)]` between `w` and `scale · x`.
pub fn kernel_values_impl(w: &str, x: &str, scale: f64) -> Result<Vec<f64>, String> {
    let w = parse_vector(w)?;
    let x: Vec<f64> = parse_vector(x)?.into_iter().map(|v| v * scale).collect();
    SimilarityKind::ALL
        .iter()
        .map(|k| k.forward(&w, &x, 1.0).map_err(|e| e.to_string()))
        .collect()
}

/// Class probabilities of a bias-free `6 → 5 → 4 → 3` network for one
/// input and for the same input times `scale`.
///
/// Returns `[max |Δp|, p(x)…, p(scale · x)…]`.
pub fn magnitude_robustness_impl(kernel: &str, scale: f64, seed: u32) -> Result<Vec<f64>, String> {
    let kind = parse_kernel(kernel)?;
    let arch = Architecture::mlp(6, &[5, 4], 3, NormKind::None);
    let mut net = Network::build(&arch, kind, u64::from(seed)).map_err(|e| e.to_string())?;
    net.zero_bias();
    let x = cosnorm::init::init_weights(&[1, 6], u64::from(seed) + 1).map(|v| v * 10.0);
    let scaled = x.map(|v| v * scale);
    let probs = |t: &Tensor| net.infer(t).map(|p| p.into_data()).map_err(|e| e.to_string());
    let (a, b) = (probs(&x)?, probs(&scaled)?);
    let shift = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    Ok(std::iter::once(shift).chain(a).chain(b).collect())
}

/// Trains a `2 → 16 → 16 → 3` network on three Gaussian blobs and returns
/// the test error (%) after every epoch.
pub fn train_blobs_impl(kernel: &str, epochs: u32, learning_rate: f64, seed: u32) -> Result<Vec<f64>, String> {
    let kind = parse_kernel(kernel)?;
    if epochs == 0 || epochs > 200 {
        return Err("epochs must lie in 1..=200".into());
    }
    let all = synth_blobs(150, 3, 2, 3.0, u64::from(seed)).map_err(|e| e.to_string())?;
    let (train_set, test_set) = all.split_at(300);
    let arch = Architecture::mlp(2, &[16, 16], 3, NormKind::None);
    let mut config = TrainConfig::with_defaults(arch, kind, NormKind::None);
    config.epochs = epochs as usize;
    config.batch_size = 20;
    config.seed = u64::from(seed);
    config.record_wall_time = false;
    if learning_rate > 0.0 {
        config.learning_rate = learning_rate;
    }
    let out = train::train(&config, &train_set, &test_set, |_| Ok(())).map_err(|e| e.to_string())?;
    Ok(out.rows.iter().map(|r| r.test_error_percent).collect())
}

#[wasm_bindgen]
pub fn kernel_values(w: &str, x: &str, scale: f64) -> Result<Vec<f64>, JsError> {
    kernel_values_impl(w, x, scale).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn magnitude_robustness(kernel: &str, scale: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    magnitude_robustness_impl(kernel, scale, seed).map_err(|e| JsError::new(&e))
}

/// `learning_rate <= 0` selects the kernel's default.
#[wasm_bindgen]
pub fn train_blobs(kernel: &str, epochs: u32, learning_rate: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    train_blobs_impl(kernel, epochs, learning_rate, seed).map_err(|e| JsError::new(&e))
}
