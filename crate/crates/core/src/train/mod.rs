//! Mini-batch gradient descent with optional parameter averaging.

mod loss;
mod metrics;
mod optim;

pub use loss::cross_entropy;
pub use metrics::{read_metrics, trailing_summary, MetricsRow, MetricsWriter, TrailingSummary, METRICS_HEADER};
pub use optim::{ema_update, load_params, sgd_step, Ema};

use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::init::INIT_STD;
use crate::kernels::SimilarityKind;
use crate::network::{Architecture, Network, NormKind};

/// Rows evaluated per inference call.
pub const EVAL_CHUNK: usize = 1000;

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub kernel: SimilarityKind,
    pub learning_rate: f64,
    /// Step size for the softmax scale `γ_out`.
    pub scale_learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// 0 disables parameter averaging.
    pub ema_decay: f64,
    pub init_std: f64,
    /// Evaluate every this many steps; 0 evaluates at the end of each epoch.
    pub eval_every: usize,
    /// When false, `wall_ms` is written as 0 so metrics are reproducible
    /// byte for byte.
    pub record_wall_time: bool,
}

/// Step size of the softmax scale, shared by every kernel.
pub const DEFAULT_SCALE_LEARNING_RATE: f64 = 1.0;

/// Learning rate used by the reference protocol: 10 for cosine and PCC
/// kernels without an extra norm layer, 1 for everything else.
pub fn default_learning_rate(kernel: SimilarityKind, norm: NormKind) -> f64 {
    match (kernel, norm) {
        (SimilarityKind::Cosine | SimilarityKind::Pcc, NormKind::None) => 10.0,
        _ => 1.0,
    }
}

impl TrainConfig {
    /// Protocol defaults: batch 100 for fully connected nets and 128 with
    /// convolutions; EMA 0.9999 only for convolutional nets.
    pub fn with_defaults(architecture: Architecture, kernel: SimilarityKind, norm: NormKind) -> Self {
        let conv = architecture.has_conv();
        Self {
            learning_rate: default_learning_rate(kernel, norm),
            scale_learning_rate: DEFAULT_SCALE_LEARNING_RATE,
            batch_size: if conv { 128 } else { 100 },
            ema_decay: if conv { 0.9999 } else { 0.0 },
            architecture,
            kernel,
            epochs: 1,
            seed: 0,
            init_std: INIT_STD,
            eval_every: 0,
            record_wall_time: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.scale_learning_rate >= 0.0 && self.scale_learning_rate.is_finite()) {
            return bad(format!(
                "scale_learning_rate must be non-negative, got {}",
                self.scale_learning_rate
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub ema: Option<Ema>,
    pub rows: Vec<MetricsRow>,
}

impl TrainOutcome {
    /// The network used for evaluation: averaged parameters when EMA is on.
    pub fn eval_network(&self) -> Result<Network> {
        eval_network(&self.network, self.ema.as_ref())
    }
}

fn eval_network(net: &Network, ema: Option<&Ema>) -> Result<Network> {
    let mut n = net.clone();
    if let Some(e) = ema {
        e.apply_to(&mut n)?;
    }
    Ok(n)
}

/// Percentage of misclassified examples under inference-mode evaluation.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    let mut wrong = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.gather(chunk);
        let probs = net.infer(&x)?;
        for (r, &label) in y.iter().enumerate() {
            let row = probs.row(r);
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                .0;
            if pred != label {
                wrong += 1;
            }
        }
    }
    Ok(100.0 * wrong as f64 / data.len() as f64)
}

fn check_compat(net: &Network, data: &Dataset, which: &str) -> Result<()> {
    let want: usize = net.input_shape().iter().product();
    if data.features() != want {
        return Err(Error::Config(format!(
            "{which} set has {} features per example but the architecture expects {want}",
            data.features()
        )));
    }
    if data.n_classes > net.classes() {
        return Err(Error::Config(format!(
            "{which} set has {} classes but the network outputs {}",
            data.n_classes,
            net.classes()
        )));
    }
    Ok(())
}

fn elapsed_ms(start: Option<Instant>) -> u64 {
    start.map_or(0, |s| s.elapsed().as_millis() as u64)
}

/// Runs mini-batch SGD over `train_set`, evaluating on `test_set` and
/// passing each metrics row to `on_row` as it is produced. The last row
/// always describes the final parameters.
///
/// Each epoch visits a fresh seeded permutation in full batches. The run is
/// a pure function of `(config, train_set, test_set)` apart from `wall_ms`.
pub fn train(
    config: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    mut on_row: impl FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut net = Network::build_with_std(&config.architecture, config.kernel, config.seed, config.init_std)?;
    check_compat(&net, train_set, "training")?;
    check_compat(&net, test_set, "test")?;

    let mut ema = (config.ema_decay > 0.0)
        .then(|| Ema::new(&net, config.ema_decay))
        .transpose()?;
    let start = config.record_wall_time.then(Instant::now);
    let mut rows = Vec::new();
    let mut step = 0usize;
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);

    for epoch in 0..config.epochs {
        for batch in train_set.batches(config.batch_size, config.seed, epoch as u64)? {
            let (x, y) = train_set.gather(&batch);
            net.forward(&x)?;
            let loss = net.backward(&y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {}", step + 1)));
            }
            sgd_step(&mut net, config.learning_rate, config.scale_learning_rate)?;
            if let Some(e) = ema.as_mut() {
                e.update(&net)?;
            }
            step += 1;
            loss_sum += loss;
            loss_count += 1;

            if config.eval_every > 0 && step.is_multiple_of(config.eval_every) {
                let row = MetricsRow {
                    epoch: epoch + 1,
                    step,
                    train_loss: loss_sum / loss_count as f64,
                    test_error_percent: evaluate(&eval_network(&net, ema.as_ref())?, test_set)?,
                    wall_ms: elapsed_ms(start),
                };
                (loss_sum, loss_count) = (0.0, 0);
                on_row(&row)?;
                rows.push(row);
            }
        }
        if config.eval_every == 0 {
            let row = MetricsRow {
                epoch: epoch + 1,
                step,
                train_loss: loss_sum / loss_count.max(1) as f64,
                test_error_percent: evaluate(&eval_network(&net, ema.as_ref())?, test_set)?,
                wall_ms: elapsed_ms(start),
            };
            (loss_sum, loss_count) = (0.0, 0);
            on_row(&row)?;
            rows.push(row);
        }
    }

    if loss_count > 0 {
        let row = MetricsRow {
            epoch: config.epochs,
            step,
            train_loss: loss_sum / loss_count as f64,
            test_error_percent: evaluate(&eval_network(&net, ema.as_ref())?, test_set)?,
            wall_ms: elapsed_ms(start),
        };
        on_row(&row)?;
        rows.push(row);
    }

    Ok(TrainOutcome {
        network: net,
        ema,
        rows,
    })
}
