use std::fs;
use std::path::{Path, PathBuf};

use cosnorm::data::{load_idx, synth_blobs};
use cosnorm::train::TrainConfig;
use cosnorm::{Architecture, Dataset, NormKind, SimilarityKind};
use serde::Deserialize;

use crate::Failure;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub dataset: DatasetSpec,
    pub architecture: ArchitectureSpec,
    #[serde(default = "default_kernel")]
    pub kernel: String,
    #[serde(default = "default_norm")]
    pub norm: String,
    pub learning_rate: Option<f64>,
    pub scale_learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub ema_decay: Option<f64>,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    pub init_std: Option<f64>,
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_window")]
    pub summary_window: usize,
    #[serde(default = "default_wall_clock")]
    pub wall_clock: bool,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub variants: Vec<VariantSpec>,
    #[serde(skip)]
    base_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first `n` training examples.
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    Blobs {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub conv: Vec<ConvSpec>,
    /// `[channels, height, width]`; required with conv layers.
    pub input_shape: Option<[usize; 3]>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub filters: usize,
    pub field: [usize; 2],
    #[serde(default = "one")]
    pub stride: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    pub kernel: String,
    #[serde(default = "default_norm")]
    pub norm: String,
    pub learning_rate: Option<f64>,
}

fn default_kernel() -> String {
    "cosine".into()
}

fn default_norm() -> String {
    "none".into()
}

fn default_window() -> usize {
    50
}

fn default_wall_clock() -> bool {
    true
}

fn default_separation() -> f64 {
    4.0
}

fn one() -> usize {
    1
}

/// A spec resolved into everything one training run needs.
pub struct RunPlan {
    pub name: String,
    pub kernel: SimilarityKind,
    pub norm: NormKind,
    pub config: TrainConfig,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let mut spec: ExperimentSpec =
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        spec.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if spec.name.is_empty() {
            return Err(Failure::Usage(format!("{}: key `name` must not be empty", path.display())));
        }
        if spec.summary_window == 0 {
            return Err(Failure::Usage(format!("{}: key `summary_window` must be positive", path.display())));
        }
        Ok(spec)
    }

    /// Paths in a spec are relative to the spec file.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset), Failure> {
        match &self.dataset {
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                let limit = |d: Dataset, n: &Option<usize>| match n {
                    Some(n) if *n < d.len() => d.split_at(*n).0,
                    _ => d,
                };
                let train = load_idx(self.resolve(train_images), self.resolve(train_labels))?;
                let test = load_idx(self.resolve(test_images), self.resolve(test_labels))?;
                Ok((limit(train, train_limit), limit(test, test_limit)))
            }
            DatasetSpec::Blobs {
                classes,
                dim,
                train_per_class,
                test_per_class,
                separation,
                seed,
            } => {
                let all = synth_blobs(train_per_class + test_per_class, *classes, *dim, *separation, *seed)
                    .map_err(|e| Failure::Usage(format!("dataset: {e}")))?;
                Ok(all.split_at(train_per_class * classes))
            }
        }
    }

    pub fn architecture(&self, features: usize, classes: usize, norm: NormKind) -> Result<Architecture, Failure> {
        let a = &self.architecture;
        if a.conv.is_empty() {
            if let Some(shape) = a.input_shape {
                if shape.iter().product::<usize>() != features {
                    return Err(Failure::Usage(format!(
                        "architecture.input_shape {shape:?} does not match {features} features"
                    )));
                }
            }
            return Ok(Architecture::mlp(features, &a.hidden, classes, norm));
        }
        let shape = a
            .input_shape
            .ok_or_else(|| Failure::Usage("architecture.input_shape is required with conv layers".into()))?;
        if shape.iter().product::<usize>() != features {
            return Err(Failure::Usage(format!(
                "architecture.input_shape {shape:?} does not match {features} features"
            )));
        }
        let convs: Vec<_> = a.conv.iter().map(|c| (c.filters, (c.field[0], c.field[1]), c.stride)).collect();
        Ok(Architecture::convnet(shape, &convs, &a.hidden, classes, norm))
    }

    fn plan(
        &self,
        name: &str,
        kernel: &str,
        norm: &str,
        learning_rate: Option<f64>,
        data: &Dataset,
    ) -> Result<RunPlan, Failure> {
        let kind: SimilarityKind = kernel.parse().map_err(|e| Failure::Usage(format!("{name}: {e}")))?;
        let norm: NormKind = norm.parse().map_err(|e| Failure::Usage(format!("{name}: {e}")))?;
        let arch = self.architecture(data.features(), data.n_classes, norm)?;
        let mut config = TrainConfig::with_defaults(arch, kind, norm);
        if let Some(lr) = learning_rate {
            config.learning_rate = lr;
        }
        if let Some(v) = self.scale_learning_rate {
            config.scale_learning_rate = v;
        }
        if let Some(b) = self.batch_size {
            config.batch_size = b;
        }
        if let Some(d) = self.ema_decay {
            config.ema_decay = d;
        }
        if let Some(s) = self.init_std {
            config.init_std = s;
        }
        config.epochs = self.epochs;
        config.seed = self.seed;
        config.eval_every = self.eval_every;
        config.record_wall_time = self.wall_clock;
        config.validate().map_err(|e| Failure::Usage(format!("{name}: {e}")))?;
        if config.batch_size > data.len() {
            return Err(Failure::Usage(format!(
                "{name}: batch_size {} exceeds the {} training examples",
                config.batch_size,
                data.len()
            )));
        }
        Ok(RunPlan {
            name: name.to_string(),
            kernel: kind,
            norm,
            config,
        })
    }

    /// The single run described by the top-level keys.
    pub fn main_plan(&self, data: &Dataset) -> Result<RunPlan, Failure> {
        self.plan(&self.name, &self.kernel, &self.norm, self.learning_rate, data)
    }

    /// One run per entry of `variants`, each at its kernel's default
    /// learning rate unless the variant sets one.
    pub fn variant_plans(&self, data: &Dataset) -> Result<Vec<RunPlan>, Failure> {
        if self.variants.len() < 2 {
            return Err(Failure::Usage("compare needs at least two entries in `variants`".into()));
        }
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) || names.iter().any(|n| n.is_empty() || n.contains(['/', '\\'])) {
            return Err(Failure::Usage("variant names must be unique, non-empty file names".into()));
        }
        self.variants
            .iter()
            .map(|v| self.plan(&v.name, &v.kernel, &v.norm, v.learning_rate, data))
            .collect()
    }
}
