use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use fundus_fusion::cohort::{AugmentConfig, PreprocessConfig, SignalConfig, SplitRatios};
use fundus_fusion::evaluation::{BootstrapConfig, Metric};
use fundus_fusion::fusion::FusionSpec;
use fundus_fusion::training::{SweepGrid, TrainConfig};
use fundus_fusion::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticData {
    pub patients: usize,
    pub seed: u64,
    pub signal: SignalConfig,
}

impl Default for SyntheticData {
    fn default() -> Self {
        SyntheticData {
            patients: 400,
            seed: 0,
            signal: SignalConfig::default(),
        }
    }
}

/// Exactly one of a manifest file or synthetic-cohort parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Relative paths are resolved against the config file's directory.
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticData>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub ratios: SplitRatios,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub bootstrap: BootstrapConfig,
    pub metrics: Vec<Metric>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            bootstrap: BootstrapConfig::default(),
            metrics: Metric::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub count: usize,
    pub seed: u64,
    /// Heat-map opacity in the overlay.
    pub alpha: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            count: 5,
            seed: 0,
            alpha: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub split: SplitConfig,
    pub fusion: FusionSpec,
    pub preprocess: PreprocessConfig,
    /// Training-time augmentation of fundus images; `null` disables it.
    pub augment: Option<AugmentConfig>,
    pub train: TrainConfig,
    pub sweep: Option<SweepGrid>,
    pub evaluation: EvaluationConfig,
    pub explain: ExplainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            split: SplitConfig::default(),
            fusion: FusionSpec::default(),
            preprocess: PreprocessConfig::default(),
            augment: Some(AugmentConfig::default()),
            train: TrainConfig::default(),
            sweep: None,
            evaluation: EvaluationConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

fn scoped(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } => Error::Config {
            field: format!("{prefix}.{field}"),
            message,
        },
        other => other,
    }
}

impl RunConfig {
    /// Reads a config file; relative data paths become relative to its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Parse {
                location: path.display().to_string(),
                message: e.to_string(),
            })
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                cfg.data.manifest = Some(base.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, seed: Option<u64>, workers: Option<usize>) {
        if let Some(s) = seed {
            self.split.seed = s;
            self.train.seed = s;
            self.evaluation.bootstrap.seed = s;
            self.explain.seed = s;
        }
        if let Some(w) = workers {
            self.train.workers = w;
            self.evaluation.bootstrap.workers = w;
        }
    }

    pub fn validate(&self) -> fundus_fusion::Result<()> {
        match (&self.data.manifest, &self.data.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::config("data", "give either manifest or synthetic, not both"));
            }
            (None, None) => return Err(Error::config("data.manifest", "a manifest or synthetic parameters are required")),
            (None, Some(s)) => s.signal.validate().map_err(|e| scoped("data.synthetic.signal", e))?,
            _ => {}
        }
        self.split.ratios.validate().map_err(|e| scoped("split", e))?;
        self.fusion.validate_shape().map_err(|e| scoped("fusion", e))?;
        self.preprocess.validate().map_err(|e| scoped("preprocess", e))?;
        if let Some(a) = &self.augment {
            a.validate().map_err(|e| scoped("augment", e))?;
        }
        self.train.validate()?;
        if let Some(g) = &self.sweep {
            g.validate()?;
        }
        self.evaluation.bootstrap.validate()?;
        if self.evaluation.metrics.is_empty() {
            return Err(Error::config("evaluation.metrics", "must not be empty"));
        }
        if self.fusion.uses_images() && self.fusion.encoder.image_size != self.preprocess.image_size {
            return Err(Error::config(
                "fusion.encoder.image_size",
                format!(
                    "{} differs from preprocess.image_size {}",
                    self.fusion.encoder.image_size, self.preprocess.image_size
                ),
            ));
        }
        if let Some(s) = &self.data.synthetic {
            if self.preprocess.image_size > s.signal.image_size * 8 {
                return Err(Error::config("preprocess.image_size", "far larger than the synthetic images"));
            }
        }
        if !(0.0..=1.0).contains(&self.explain.alpha) {
            return Err(Error::config("explain.alpha", "must lie in [0, 1]"));
        }
        Ok(())
    }
}
