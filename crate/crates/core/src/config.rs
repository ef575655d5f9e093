//! Run configuration: one TOML file holding every section, validated as a
//! whole before any command touches the filesystem.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticSpec;
use crate::encoder::EncoderConfig;
use crate::error::{CvibError, Result};
use crate::gradcheck::ProbeConfig;
use crate::trainer::TrainConfig;
use crate::vib::DEFAULT_PRUNE_THRESHOLD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub prune_threshold: f64,
    /// Write the per-class table as CSV here as well.
    pub per_class_csv: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
            per_class_csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: SyntheticSpec,
    /// `vocab_size` is replaced by the size of the training vocabulary.
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub gradcheck: ProbeConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CvibError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CvibError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), Self::load)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CvibError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        // vocab_size is filled in later, so check the rest against a valid stand-in
        let mut enc = self.encoder.clone();
        enc.vocab_size = enc.vocab_size.max(crate::corpus::SEP + 1);
        enc.validate()?;
        self.train.betas(enc.n_layers)?;
        if enc.n_classes != self.corpus.n_classes {
            return Err(CvibError::Config(format!(
                "encoder has {} classes but the corpus {}",
                enc.n_classes, self.corpus.n_classes
            )));
        }
        if self.eval.prune_threshold.is_nan() || self.eval.prune_threshold < 0.0 {
            return Err(CvibError::Config("eval.prune_threshold must be nonnegative".into()));
        }
        self.gradcheck.validate()?;
        Ok(())
    }
}
