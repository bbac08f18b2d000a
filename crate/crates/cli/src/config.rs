use std::path::{Path, PathBuf};

use covidnn::data::Modality;
use covidnn::model::{ALEXNET_INPUT, DEFAULT_FC_HIDDEN, PROPOSED_CNN_INPUT};
use covidnn::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cnn,
    Alexnet,
}

fn default_threshold() -> f64 {
    0.5
}

fn default_train_fraction() -> f64 {
    0.5
}

fn default_fc_hidden() -> usize {
    DEFAULT_FC_HIDDEN
}

fn default_modality() -> String {
    Modality::Xray.as_str().into()
}

/// Everything a `train` or `multirun` invocation needs. Read from JSON; CLI
/// flags override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
    #[serde(default)]
    pub from_scratch: bool,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Fraction of each class sent to train when the manifest has no split.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_fc_hidden")]
    pub fc_hidden: usize,
    /// Square input side; defaults to 224 for `cnn` and 227 for `alexnet`.
    #[serde(default)]
    pub input_size: Option<usize>,
    #[serde(default = "default_modality")]
    pub modality: String,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            Some(&mut cfg.manifest),
            Some(&mut cfg.out_dir),
            cfg.pretrained.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn input_size(&self) -> usize {
        self.input_size.unwrap_or(match self.model {
            ModelKind::Cnn => PROPOSED_CNN_INPUT,
            ModelKind::Alexnet => ALEXNET_INPUT,
        })
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let usage = |m: String| Err(Failure::Usage(m));
        match self.model {
            ModelKind::Alexnet if self.pretrained.is_none() && !self.from_scratch => {
                return usage(
                    "alexnet needs pretrained weights (--pretrained) or an explicit --from-scratch"
                        .into(),
                )
            }
            ModelKind::Alexnet if self.pretrained.is_some() && self.from_scratch => {
                return usage("pretrained and from_scratch are mutually exclusive".into())
            }
            ModelKind::Alexnet if self.input_size() != ALEXNET_INPUT => {
                return usage(format!(
                    "input_size: alexnet takes {ALEXNET_INPUT}, got {}",
                    self.input_size()
                ))
            }
            ModelKind::Cnn if self.pretrained.is_some() => {
                return usage("pretrained: not allowed for the cnn model".into())
            }
            _ => {}
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return usage(format!("threshold: {} outside (0, 1)", self.threshold));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return usage(format!(
                "train_fraction: {} outside (0, 1)",
                self.train_fraction
            ));
        }
        if self.fc_hidden < 2 {
            return usage(format!("fc_hidden: must be >= 2, got {}", self.fc_hidden));
        }
        if self.input_size() == 0 {
            return usage("input_size: must be positive".into());
        }
        if self.modality.parse::<Modality>().is_err() {
            return usage(format!("modality: `{}` is not xray or ct", self.modality));
        }
        self.train
            .validate()
            .map_err(|e| Failure::Usage(e.to_string()))
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON of the effective config, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
