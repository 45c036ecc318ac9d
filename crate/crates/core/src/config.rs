//! Experiment configuration loaded from one TOML file.
//!
//! ```toml
//! schema_version = 1
//! seed = 7
//! preset = "compact"            # or "desk" (default)
//!
//! [train]
//! epochs = 10
//! rank = 4
//!
//! [stream]
//! permutation = 0
//! domains = ["bright-blob", "shadow-region"]
//! ```
//!
//! Every table and key is optional. `[model]` keys override the preset;
//! `stream.domains` entries are either a kind name or a full domain table.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{TaskStream, TrainConfig};
use crate::model::{ModelConfig, PretrainConfig};
use crate::synth::{default_domains, DomainKind, DomainSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Compact,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::default(),
            Preset::Compact => ModelConfig::compact(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DomainEntry {
    Kind(DomainKind),
    Spec(DomainSpec),
}

impl DomainEntry {
    pub fn resolve(&self) -> DomainSpec {
        match self {
            DomainEntry::Kind(k) => DomainSpec::default_for(*k),
            DomainEntry::Spec(s) => s.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub domains: Vec<DomainEntry>,
    pub permutation: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            domains: default_domains().into_iter().map(DomainEntry::Spec).collect(),
            permutation: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: u32,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    preset: Preset,
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default)]
    checkpoint: Option<PathBuf>,
    #[serde(default)]
    model: Option<toml::Table>,
    #[serde(default)]
    pretrain: PretrainConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    stream: StreamConfig,
}

/// A fully resolved experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Output root; `AUGSEG_OUT` and `--out` take precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Base checkpoint path; defaults to `<out>/base/base.ckpt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub stream: StreamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out: None,
            checkpoint: None,
            model: preset.model(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            stream: StreamConfig::default(),
        }
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Validation(format!("{}: {e}", origin.display())))?;
        if raw.schema_version != SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "{}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
                origin.display(),
                raw.schema_version
            )));
        }
        let mut model = toml::Table::try_from(raw.preset.model()).expect("model config serializes");
        for (k, v) in raw.model.unwrap_or_default() {
            model.insert(k, v);
        }
        let model: ModelConfig = model
            .try_into()
            .map_err(|e| Error::Validation(format!("{}: [model]: {e}", origin.display())))?;
        let cfg = Self {
            schema_version: raw.schema_version,
            seed: raw.seed.unwrap_or(0),
            out: raw.out,
            checkpoint: raw.checkpoint,
            model,
            pretrain: raw.pretrain,
            train: raw.train,
            stream: StreamConfig {
                domains: raw.stream.domains.iter().map(|d| DomainEntry::Spec(d.resolve())).collect(),
                permutation: raw.stream.permutation,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        if self.stream.domains.is_empty() {
            return Err(Error::Validation("stream.domains is empty".into()));
        }
        for d in self.domains() {
            d.validate()?;
            if d.kind == DomainKind::Base {
                return Err(Error::Validation("the base domain is reserved for pretraining".into()));
            }
        }
        let k = self.train.start_block.unwrap_or_else(|| self.model.default_start_block());
        if k >= self.model.num_blocks {
            return Err(Error::Validation(format!(
                "start block {k} must be below {} blocks",
                self.model.num_blocks
            )));
        }
        Ok(())
    }

    pub fn domains(&self) -> Vec<DomainSpec> {
        self.stream.domains.iter().map(DomainEntry::resolve).collect()
    }

    pub fn task_stream(&self) -> TaskStream {
        TaskStream::new(self.domains(), self.stream.permutation)
    }

    /// The reproducibility echo: every resolved field except output locations.
    pub fn echo(&self) -> Self {
        Self {
            out: None,
            checkpoint: None,
            ..self.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hash of everything that determines the base checkpoint.
    pub fn base_key(&self) -> String {
        let key = serde_json::json!({
            "model": self.model,
            "pretrain": self.pretrain,
            "seed": self.seed,
        });
        hex(&Sha256::digest(key.to_string().as_bytes()))
    }

    /// Output root: explicit override, then `AUGSEG_OUT`, then the config, then `runs`.
    pub fn out_root(&self, cli: Option<&Path>) -> PathBuf {
        if let Some(p) = cli {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os("AUGSEG_OUT").filter(|s| !s.is_empty()) {
            return PathBuf::from(p);
        }
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn checkpoint_path(&self, root: &Path) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| root.join("base").join("base.ckpt"))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
