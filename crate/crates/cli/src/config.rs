use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use veco::data::SyntheticConfig;
use veco::finetune::{ClsConfig, ClsMode};
use veco::model::ModelConfig;
use veco::seq2seq::{MtConfig, Selection};
use veco::training::PretrainConfig;

use crate::error::{CliError, Result};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClsTask {
    Parity,
    Xor,
}

impl fmt::Display for ClsTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClsTask::Parity => "parity",
            ClsTask::Xor => "xor",
        })
    }
}

impl FromStr for ClsTask {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "parity" => Ok(ClsTask::Parity),
            "xor" => Ok(ClsTask::Xor),
            _ => Err(format!("unknown classification task `{s}` (parity or xor)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Generator of the parallel corpus; its seed is replaced by the run seed.
    pub synthetic: SyntheticConfig,
    /// Pairs held out from the tail of the parallel corpus.
    pub dev_pairs: usize,
    pub docs_per_language: usize,
    pub sentences_per_doc: usize,
    pub cls_task: ClsTask,
    /// Training examples (source sentences for xor, which yields two each).
    pub cls_train: usize,
    pub cls_dev: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: SyntheticConfig::default(),
            dev_pairs: 500,
            docs_per_language: 100,
            sentences_per_doc: 10,
            cls_task: ClsTask::Parity,
            cls_train: 400,
            cls_dev: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub mt: MtConfig,
    /// Decoder depth; defaults to the encoder depth.
    pub decoder_layers: Option<usize>,
    pub selection: Selection,
    pub tie: bool,
    pub cls: ClsConfig,
    pub cls_mode: ClsMode,
    pub num_labels: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mt: MtConfig::default(),
            decoder_layers: None,
            selection: Selection::Full,
            tie: true,
            cls: ClsConfig::default(),
            cls_mode: ClsMode::PlugOut,
            num_labels: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// 1 decodes greedily.
    pub beam_size: usize,
    pub max_len: usize,
    pub smooth_bleu: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            max_len: 32,
            smooth_bleu: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub decode: DecodeConfig,
}

impl ExperimentConfig {
    /// File values over defaults; `seed` falls back to `VECO_SEED`, then 0.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::usage(format!("{}: {}", p.display(), e.message())))?
            }
            None => ExperimentConfig::default(),
        };
        if cfg.seed.is_none() {
            cfg.seed = Some(env_seed()?);
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Copies model-owned fields into the sections that repeat them.
    pub fn resolve(&mut self) -> Result<()> {
        self.pretrain.batch.max_seq_len = self.model.max_seq_len;
        self.pretrain.batch.vocab_size = self.model.vocab_size;
        self.model
            .validate()
            .map_err(|e| CliError::usage(e.to_string()))?;
        self.data
            .synthetic
            .validate()
            .map_err(|e| CliError::usage(e.to_string()))?;
        self.pretrain
            .schedule()
            .map_err(|e| CliError::usage(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| CliError::usage(format!("cannot serialize config: {e}")))
    }
}

fn env_seed() -> Result<u64> {
    match std::env::var("VECO_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("VECO_SEED `{s}` is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}
