//! Run configuration shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::MelConfig;
use crate::error::{Error, Result};
use crate::losses::{DecodeConfig, LossWeights};
use crate::tasks::{ModelConfig, PretrainConfig};
use crate::trainer::{BatchConfig, OptimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub corpus: PathBuf,
    /// Unpaired sentences; empty means `<corpus>/text.jsonl`.
    pub sentences: PathBuf,
    pub unit_iters: usize,
    pub unit_seed: u64,
    /// Use only the first `limit` utterances when fine-tuning (0 = all).
    pub limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("data"),
            sentences: PathBuf::new(),
            unit_iters: 20,
            unit_seed: 0,
            limit: 0,
        }
    }
}

impl DataConfig {
    pub fn sentences_path(&self) -> PathBuf {
        if self.sentences.as_os_str().is_empty() {
            self.corpus.join(crate::data::io::TEXT_FILE)
        } else {
            self.sentences.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Start the backbone decoder from scratch instead of the checkpoint.
    pub reinit_decoder: bool,
    /// Seed of the re-rendered voice-conversion targets.
    pub target_seed: u64,
    /// Frame cap for spectrogram decoding at evaluation.
    pub max_frames: usize,
    pub optim: OptimConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            reinit_decoder: false,
            target_seed: 7,
            max_frames: 64,
            optim: OptimConfig {
                peak_lr: 1e-3,
                total_steps: 500,
                ..OptimConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Write a checkpoint every this many updates (0 = only at the end).
    pub checkpoint_every: u64,
    pub data: DataConfig,
    pub mel: MelConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub losses: LossWeights,
    pub optim: OptimConfig,
    pub batch: BatchConfig,
    pub decode: DecodeConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            checkpoint_every: 50,
            data: DataConfig::default(),
            mel: MelConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            losses: LossWeights::default(),
            optim: OptimConfig::default(),
            batch: BatchConfig::default(),
            decode: DecodeConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.losses.validate()?;
        self.optim.validate()?;
        self.finetune.optim.validate()?;
        self.decode.validate()?;
        if self.mel.mel_bins != self.model.net.mel_bins {
            return Err(Error::Config(format!(
                "mel.mel_bins {} differs from model.net.mel_bins {}",
                self.mel.mel_bins, self.model.net.mel_bins
            )));
        }
        if self.finetune.max_frames == 0 {
            return Err(Error::Config("finetune.max_frames must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[optim]\npeak = 1.0").is_err());
        let cfg = RunConfig::from_toml("seed = 3\n[optim]\npeak_lr = 0.001").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.optim.total_steps, OptimConfig::default().total_steps);
    }
}
