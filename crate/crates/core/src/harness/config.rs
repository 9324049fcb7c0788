//! Versioned experiment configuration (TOML on disk).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::corpus::{ingest_corpus, synthetic_text, Corpus, TokenMode};
use super::{HarnessError, Result};
use crate::model::{AdamWConfig, ModelConfig, ScheduleConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub mode: TokenMode,
    /// Plain-text file; relative paths resolve against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Generated text used when no path is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub bytes: usize,
}

impl CorpusSpec {
    pub fn load(&self) -> Result<Corpus> {
        match (&self.path, &self.synthetic) {
            (Some(path), None) => ingest_corpus(path, self.mode),
            (None, Some(s)) => Corpus::from_bytes(synthetic_text(s.seed, s.bytes).as_bytes(), self.mode),
            _ => Err(HarnessError::Config(
                "corpus needs exactly one of `path` or `synthetic`".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub peak_lr: f64,
    /// Warmup length as a fraction of `total_steps`.
    pub warmup_fraction: f64,
    pub final_lr_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionPlan {
    /// Position of the mask step as a fraction of `total_steps`.
    pub mask_step_fraction: f64,
    /// Number of consecutive training batches, ending at the mask step,
    /// whose active sets are unioned into the activity mask.
    pub mask_union_batches: usize,
    /// Train a random-mask control arm next to the activity-masked arm.
    pub random_control: bool,
    /// Init seed for the capacity rerun; `model.seed + 1` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round2_seed: Option<u64>,
}

impl Default for InterventionPlan {
    fn default() -> Self {
        Self {
            mask_step_fraction: 0.05,
            mask_union_batches: 1,
            random_control: true,
            round2_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Seed of the training data order.
    pub seed: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    /// Metrics are logged every `metric_every` steps and at the last step.
    pub metric_every: u64,
    /// Checkpoint cadence in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    /// Validation windows evaluated at the end (0 = all of them).
    pub eval_windows: usize,
    pub output_dir: PathBuf,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub intervention: InterventionPlan,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            total_steps: 20_000,
            batch_size: 8,
            metric_every: 50,
            checkpoint_every: 1_000,
            eval_windows: 256,
            output_dir: PathBuf::from("runs/desk"),
            corpus: CorpusSpec {
                mode: TokenMode::Byte,
                path: None,
                synthetic: Some(SyntheticSpec {
                    seed: 0,
                    bytes: 4_000_000,
                }),
            },
            model: ModelConfig::default(),
            schedule: ScheduleSpec {
                peak_lr: 3e-3,
                warmup_fraction: 0.005,
                final_lr_fraction: 0.0,
            },
            optimizer: AdamWConfig::default(),
            intervention: InterventionPlan::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(HarnessError::Config(format!(
                "config version {} is not supported (expected {})",
                self.version, CONFIG_VERSION
            )));
        }
        self.model.validate()?;
        if self.batch_size == 0 || self.metric_every == 0 {
            return Err(HarnessError::Config("batch_size and metric_every must be positive".into()));
        }
        if self.total_steps > 0 {
            self.schedule()?;
        }
        let plan = &self.intervention;
        if !(plan.mask_step_fraction > 0.0 && plan.mask_step_fraction < 1.0) {
            return Err(HarnessError::Config(format!(
                "mask_step_fraction must lie strictly between 0 and 1, got {}",
                plan.mask_step_fraction
            )));
        }
        if plan.mask_union_batches == 0 {
            return Err(HarnessError::Config("mask_union_batches must be at least 1".into()));
        }
        if self.corpus.path.is_some() == self.corpus.synthetic.is_some() {
            return Err(HarnessError::Config(
                "corpus needs exactly one of `path` or `synthetic`".into(),
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<ScheduleConfig> {
        let w = self.schedule.warmup_fraction;
        if !(w > 0.0 && w < 1.0) {
            return Err(HarnessError::Config(format!("warmup_fraction must lie in (0, 1), got {}", w)));
        }
        Ok(ScheduleConfig::from_fraction(
            self.total_steps,
            w,
            self.schedule.peak_lr,
            self.schedule.final_lr_fraction,
        )?)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form,
    /// ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value.as_object_mut().expect("object").remove("output_dir");
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{:02x}", b)).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file, resolving a relative corpus path against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {}", path.display(), e)))?;
        let mut config = Self::from_toml(&text)?;
        if let (Some(p), Some(dir)) = (&config.corpus.path, path.parent()) {
            if p.is_relative() {
                config.corpus.path = Some(dir.join(p));
            }
        }
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// Tokens seen by one training batch.
    pub fn tokens_per_batch(&self) -> usize {
        self.batch_size * self.model.seq_len
    }
}
