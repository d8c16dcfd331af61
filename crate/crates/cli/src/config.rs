//! Run configuration: one TOML file describing data, model, training,
//! evaluation and output paths.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use mematch_core::episodes::synthetic::{generate, SyntheticSpec};
use mematch_core::episodes::{augment_rotations, load_dataset, DatasetSplits, SamplingStrategy};
use mematch_core::model::ModelConfig;
use mematch_core::trainer::{AdamConfig, EvalSettings, LossReduction, SessionSettings};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream: data, init, episodes, eval.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub optim: AdamConfig,
    pub eval: EvalSettings,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root containing `dataset.toml`. Without it the procedural
    /// glyph dataset described by `synthetic` is used.
    pub path: Option<PathBuf>,
    /// Add the 90°, 180° and 270° rotations of every class as new classes.
    pub rotate: bool,
    /// Apply the rotation augmentation to validation and test classes too.
    pub rotate_eval: bool,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: None, rotate: false, rotate_eval: true, synthetic: SyntheticSpec::default() }
    }
}

impl DataConfig {
    /// Loads or generates all splits, applying rotation augmentation.
    pub fn load(&self, seed: u64) -> anyhow::Result<DatasetSplits> {
        let mut splits = match &self.path {
            Some(p) => load_dataset(p).with_context(|| format!("loading dataset {}", p.display()))?,
            None => generate(&self.synthetic, seed)?,
        };
        if self.rotate {
            splits.train = augment_rotations(&splits.train)?;
            if self.rotate_eval {
                splits.test = augment_rotations(&splits.test)?;
                if let Some(val) = &splits.val {
                    splits.val = Some(augment_rotations(val)?);
                }
            }
        }
        Ok(splits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    /// Episodes averaged per gradient step.
    pub episodes_per_step: usize,
    pub strategy: SamplingStrategy,
    pub reduction: LossReduction,
    pub checkpoint_every: u64,
    /// Validation interval in steps; 0 disables validation. Ignored when the
    /// dataset has no validation split.
    pub val_every: u64,
    pub val_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 60_000,
            episodes_per_step: 16,
            strategy: SamplingStrategy::uniform(5, 1, 5),
            reduction: LossReduction::Sum,
            checkpoint_every: 1000,
            val_every: 1000,
            val_episodes: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: PathBuf,
    /// Per-step training log.
    pub metrics: PathBuf,
    /// Evaluation results are appended here when set.
    pub eval_csv: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { checkpoint: "mematch.ckpt".into(), metrics: "metrics.csv".into(), eval_csv: None }
    }
}

impl OutputConfig {
    /// Where the best-validation checkpoint is kept: `run.ckpt` → `run.best.ckpt`.
    pub fn best_checkpoint(&self) -> PathBuf {
        let stem = self.checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let ext =
            self.checkpoint.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "ckpt".into());
        self.checkpoint.with_file_name(format!("{stem}.best.{ext}"))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.eval.validate()?;
        self.train.strategy.validate()?;
        if self.data.path.is_none() {
            self.data.synthetic.validate()?;
        }
        if self.train.episodes_per_step == 0 {
            bail!("invalid configuration: train.episodes_per_step: must be at least 1");
        }
        if self.train.checkpoint_every == 0 {
            bail!("invalid configuration: train.checkpoint_every: must be at least 1");
        }
        if self.train.val_every > 0 && self.train.val_episodes == 0 {
            bail!("invalid configuration: train.val_episodes: must be at least 1 when validating");
        }
        Ok(())
    }

    pub fn session_settings(&self) -> SessionSettings {
        SessionSettings {
            adam: self.optim,
            strategy: self.train.strategy,
            episodes_per_step: self.train.episodes_per_step,
            reduction: self.train.reduction,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mematch_core::episodes::SamplingVariant;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn customized_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 99;
        cfg.data.path = Some("data/omniglot".into());
        cfg.data.rotate = true;
        cfg.model.memory_capacity = Some(7);
        cfg.train.strategy =
            SamplingStrategy { variant: SamplingVariant::MixedCk { ways: (2, 5), shots: (1, 5) }, queries: 4 };
        cfg.train.reduction = LossReduction::Mean;
        cfg.output.eval_csv = Some("eval.csv".into());
        let text = cfg.to_toml();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::parse("seed = 3\n[train]\nsteps = 10\n[train.strategy]\nkind = \"mixed_k\"\nways = 5\nshots = [1, 5]\nqueries = 5\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.strategy.max_ways_shots(), (5, 5));
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 3\n").is_err());
        assert!(RunConfig::parse("[model]\nfilter = 3\n").is_err());
    }

    #[test]
    fn empty_shot_range_names_the_field() {
        let mut cfg = RunConfig::default();
        cfg.train.strategy =
            SamplingStrategy { variant: SamplingVariant::MixedK { ways: 5, shots: (3, 2) }, queries: 5 };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("strategy.shots"), "{err}");
    }

    #[test]
    fn best_checkpoint_sits_next_to_the_main_one() {
        let out = OutputConfig { checkpoint: "runs/a/model.ckpt".into(), ..Default::default() };
        assert_eq!(out.best_checkpoint(), PathBuf::from("runs/a/model.best.ckpt"));
    }
}
