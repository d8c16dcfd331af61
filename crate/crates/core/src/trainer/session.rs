use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::eval::Model;
use super::loss::LossReduction;
use super::optim::{AdamConfig, OptimState};
use super::step::{train_step, StepOutcome};
use crate::episodes::{sample_by_strategy, Dataset, SamplingStrategy};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, ModelStats};
use crate::numcore::Scalar;
use crate::rng::{substream, RngState};

/// Knobs of the training loop that are not model dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionSettings {
    pub adam: AdamConfig,
    pub strategy: SamplingStrategy,
    pub episodes_per_step: usize,
    pub reduction: LossReduction,
}

/// Mutable training state: parameters, running stats, optimizer and the
/// episode stream.
#[derive(Debug, Clone)]
pub struct TrainSession<T> {
    pub params: ModelParams<T>,
    pub stats: ModelStats<T>,
    pub opt: OptimState<T>,
    pub settings: SessionSettings,
    episodes: ChaCha8Rng,
}

impl<T: Scalar> TrainSession<T> {
    /// Fresh model initialized from the `init` sub-stream of `seed`.
    pub fn new(config: &ModelConfig, settings: SessionSettings, seed: u64) -> Result<Self> {
        settings.adam.validate()?;
        settings.strategy.validate()?;
        if settings.episodes_per_step == 0 {
            return Err(Error::config("optim.episodes_per_step", "must be at least 1"));
        }
        let params = ModelParams::init(config, &mut substream(seed, "init", 0))?;
        let stats = ModelStats::new(config);
        let opt = OptimState::new(params.named().into_iter().map(|(_, t)| t));
        Ok(Self { params, stats, opt, settings, episodes: substream(seed, "episodes", 0) })
    }

    pub fn resume(ck: Checkpoint<T>, settings: SessionSettings) -> Result<Self> {
        settings.adam.validate()?;
        settings.strategy.validate()?;
        Ok(Self { params: ck.params, stats: ck.stats, opt: ck.opt, settings, episodes: ck.rng.restore() })
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// Samples `episodes_per_step` episodes and applies one update.
    pub fn advance(&mut self, train: &Dataset) -> Result<StepOutcome> {
        let episodes = (0..self.settings.episodes_per_step)
            .map(|_| sample_by_strategy(train, &self.settings.strategy, &mut self.episodes))
            .collect::<Result<Vec<_>>>()?;
        train_step(
            &mut self.params,
            &mut self.stats,
            &mut self.opt,
            &self.settings.adam,
            &episodes,
            self.settings.reduction,
        )
    }

    pub fn checkpoint(&self, meta: impl Into<String>) -> Checkpoint<T> {
        Checkpoint {
            params: self.params.clone(),
            stats: self.stats.clone(),
            opt: self.opt.clone(),
            rng: RngState::capture(&self.episodes),
            meta: meta.into(),
        }
    }

    pub fn model(&self) -> Model<T> {
        Model { params: self.params.clone(), stats: self.stats.clone() }
    }
}
