use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::episode_logits;
use super::loss::{accuracy, Prediction};
use crate::episodes::{sample_episode, Dataset, Episode};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelStats};
use crate::numcore::Scalar;
use crate::rng::substream;

/// Anything that scores an episode's queries against its support set.
pub trait Matcher: Sync {
    /// Row-major `[Q, N]` logits.
    fn logits(&self, episode: &Episode) -> Result<Vec<f64>>;
}

/// A model ready for eval-mode inference.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub params: ModelParams<T>,
    pub stats: ModelStats<T>,
}

impl<T: Scalar> Matcher for Model<T> {
    fn logits(&self, episode: &Episode) -> Result<Vec<f64>> {
        let t = episode_logits(&self.params, &self.stats, episode)?;
        Ok(t.data().iter().map(|v| v.as_f64()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub ways: usize,
    pub shots: usize,
    pub episodes: usize,
    /// Query images per class.
    pub queries: usize,
    pub prediction: Prediction,
    /// Worker threads; 0 uses rayon's default.
    pub threads: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { ways: 5, shots: 1, episodes: 500, queries: 15, prediction: Prediction::Nearest, threads: 1 }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in
            [("ways", self.ways), ("shots", self.shots), ("episodes", self.episodes), ("queries", self.queries)]
        {
            if v == 0 {
                return Err(Error::config(format!("eval.{field}"), "must be at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ways: usize,
    pub shots: usize,
    pub episodes: usize,
    pub queries_per_class: usize,
    /// Per-episode accuracy, in episode order.
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub wall_time: Duration,
}

impl EvalReport {
    /// `mean ± ci95` in percent with two decimals.
    pub fn summary(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean_accuracy, 100.0 * self.ci95)
    }
}

/// Mean and `1.96 · s / √n` with `s` the sample standard deviation.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Episode `index` of an evaluation run, drawn from its own sub-stream so
/// that results do not depend on scheduling.
pub fn eval_episode(ds: &Dataset, settings: &EvalSettings, seed: u64, index: usize) -> Result<Episode> {
    let mut rng = substream(seed, "eval", index as u64);
    sample_episode(ds, settings.ways, settings.shots, settings.queries, &mut rng)
}

pub fn evaluate<M: Matcher>(matcher: &M, ds: &Dataset, settings: &EvalSettings, seed: u64) -> Result<EvalReport> {
    settings.validate()?;
    let start = Instant::now();
    let run = |i: usize| -> Result<f64> {
        let ep = eval_episode(ds, settings, seed, i)?;
        let logits = matcher.logits(&ep)?;
        if logits.len() != ep.query.len() * ep.support.len() {
            return Err(Error::shape(
                "evaluate",
                format!("{} logits for a {}x{} episode", logits.len(), ep.query.len(), ep.support.len()),
            ));
        }
        Ok(accuracy(&logits, &ep.support_labels(), &ep.query_labels(), settings.prediction))
    };
    let accuracies: Vec<f64> = if settings.threads == 1 {
        (0..settings.episodes).map(run).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(settings.threads)
            .build()
            .map_err(|e| Error::config("threads", e.to_string()))?;
        pool.install(|| (0..settings.episodes).into_par_iter().map(run).collect::<Result<_>>())?
    };
    let (mean_accuracy, ci95) = mean_ci95(&accuracies);
    Ok(EvalReport {
        ways: settings.ways,
        shots: settings.shots,
        episodes: settings.episodes,
        queries_per_class: settings.queries,
        accuracies,
        mean_accuracy,
        ci95,
        wall_time: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_uses_sample_deviation() {
        let (m, ci) = mean_ci95(&[0.0, 1.0]);
        assert_eq!(m, 0.5);
        assert!((ci - 1.96 * 0.5f64.sqrt() / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_ci95(&[0.5; 10]), (0.5, 0.0));
    }

    #[test]
    fn quadrupling_episodes_halves_the_interval() {
        let base: Vec<f64> = (0..100).map(|i| (i % 7) as f64 / 6.0).collect();
        let big: Vec<f64> = base.iter().cycle().take(400).copied().collect();
        let ratio = mean_ci95(&big).1 / mean_ci95(&base).1;
        assert!((ratio - 0.5).abs() < 0.05, "{ratio}");
    }
}
