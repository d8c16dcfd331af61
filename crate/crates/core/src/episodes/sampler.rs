use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Image};
use crate::error::{Error, Result};

/// One support or query item.
#[derive(Debug, Clone)]
pub struct LabelledImage {
    pub image: Arc<Image>,
    /// Episode-local label in `0..ways`.
    pub label: usize,
    /// `(class index, image index)` in the source dataset.
    pub source: (usize, usize),
}

/// A C-way k-shot task: `ways·shots` support items and `ways·queries`
/// query items, both grouped by label in ascending order.
#[derive(Debug, Clone)]
pub struct Episode {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub support: Vec<LabelledImage>,
    pub query: Vec<LabelledImage>,
    /// Order in which support items are written to memory (a permutation
    /// of support indices).
    pub write_order: Vec<usize>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|s| s.label).collect()
    }

    /// Checks label ranges, per-class counts, disjointness and the write order.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Sampling(msg));
        if self.support.len() != self.ways * self.shots || self.query.len() != self.ways * self.queries {
            return bad(format!(
                "expected {}+{} items, got {}+{}",
                self.ways * self.shots,
                self.ways * self.queries,
                self.support.len(),
                self.query.len()
            ));
        }
        let mut support_counts = vec![0; self.ways];
        let mut query_counts = vec![0; self.ways];
        for (items, counts) in [(&self.support, &mut support_counts), (&self.query, &mut query_counts)] {
            for it in items.iter() {
                if it.label >= self.ways {
                    return Err(Error::Label { label: it.label, ways: self.ways });
                }
                counts[it.label] += 1;
            }
        }
        if support_counts.iter().any(|&c| c != self.shots) || query_counts.iter().any(|&c| c != self.queries) {
            return bad(format!("unbalanced classes: support {support_counts:?}, query {query_counts:?}"));
        }
        for s in &self.support {
            if self.query.iter().any(|q| q.source == s.source) {
                return bad(format!("image {:?} is both support and query", s.source));
            }
        }
        let mut order = self.write_order.clone();
        order.sort_unstable();
        if order != (0..self.support.len()).collect::<Vec<_>>() {
            return bad("write order is not a permutation of the support set".into());
        }
        Ok(())
    }
}

/// Draws `ways` classes without replacement and `shots + queries` distinct
/// images per class; the first `shots` go to the support set. Labels follow
/// the sampled class order.
pub fn sample_episode<R: Rng + ?Sized>(
    ds: &Dataset,
    ways: usize,
    shots: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    if ways == 0 || shots == 0 {
        return Err(Error::Sampling(format!("need at least one way and one shot, got {ways}-way {shots}-shot")));
    }
    if ds.num_classes() < ways {
        return Err(Error::Sampling(format!("{ways}-way episode from a split with {} classes", ds.num_classes())));
    }
    let classes = index::sample(rng, ds.num_classes(), ways).into_vec();
    let mut support = Vec::with_capacity(ways * shots);
    let mut query = Vec::with_capacity(ways * queries);
    for (label, &ci) in classes.iter().enumerate() {
        let class = &ds.classes[ci];
        if class.images.len() < shots + queries {
            return Err(Error::Sampling(format!(
                "class {} has {} images, episode needs {}",
                class.name,
                class.images.len(),
                shots + queries
            )));
        }
        let picks = index::sample(rng, class.images.len(), shots + queries).into_vec();
        for (j, &ii) in picks.iter().enumerate() {
            let item = LabelledImage { image: Arc::clone(&class.images[ii]), label, source: (ci, ii) };
            if j < shots {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    let mut write_order: Vec<usize> = (0..support.len()).collect();
    write_order.shuffle(rng);
    Ok(Episode { ways, shots, queries, support, query, write_order })
}

/// How `(C, k)` is chosen for each training episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplingVariant {
    /// Fixed C-way k-shot.
    Uniform { ways: usize, shots: usize },
    /// Fixed C, k uniform over an inclusive range.
    MixedK { ways: usize, shots: (usize, usize) },
    /// C and k drawn independently and uniformly from inclusive ranges.
    MixedCk { ways: (usize, usize), shots: (usize, usize) },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingStrategy {
    #[serde(flatten)]
    pub variant: SamplingVariant,
    /// Query images per class.
    pub queries: usize,
}

impl SamplingStrategy {
    pub fn uniform(ways: usize, shots: usize, queries: usize) -> Self {
        Self { variant: SamplingVariant::Uniform { ways, shots }, queries }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("strategy.{field}"), "must be at least 1"))
            } else {
                Ok(())
            }
        };
        let range = |field: &str, (lo, hi): (usize, usize)| {
            if lo == 0 || lo > hi {
                Err(Error::config(format!("strategy.{field}"), format!("range [{lo}, {hi}] is empty or starts at 0")))
            } else {
                Ok(())
            }
        };
        positive("queries", self.queries)?;
        match self.variant {
            SamplingVariant::Uniform { ways, shots } => {
                positive("ways", ways)?;
                positive("shots", shots)
            }
            SamplingVariant::MixedK { ways, shots } => {
                positive("ways", ways)?;
                range("shots", shots)
            }
            SamplingVariant::MixedCk { ways, shots } => {
                range("ways", ways)?;
                range("shots", shots)
            }
        }
    }

    /// Largest `(C, k)` the strategy can draw.
    pub fn max_ways_shots(&self) -> (usize, usize) {
        match self.variant {
            SamplingVariant::Uniform { ways, shots } => (ways, shots),
            SamplingVariant::MixedK { ways, shots } => (ways, shots.1),
            SamplingVariant::MixedCk { ways, shots } => (ways.1, shots.1),
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        match self.variant {
            SamplingVariant::Uniform { ways, shots } => (ways, shots),
            SamplingVariant::MixedK { ways, shots } => (ways, rng.gen_range(shots.0..=shots.1)),
            SamplingVariant::MixedCk { ways, shots } => {
                let c = rng.gen_range(ways.0..=ways.1);
                (c, rng.gen_range(shots.0..=shots.1))
            }
        }
    }
}

pub fn sample_by_strategy<R: Rng + ?Sized>(ds: &Dataset, strategy: &SamplingStrategy, rng: &mut R) -> Result<Episode> {
    let (ways, shots) = strategy.draw(rng);
    sample_episode(ds, ways, shots, strategy.queries, rng)
}
