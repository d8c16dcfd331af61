//! The full trainable parameter set and its batchnorm running statistics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctxlearner::{LearnerParams, LearnerVars};
use crate::embednet::{final_extent, BackboneParams, BackboneVars, FactorizedConvSpec, FactorizedVars, BLOCKS};
use crate::error::{Error, Result};
use crate::memory::{MemoryProjections, ProjectionVars};
use crate::numcore::{RunningStats, Scalar, Tape, Tensor, Var};

/// Initial `beta` of the factorized block's batchnorm. With the predicted
/// vector starting at zero the block's train-mode output is exactly `beta`,
/// and a zero there would sit on the ReLU kink where no gradient passes.
pub const FACTORIZED_BETA_INIT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Filters per conv block (`F`).
    pub filters: usize,
    /// Memory key size (`D_m`).
    pub key_dim: usize,
    /// Bi-LSTM hidden size (`D_r`).
    pub hidden: usize,
    /// Predicted vector length (`D_w`).
    pub predicted: usize,
    /// Memory slots (`M`); the support-set size when unset.
    pub memory_capacity: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_height: 28,
            image_width: 28,
            filters: 64,
            key_dim: 512,
            hidden: 512,
            predicted: 64,
            memory_capacity: None,
        }
    }
}

impl ModelConfig {
    /// Dimensions of the small model used by the verification battery.
    pub fn tiny() -> Self {
        Self {
            in_channels: 1,
            image_height: 16,
            image_width: 16,
            filters: 4,
            key_dim: 8,
            hidden: 8,
            predicted: 4,
            memory_capacity: None,
        }
    }

    /// Feature size `D_z`.
    pub fn embed_dim(&self) -> usize {
        self.filters * final_extent(self.image_height) * final_extent(self.image_width)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("in_channels", self.in_channels),
            ("filters", self.filters),
            ("key_dim", self.key_dim),
            ("hidden", self.hidden),
            ("predicted", self.predicted),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{field}"), "must be at least 1"));
            }
        }
        for (field, v) in [("image_height", self.image_height), ("image_width", self.image_width)] {
            if final_extent(v) == 0 {
                return Err(Error::config(format!("model.{field}"), format!("{v} is below the minimum of 16")));
            }
        }
        if self.memory_capacity == Some(0) {
            return Err(Error::config("model.memory_capacity", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub backbone: BackboneParams<T>,
    pub factorized: FactorizedConvSpec<T>,
    pub projections: MemoryProjections<T>,
    pub learner: LearnerParams<T>,
}

/// Tape handles for every parameter tensor.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub factorized: FactorizedVars,
    pub projections: ProjectionVars,
    pub learner: LearnerVars,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = BackboneParams::init(config.in_channels, config.filters, rng);
        let mut factorized = FactorizedConvSpec::init(config.filters, config.predicted, rng);
        factorized.beta = Tensor::full(&[config.filters], T::lit(FACTORIZED_BETA_INIT));
        let projections = MemoryProjections::init(config.embed_dim(), config.key_dim, rng);
        let learner = LearnerParams::init(config.key_dim, config.hidden, config.predicted, rng);
        Ok(Self { config: config.clone(), backbone, factorized, projections, learner })
    }

    /// Every tensor with a stable name, in a fixed order shared with
    /// [`tensors_mut`](Self::tensors_mut) and [`bind`](Self::bind).
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.backbone.named(&mut out);
        self.factorized.named(&mut out);
        self.projections.named(&mut out);
        self.learner.named(&mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.backbone.tensors_mut(&mut out);
        self.factorized.tensors_mut(&mut out);
        self.projections.tensors_mut(&mut out);
        self.learner.tensors_mut(&mut out);
        out
    }

    pub fn num_tensors(&self) -> usize {
        self.named().len()
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Puts every parameter on `tape`; the flat list follows [`named`](Self::named).
    pub fn bind(&self, tape: &mut Tape<T>) -> (ModelVars, Vec<Var>) {
        let mut flat = Vec::new();
        let vars = ModelVars {
            backbone: self.backbone.bind(tape, &mut flat),
            factorized: self.factorized.bind(tape, &mut flat),
            projections: self.projections.bind(tape, &mut flat),
            learner: self.learner.bind(tape, &mut flat),
        };
        (vars, flat)
    }

    /// Precision change; shapes and names are preserved.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::init(&self.config, &mut rand::rngs::mock::StepRng::new(0, 0))
            .expect("config was validated when these parameters were built");
        for (dst, (_, src)) in out.tensors_mut().into_iter().zip(self.named()) {
            *dst = src.cast();
        }
        out
    }
}

/// Running statistics for the backbone blocks followed by the factorized
/// block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelStats<T> {
    pub layers: Vec<RunningStats<T>>,
}

impl<T: Scalar> ModelStats<T> {
    /// Identity statistics (mean 0, variance 1) so that an untrained model
    /// can be evaluated.
    pub fn new(config: &ModelConfig) -> Self {
        Self { layers: (0..=BLOCKS).map(|_| RunningStats::identity(config.filters)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> ModelStats<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect();
        ModelStats {
            layers: self
                .layers
                .iter()
                .map(|s| RunningStats::from_parts(conv(&s.mean), conv(&s.var), s.is_initialized()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn named_tensors_align_with_bind_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ModelParams::<f64>::init(&ModelConfig::tiny(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let (_, flat) = p.bind(&mut tape);
        let named = p.named();
        assert_eq!(flat.len(), named.len());
        for (v, (_, t)) in flat.iter().zip(&named) {
            assert_eq!(tape.data(*v), t.data());
        }
        let mut names: Vec<_> = named.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), named.len());
    }

    #[test]
    fn cast_round_trips_through_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::<f32>::init(&ModelConfig::tiny(), &mut rng).unwrap();
        assert_eq!(p.cast::<f64>().cast::<f32>(), p);
    }

    #[test]
    fn default_dims() {
        let c = ModelConfig::default();
        assert_eq!(c.embed_dim(), 64);
        let mini = ModelConfig { in_channels: 3, image_height: 84, image_width: 84, ..c };
        assert_eq!(mini.embed_dim(), 1600);
        let bad = ModelConfig { image_height: 12, ..ModelConfig::tiny() };
        assert!(bad.validate().unwrap_err().to_string().contains("model.image_height"));
    }
}
