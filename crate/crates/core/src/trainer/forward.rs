use crate::ctxlearner::predict_params;
use crate::embednet::{embed_query, embed_raw, StatsAccess};
use crate::episodes::{Episode, LabelledImage};
use crate::error::{Error, Result};
use crate::memory::{contextual_embed_support, encode_support, Memory};
use crate::model::{ModelConfig, ModelParams, ModelStats, ModelVars};
use crate::numcore::{Scalar, Tape, Tensor, Var};

/// Intermediate values of one episode's forward pass.
#[derive(Debug, Clone)]
pub struct EpisodeGraph {
    /// `[Q, N]` matching scores `f(x̂_j)ᵀ g(x_n)`.
    pub logits: Var,
    /// `[N, D_z]` contextual support embeddings.
    pub support: Var,
    /// `[Q, D_z]` contextual query embeddings.
    pub query: Var,
    /// Predicted vector for the factorized layer.
    pub predicted: Var,
    pub memory: Memory,
}

/// Stacks episode images into a `[B, C, H, W]` tensor.
pub fn image_batch<T: Scalar>(items: &[LabelledImage], config: &ModelConfig) -> Result<Tensor<T>> {
    let expect = (config.in_channels, config.image_height, config.image_width);
    let mut data = Vec::with_capacity(items.len() * expect.0 * expect.1 * expect.2);
    for it in items {
        let s = it.image.spec;
        if (s.channels, s.height, s.width) != expect {
            return Err(Error::shape(
                "episode",
                format!(
                    "image is {}x{}x{}, model expects {}x{}x{}",
                    s.channels, s.height, s.width, expect.0, expect.1, expect.2
                ),
            ));
        }
        data.extend(it.image.data.iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::new(vec![items.len(), expect.0, expect.1, expect.2], data)
}

/// Builds memory from the support set, embeds support and queries, and
/// scores every query against every support sample.
pub fn episode_graph<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    vars: &ModelVars,
    episode: &Episode,
    stats: &mut StatsAccess<'_, T>,
) -> Result<EpisodeGraph> {
    if episode.support.is_empty() || episode.query.is_empty() {
        return Err(Error::Sampling("episode needs support and query items".into()));
    }
    let support_images = tape.constant(image_batch(&episode.support, config)?);
    let query_images = tape.constant(image_batch(&episode.query, config)?);

    let z = embed_raw(tape, support_images, &vars.backbone, stats)?;
    let rows = (0..episode.support.len()).map(|n| tape.row(z, n)).collect::<Result<Vec<_>>>()?;
    let labels = episode.support_labels();
    let capacity = config.memory_capacity.unwrap_or(rows.len());
    let memory = encode_support(tape, &rows, &labels, &episode.write_order, vars.projections.t_z, capacity)?;

    let g = rows
        .iter()
        .map(|&z_n| contextual_embed_support(tape, z_n, &memory, &vars.projections))
        .collect::<Result<Vec<_>>>()?;
    let support = tape.stack(&g)?;

    let predicted = predict_params(tape, &memory, &vars.learner)?;
    let query = embed_query(tape, query_images, &vars.backbone, &vars.factorized, predicted, stats)?;
    let support_t = tape.transpose(support)?;
    let logits = tape.matmul(query, support_t)?;
    Ok(EpisodeGraph { logits, support, query, predicted, memory })
}

/// Eval-mode logits `[Q, N]` of one episode.
pub fn episode_logits<T: Scalar>(
    params: &ModelParams<T>,
    stats: &ModelStats<T>,
    episode: &Episode,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (vars, _) = params.bind(&mut tape);
    let graph = episode_graph(&mut tape, &params.config, &vars, episode, &mut StatsAccess::Eval(&stats.layers))?;
    Ok(tape.value(graph.logits).clone())
}
