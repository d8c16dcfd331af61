use super::forward::episode_graph;
use super::loss::{loss_weights, LossReduction};
use super::optim::{AdamConfig, OptimState};
use crate::embednet::StatsAccess;
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelStats};
use crate::numcore::{Scalar, Tape};

/// Loss of one episode in train mode and its gradient for every parameter
/// tensor (in [`ModelParams::named`] order), scaled by `scale`.
pub fn loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    stats: &mut ModelStats<T>,
    episode: &Episode,
    reduction: LossReduction,
    scale: T,
) -> Result<(T, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let (vars, flat) = params.bind(&mut tape);
    let graph = episode_graph(&mut tape, &params.config, &vars, episode, &mut StatsAccess::Train(&mut stats.layers))?;
    let w = loss_weights::<T>(&episode.support_labels(), &episode.query_labels(), reduction)?;
    let loss = tape.matching_loss(graph.logits, &w)?;
    let loss = tape.scale(loss, scale)?;
    tape.backward(loss)?;
    let grads = flat
        .iter()
        .zip(params.named())
        .map(|(&v, (_, t))| tape.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.numel()]))
        .collect();
    Ok((tape.data(loss)[0], grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Mean loss over the step's episodes.
    pub loss: f64,
    pub lr: f64,
}

/// One Adam update on the mean loss of `episodes`.
///
/// A non-finite loss or gradient aborts with [`Error::NanLoss`] before any
/// parameter changes.
pub fn train_step<T: Scalar>(
    params: &mut ModelParams<T>,
    stats: &mut ModelStats<T>,
    opt: &mut OptimState<T>,
    adam: &AdamConfig,
    episodes: &[Episode],
    reduction: LossReduction,
) -> Result<StepOutcome> {
    if episodes.is_empty() {
        return Err(Error::Sampling("a training step needs at least one episode".into()));
    }
    let step = opt.step;
    let nan = |e: Error| match e {
        Error::NonFinite { .. } => Error::NanLoss { step },
        other => other,
    };
    let scale = T::lit(1.0 / episodes.len() as f64);
    let mut total = T::zero();
    let mut acc: Option<Vec<Vec<T>>> = None;
    for ep in episodes {
        let (loss, grads) = loss_and_grads(params, stats, ep, reduction, scale).map_err(nan)?;
        total += loss;
        match &mut acc {
            None => acc = Some(grads),
            Some(a) => {
                for (dst, src) in a.iter_mut().zip(grads) {
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
    }
    let grads = acc.expect("episodes is non-empty");
    if !total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NanLoss { step });
    }
    let lr = opt.update(adam, &mut params.tensors_mut(), &grads)?;
    Ok(StepOutcome { loss: total.as_f64(), lr })
}
