use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{log_sum_exp, Scalar};

/// How a query's matching support samples contribute to the loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// One log-softmax term per matching support sample.
    #[default]
    Sum,
    /// Those terms averaged over the matching samples.
    Mean,
}

/// How a query row of logits is turned into a label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// Label of the single highest-scoring support sample.
    #[default]
    Nearest,
    /// Label whose support samples have the largest summed score.
    ClassSum,
}

/// Row-major `[Q, N]` coefficients of the log-softmax terms.
pub fn loss_weights<T: Scalar>(
    support_labels: &[usize],
    query_labels: &[usize],
    reduction: LossReduction,
) -> Result<Vec<T>> {
    let mut w = Vec::with_capacity(query_labels.len() * support_labels.len());
    for &y in query_labels {
        let matches = support_labels.iter().filter(|&&l| l == y).count();
        if matches == 0 {
            return Err(Error::Label { label: y, ways: support_labels.iter().max().map_or(0, |m| m + 1) });
        }
        let coeff = match reduction {
            LossReduction::Sum => T::one(),
            LossReduction::Mean => T::lit(1.0 / matches as f64),
        };
        w.extend(support_labels.iter().map(|&l| if l == y { coeff } else { T::zero() }));
    }
    Ok(w)
}

/// `−Σ_j Σ_{n: y_n = ŷ_j} log softmax_j(n)` on plain values.
pub fn episode_loss<T: Scalar>(
    logits: &[T],
    support_labels: &[usize],
    query_labels: &[usize],
    reduction: LossReduction,
) -> Result<T> {
    let n = support_labels.len();
    if n == 0 || logits.len() != n * query_labels.len() {
        return Err(Error::shape(
            "episode_loss",
            format!("{} logits for {} queries x {n} support", logits.len(), query_labels.len()),
        ));
    }
    let w = loss_weights::<T>(support_labels, query_labels, reduction)?;
    let mut loss = T::zero();
    for (row, wr) in logits.chunks(n).zip(w.chunks(n)) {
        let lse = log_sum_exp(row);
        for (&l, &c) in row.iter().zip(wr) {
            if c != T::zero() {
                loss -= c * (l - lse);
            }
        }
    }
    Ok(loss)
}

pub fn predict_label<T: Scalar>(row: &[T], support_labels: &[usize], mode: Prediction) -> usize {
    assert!(!row.is_empty() && row.len() == support_labels.len(), "row and labels must be non-empty and aligned");
    match mode {
        Prediction::Nearest => {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            support_labels[best]
        }
        Prediction::ClassSum => {
            let ways = support_labels.iter().max().map_or(0, |m| m + 1);
            let mut sums = vec![T::zero(); ways];
            let mut seen = vec![false; ways];
            for (&v, &l) in row.iter().zip(support_labels) {
                sums[l] += v;
                seen[l] = true;
            }
            let mut best: Option<usize> = None;
            for l in (0..ways).filter(|&l| seen[l]) {
                if best.is_none_or(|b| sums[l] > sums[b]) {
                    best = Some(l);
                }
            }
            best.expect("at least one label is present")
        }
    }
}

/// Fraction of query rows whose predicted label is correct.
pub fn accuracy<T: Scalar>(logits: &[T], support_labels: &[usize], query_labels: &[usize], mode: Prediction) -> f64 {
    let n = support_labels.len();
    let correct =
        logits.chunks(n).zip(query_labels).filter(|(row, &y)| predict_label(row, support_labels, mode) == y).count();
    correct as f64 / query_labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_support_sample_gives_zero_loss() {
        assert_eq!(episode_loss(&[3.7f64], &[0], &[0], LossReduction::Sum).unwrap(), 0.0);
    }

    #[test]
    fn uniform_two_way_is_log_two_per_query() {
        let l = episode_loss(&[0.5f64, 0.5, 0.5, 0.5], &[0, 1], &[0, 1], LossReduction::Sum).unwrap();
        assert_abs_diff_eq!(l, 2.0 * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(2f64.ln(), 0.6931, epsilon = 1e-4);
    }

    #[test]
    fn mean_reduction_divides_by_shots() {
        let logits = [0.3f64, -0.2, 1.0, 0.1];
        let sum = episode_loss(&logits, &[0, 0, 1, 1], &[1], LossReduction::Sum).unwrap();
        let mean = episode_loss(&logits, &[0, 0, 1, 1], &[1], LossReduction::Mean).unwrap();
        assert_abs_diff_eq!(sum, 2.0 * mean, epsilon = 1e-12);
    }

    #[test]
    fn query_label_without_support_is_rejected() {
        assert!(episode_loss(&[0.0f64, 0.0], &[0, 1], &[2], LossReduction::Sum).is_err());
    }

    #[test]
    fn prediction_examples() {
        assert_eq!(predict_label(&[0.1f64, 0.9, 0.2], &[0, 1, 0], Prediction::Nearest), 1);
        assert_eq!(predict_label(&[0.5f64, 0.5, 0.5], &[2, 1, 0], Prediction::Nearest), 2);
        // 0.6 + 0.6 beats 0.9 when summed per class
        assert_eq!(predict_label(&[0.6f64, 0.9, 0.6], &[0, 1, 0], Prediction::ClassSum), 0);
        assert_eq!(predict_label(&[0.6f64, 0.9, 0.6], &[0, 1, 0], Prediction::Nearest), 1);
    }
}
