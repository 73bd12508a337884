//! Cross-entropy over softmax outputs.

use patchgrid_core::{Scalar, Tensor};

use crate::error::{NnError, Result};

pub const PROBABILITY_FLOOR: f64 = 1e-12;

fn rows<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, c) = match *probs.shape() {
        [n, c] => (n, c),
        _ => return Err(NnError::Shape(format!("probabilities must be (N, C), got {:?}", probs.shape()))),
    };
    if labels.len() != n {
        return Err(NnError::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(NnError::Label { label, classes: c });
    }
    Ok((n, c))
}

/// Mean of `-ln p[label]` over the batch with `p` clamped to `[1e-12, 1]`.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (n, c) = rows(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs.data()[i * c + l].as_f64().clamp(PROBABILITY_FLOOR, 1.0).ln())
        .sum();
    Ok(total / n as f64)
}

/// `d loss / d probabilities` for [`cross_entropy`]: `-1 / (N p[label])` on
/// the label entry, zero elsewhere (and zero where the clamp is active).
pub fn cross_entropy_grad<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (n, c) = rows(probs, labels)?;
    let mut g = Tensor::zeros(probs.shape());
    for (i, &l) in labels.iter().enumerate() {
        let p = probs.data()[i * c + l].as_f64();
        if p > PROBABILITY_FLOOR {
            g.data_mut()[i * c + l] = T::of_f64(-1.0 / (n as f64 * p));
        }
    }
    Ok(g)
}

/// Fused softmax + cross-entropy gradient w.r.t. the logits:
/// `(probabilities - one_hot) / N`.
pub fn softmax_cross_entropy_grad<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (n, c) = rows(probs, labels)?;
    let inv = T::of_f64(1.0 / n as f64);
    let mut g = probs.map(|p| p * inv);
    for (i, &l) in labels.iter().enumerate() {
        g.data_mut()[i * c + l] -= inv;
    }
    Ok(g)
}
