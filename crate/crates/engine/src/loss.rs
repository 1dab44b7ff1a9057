use crate::error::{EngineError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Lower clipping bound applied to the true-class probability.
pub const PROB_FLOOR: f64 = 1e-7;

/// Mean categorical cross-entropy of softmax outputs against class labels.
///
/// Returns the loss and its gradient with respect to the pre-softmax logits,
/// `(probs - one_hot) / batch`, for use with [`crate::Network::backward_logits`].
pub fn cross_entropy<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let n = probs.batch_size();
    let classes = probs.sample_len();
    if labels.len() != n {
        return Err(EngineError::LabelCount {
            expected: n,
            actual: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(EngineError::LabelOutOfRange { label, classes });
    }
    let scale = T::from_f64(1.0 / n as f64);
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (row, &label) in grad.data_mut().chunks_mut(classes).zip(labels) {
        let p = row[label].as_f64().clamp(PROB_FLOOR, 1.0);
        loss -= p.ln();
        row[label] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Ok((loss / n as f64, grad))
}
