use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean negative log-likelihood of `labels` under `probs`, and its gradient
/// with respect to the pre-softmax inputs: `(probs − onehot) / B`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, k) = probs.dims2("cross_entropy")?;
    if labels.len() != b {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: probs.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, n_classes: k });
        }
        loss -= probs.row(r)[y].max(f64::MIN_POSITIVE).ln();
        grad.row_mut(r)[y] -= 1.0;
    }
    let scale = 1.0 / b as f64;
    grad.data_mut().iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}
