use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct XentOutput<T: Scalar> {
    /// Mean over the batch of `-ln p[label]`.
    pub loss: f64,
    pub probs: Tensor<T>,
}

/// Fused, max-shifted softmax and cross-entropy over `[N x C]` logits.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<XentOutput<T>> {
    let (n, c) = logits.dims2("softmax_xent")?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "softmax_xent labels",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let mut probs = Vec::with_capacity(n * c);
    let mut total = 0.0f64;
    for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
        if label >= c {
            return Err(Error::LabelOutOfRange { label, num_classes: c });
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total += sum.ln() - (row[label].as_f64() - max);
        probs.extend(exps.iter().map(|e| T::from_f64_lossy(e / sum)));
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            layer: "softmax_xent".into(),
        });
    }
    Ok(XentOutput {
        loss,
        probs: Tensor::from_vec(&[n, c], probs)?,
    })
}

/// `(probs - onehot) / N`.
pub fn softmax_xent_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (n, c) = probs.dims2("softmax_xent backward")?;
    let inv_n = 1.0 / n as f64;
    let mut grad = Vec::with_capacity(n * c);
    for (row, &label) in probs.data().chunks_exact(c).zip(labels) {
        if label >= c {
            return Err(Error::LabelOutOfRange { label, num_classes: c });
        }
        for (j, p) in row.iter().enumerate() {
            let target = if j == label { 1.0 } else { 0.0 };
            grad.push(T::from_f64_lossy((p.as_f64() - target) * inv_n));
        }
    }
    Tensor::from_vec(&[n, c], grad)
}
