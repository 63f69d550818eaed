use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Result of the fused softmax + categorical cross-entropy.
#[derive(Clone, Debug)]
pub struct XentOutput<T = f32> {
    /// Mean over the batch of `-ln p[label]`.
    pub loss: f64,
    pub probs: Tensor<T>,
    /// Gradient of `loss` w.r.t. the logits, `(probs - onehot) / n`.
    pub dlogits: Tensor<T>,
}

/// Row-wise softmax, max-subtracted for stability.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = logits.dims2()?;
    let mut probs = logits.clone();
    for row in probs.data_mut().chunks_mut(k) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(probs)
}

pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<XentOutput<T>> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Param(format!(
            "label {bad} out of range [0, {}]",
            k - 1
        )));
    }
    let probs = softmax(logits)?;
    let mut loss = 0.0f64;
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row
            .iter()
            .fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64().unwrap_or(f64::NAN)));
        let lse = max
            + row
                .iter()
                .map(|v| (v.to_f64().unwrap_or(f64::NAN) - max).exp())
                .sum::<f64>()
                .ln();
        loss += lse - row[label].to_f64().unwrap_or(f64::NAN);
    }
    loss /= n as f64;

    let inv_n = T::of(1.0 / n as f64);
    let mut dlogits = probs.clone();
    for (row, &label) in dlogits.data_mut().chunks_mut(k).zip(labels) {
        row[label] = row[label] - T::one();
        for v in row.iter_mut() {
            *v = *v * inv_n;
        }
    }
    Ok(XentOutput {
        loss,
        probs,
        dlogits,
    })
}
