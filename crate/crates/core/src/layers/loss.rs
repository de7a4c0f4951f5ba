use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Result of [`softmax_cross_entropy`]: mean loss, row probabilities and the
/// gradient of the mean loss with respect to the logits.
#[derive(Clone, Debug)]
pub struct SoftmaxXent<T: Scalar = f32> {
    pub loss: T,
    pub probs: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Row-wise softmax (max-subtracted) with mean categorical cross-entropy.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<SoftmaxXent<T>> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Validation(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::Validation(format!(
            "label {l} at position {i} is outside [0, {k})"
        )));
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut probs = vec![T::ZERO; n * k];
    let mut grad = vec![T::ZERO; n * k];
    let mut total = 0.0f64;
    for (row, (&label, (p, g))) in logits
        .data()
        .chunks(k)
        .zip(labels.iter().zip(probs.chunks_mut(k).zip(grad.chunks_mut(k))))
    {
        let mut max = row[0];
        for &v in &row[1..] {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::ZERO;
        for (pi, &v) in p.iter_mut().zip(row) {
            *pi = (v - max).exp();
            sum += *pi;
        }
        for pi in p.iter_mut() {
            *pi = *pi / sum;
        }
        // -log p[label] = log Σ exp(v - max) - (v_label - max)
        total += sum.ln().to_f64() - (row[label] - max).to_f64();
        for (j, (gi, &pi)) in g.iter_mut().zip(p.iter()).enumerate() {
            let target = if j == label { T::ONE } else { T::ZERO };
            *gi = (pi - target) * inv_n;
        }
    }
    Ok(SoftmaxXent {
        loss: T::from_f64(total / n as f64),
        probs: Tensor::new(vec![n, k], probs)?,
        grad: Tensor::new(vec![n, k], grad)?,
    })
}

/// Index of the largest value per row; the lowest index wins exact ties.
pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, k) = t.dims2()?;
    Ok(t.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}
