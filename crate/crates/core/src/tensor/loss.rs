use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
///
/// Log-sum-exp is evaluated after subtracting the row maximum, in f64
/// whatever the element type.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let [n, m] = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return crate::error::dim_err(
            "softmax_cross_entropy",
            format!("{} labels for {n} rows", labels.len()),
        );
    }
    let inv_n = 1.0 / n.max(1) as f64;
    let mut grad = Tensor::zeros(&[n, m]);
    let mut loss = 0.0f64;
    let mut row64 = vec![0.0f64; m];
    for (i, (row, &y)) in logits.data().chunks_exact(m).zip(labels).enumerate() {
        if y >= m {
            return Err(Error::Index {
                what: "label",
                index: y,
                limit: m,
            });
        }
        for (d, v) in row64.iter_mut().zip(row) {
            *d = v.to_f64().unwrap_or(f64::NAN);
        }
        let max = row64.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row64.iter().map(|v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        loss += z.ln() + (max - row64[y]);
        let g = &mut grad.data_mut()[i * m..(i + 1) * m];
        for (j, (gj, &v)) in g.iter_mut().zip(&row64).enumerate() {
            let onehot = if j == y { 1.0 } else { 0.0 };
            *gj = T::lit(((v - log_z).exp() - onehot) * inv_n);
        }
    }
    Ok((T::lit(loss * inv_n), grad))
}
