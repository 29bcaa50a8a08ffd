use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{dim_err, Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnState<T = f32> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// False until the first training-mode call.
    pub initialized: bool,
}

impl<T: Real> BnState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            initialized: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BnCache<T = f32> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and biased variance (train mode), or the running values.
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub mode: BnMode,
}

fn normalize<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let [n, c, h, w] = input.dims4("batch_norm").expect("checked by caller");
    let plane = h * w;
    let eps = T::lit(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let src = &input.data()[off..off + plane];
            let xh = &mut x_hat.data_mut()[off..off + plane];
            for (d, &s) in xh.iter_mut().zip(src) {
                *d = (s - mean[ch]) * inv_std[ch];
            }
            let dst = &mut out.data_mut()[off..off + plane];
            for (d, &s) in dst.iter_mut().zip(xh.iter()) {
                *d = gamma[ch] * s + beta[ch];
            }
        }
    }
    (out, x_hat, inv_std)
}

/// Per-channel batch normalization over `[N, C, H, W]`.
///
/// Train mode normalizes with the batch mean and biased variance, then folds
/// them into the running statistics with momentum 0.1 (unbiased variance).
/// Eval mode uses the running statistics and fails if none were recorded.
pub fn batch_norm<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    state: &mut BnState<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let [n, c, h, w] = input.dims4("batch_norm")?;
    if gamma.len() != c || beta.len() != c || state.running_mean.len() != c {
        return dim_err(
            "batch_norm",
            format!(
                "{c} channels but gamma {}, beta {}, state {}",
                gamma.len(),
                beta.len(),
                state.running_mean.len()
            ),
        );
    }
    let (mean, var) = match mode {
        BnMode::Eval => {
            if !state.initialized {
                return Err(Error::UninitializedStatistics);
            }
            (state.running_mean.clone(), state.running_var.clone())
        }
        BnMode::Train => {
            let m = n * h * w;
            if m == 0 {
                return dim_err("batch_norm", "empty batch");
            }
            let count = T::from_usize(m).unwrap();
            let plane = h * w;
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    s = s + input.data()[off..off + plane].iter().copied().sum::<T>();
                }
                let mu = s / count;
                let mut sq = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    for &x in &input.data()[off..off + plane] {
                        sq = sq + (x - mu) * (x - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / count;
            }
            let mom = T::lit(BN_MOMENTUM);
            let unbias = if m > 1 {
                count / (count - T::one())
            } else {
                T::one()
            };
            for ch in 0..c {
                state.running_mean[ch] = (T::one() - mom) * state.running_mean[ch] + mom * mean[ch];
                state.running_var[ch] =
                    (T::one() - mom) * state.running_var[ch] + mom * var[ch] * unbias;
            }
            state.initialized = true;
            (mean, var)
        }
    };
    let (out, x_hat, inv_std) = normalize(input, gamma, beta, &mean, &var);
    Ok((
        out,
        BnCache {
            x_hat,
            inv_std,
            mean,
            var,
            mode,
        },
    ))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batch_norm_vjp<T: Real>(
    gamma: &[T],
    cache: &BnCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    cache.x_hat.ensure_same_shape(grad_out, "batch_norm_vjp")?;
    let [n, c, h, w] = grad_out.dims4("batch_norm_vjp")?;
    if gamma.len() != c {
        return dim_err(
            "batch_norm_vjp",
            format!("gamma length {} != {c}", gamma.len()),
        );
    }
    let plane = h * w;
    let count = T::from_usize(n * plane).unwrap();
    let g = grad_out.data();
    let xh = cache.x_hat.data();
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                gb[ch] = gb[ch] + g[i];
                gg[ch] = gg[ch] + g[i] * xh[i];
            }
        }
    }
    let mut gi = Tensor::zeros(grad_out.shape());
    let dst = gi.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = gamma[ch] * cache.inv_std[ch];
            match cache.mode {
                BnMode::Eval => {
                    for i in off..off + plane {
                        dst[i] = g[i] * scale;
                    }
                }
                BnMode::Train => {
                    let k = scale / count;
                    for i in off..off + plane {
                        dst[i] = k * (count * g[i] - gb[ch] - xh[i] * gg[ch]);
                    }
                }
            }
        }
    }
    Ok((gi, gg, gb))
}
