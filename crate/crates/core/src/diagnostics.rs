//! Kernel-weight histograms and per-layer distribution summaries.

use serde::{Deserialize, Serialize};

use crate::bayes::quantization_error;
use crate::error::{Error, Result};
use crate::model::Params;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub left: f64,
    pub right: f64,
    pub count: u64,
}

/// Equal-width histogram over `[min, max]`; the last bin includes `max`.
pub fn histogram(values: &[f32], bins: usize) -> Result<Vec<Bin>> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("histogram input".into()));
    }
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v as f64), b.max(v as f64))
        });
    if values.is_empty() {
        (lo, hi) = (0.0, 1.0);
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let i = (((v as f64 - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| Bin {
            left: lo + i as f64 * width,
            right: if i + 1 == bins {
                hi
            } else {
                lo + (i + 1) as f64 * width
            },
            count,
        })
        .collect())
}

pub fn histogram_csv(bins: &[Bin]) -> String {
    let mut s = String::from("bin_left,bin_right,count\n");
    for b in bins {
        s.push_str(&format!("{},{},{}\n", b.left, b.right, b.count));
    }
    s
}

/// Fraction of weights whose magnitude lies in `[0.5|μ_i|, 1.5|μ_i|]`,
/// i.e. within half a mode of `+μ_i` or `−μ_i`, where `i` is the weight's
/// kernel.
pub fn bimodality_score(kernels: &[f32], mu: &[f32]) -> Result<f64> {
    if mu.is_empty() || !kernels.len().is_multiple_of(mu.len()) {
        return Err(Error::Dimension {
            op: "bimodality_score",
            detail: format!("{} weights for {} kernels", kernels.len(), mu.len()),
        });
    }
    let k = kernels.len() / mu.len();
    let mut hits = 0usize;
    for (xs, &m) in kernels.chunks_exact(k.max(1)).zip(mu) {
        let m = m.abs();
        hits += xs
            .iter()
            .filter(|x| (0.5 * m..=1.5 * m).contains(&x.abs()))
            .count();
    }
    Ok(hits as f64 / kernels.len().max(1) as f64)
}

/// Distribution summary of one binary layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    /// Conv slot in depth-first order.
    pub conv: usize,
    pub params: usize,
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
    pub alpha: f32,
    pub quant_error: f64,
    pub bimodality: f64,
}

pub fn layer_summaries(params: &Params<f32>) -> Result<Vec<LayerSummary>> {
    let mut out = Vec::new();
    for (slot, c) in params.convs.iter().enumerate() {
        if let Some(b) = &c.binary {
            let k = b.modulation.len();
            let q: f64 = c
                .kernels
                .data()
                .chunks_exact(k)
                .map(|xs| quantization_error(xs, b.modulation.values()) as f64)
                .sum();
            out.push(LayerSummary {
                conv: slot,
                params: c.kernels.len(),
                mu: b.prior.mu.clone(),
                sigma: b.prior.sigma.clone(),
                alpha: b.modulation.alpha(),
                quant_error: q,
                bimodality: bimodality_score(c.kernels.data(), &b.prior.mu)?,
            });
        }
    }
    Ok(out)
}
