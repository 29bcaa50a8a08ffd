use serde::{Deserialize, Serialize};

use super::arch::Architecture;
use crate::error::Result;

/// Parameter counts split by storage precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub full_precision: u64,
    pub binarized: u64,
}

impl ParamCounts {
    pub fn total(&self) -> u64 {
        self.full_precision + self.binarized
    }

    /// `32·total / (32·full_precision + binarized)`.
    pub fn ratio(&self) -> f64 {
        let denom = 32.0 * self.full_precision as f64 + self.binarized as f64;
        if denom == 0.0 {
            return 1.0;
        }
        32.0 * self.total() as f64 / denom
    }
}

/// The ratio under two counting conventions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    /// Conv kernels and linear weights only.
    pub weights_only: ParamCounts,
    /// Additionally linear biases and BN scale/shift, stored as floats.
    pub with_bias_and_bn: ParamCounts,
}

impl CompressionReport {
    pub fn ratio(&self) -> f64 {
        self.weights_only.ratio()
    }
}

pub fn compression_report(arch: &Architecture) -> Result<CompressionReport> {
    arch.validate()?;
    let mut w = ParamCounts {
        full_precision: 0,
        binarized: 0,
    };
    for c in arch.convs() {
        let n = c.weight_count() as u64;
        if c.binary {
            w.binarized += n;
        } else {
            w.full_precision += n;
        }
    }
    let mut bias = 0u64;
    for (i, o) in arch.linears() {
        w.full_precision += (i * o) as u64;
        bias += o as u64;
    }
    let bn: u64 = arch.batch_norms().iter().map(|&c| 2 * c as u64).sum();
    Ok(CompressionReport {
        weights_only: w,
        with_bias_and_bn: ParamCounts {
            full_precision: w.full_precision + bias + bn,
            binarized: w.binarized,
        },
    })
}

/// Weights-only ratio; see [`compression_report`] for both conventions.
pub fn compression_ratio(arch: &Architecture) -> Result<f64> {
    Ok(compression_report(arch)?.ratio())
}
