use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    Avg,
    /// Averages each channel plane down to a single value; `window`/`stride` ignored.
    GlobalAvg,
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    pub kind: PoolKind,
    pub input_shape: [usize; 4],
    pub window: usize,
    pub stride: usize,
    /// Flat input index of the winning element per output (max pooling only).
    pub argmax: Vec<usize>,
}

fn out_extent(len: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 || window > len {
        return dim_err(
            "pool2d",
            format!("window {window}, stride {stride} invalid for extent {len}"),
        );
    }
    Ok((len - window) / stride + 1)
}

pub fn pool2d<T: Real>(
    input: &Tensor<T>,
    kind: PoolKind,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolCache)> {
    let [n, c, h, w] = input.dims4("pool2d")?;
    let x = input.data();
    let mut cache = PoolCache {
        kind,
        input_shape: [n, c, h, w],
        window,
        stride,
        argmax: Vec::new(),
    };
    if kind == PoolKind::GlobalAvg {
        let plane = h * w;
        if plane == 0 {
            return dim_err("pool2d", "empty spatial plane");
        }
        let denom = T::from_usize(plane).unwrap();
        let out = Tensor::from_fn(&[n, c, 1, 1], |i| {
            x[i * plane..(i + 1) * plane].iter().copied().sum::<T>() / denom
        });
        return Ok((out, cache));
    }
    let oh = out_extent(h, window, stride)?;
    let ow = out_extent(w, window, stride)?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let denom = T::from_usize(window * window).unwrap();
    if kind == PoolKind::Max {
        cache.argmax = vec![0; n * c * oh * ow];
    }
    let o = out.data_mut();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let oi = (p * oh + oy) * ow + ox;
                match kind {
                    PoolKind::Max => {
                        let mut best = base + oy * stride * w + ox * stride;
                        for dy in 0..window {
                            for dx in 0..window {
                                let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                        o[oi] = x[best];
                        cache.argmax[oi] = best;
                    }
                    PoolKind::Avg => {
                        let mut s = T::zero();
                        for dy in 0..window {
                            for dx in 0..window {
                                s = s + x[base + (oy * stride + dy) * w + ox * stride + dx];
                            }
                        }
                        o[oi] = s / denom;
                    }
                    PoolKind::GlobalAvg => unreachable!(),
                }
            }
        }
    }
    Ok((out, cache))
}

pub fn pool2d_vjp<T: Real>(cache: &PoolCache, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = cache.input_shape;
    let mut gi = Tensor::zeros(&cache.input_shape);
    let g = grad_out.data();
    match cache.kind {
        PoolKind::GlobalAvg => {
            if grad_out.shape() != [n, c, 1, 1] {
                return dim_err("pool2d_vjp", format!("grad shape {:?}", grad_out.shape()));
            }
            let plane = h * w;
            let denom = T::from_usize(plane).unwrap();
            for (p, chunk) in gi.data_mut().chunks_exact_mut(plane).enumerate() {
                let v = g[p] / denom;
                chunk.iter_mut().for_each(|d| *d = v);
            }
        }
        PoolKind::Max => {
            if g.len() != cache.argmax.len() {
                return dim_err("pool2d_vjp", "grad does not match pooled output");
            }
            let d = gi.data_mut();
            for (&src, &v) in cache.argmax.iter().zip(g) {
                d[src] = d[src] + v;
            }
        }
        PoolKind::Avg => {
            let (win, st) = (cache.window, cache.stride);
            let oh = (h - win) / st + 1;
            let ow = (w - win) / st + 1;
            if grad_out.shape() != [n, c, oh, ow] {
                return dim_err("pool2d_vjp", format!("grad shape {:?}", grad_out.shape()));
            }
            let denom = T::from_usize(win * win).unwrap();
            let d = gi.data_mut();
            for p in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let v = g[(p * oh + oy) * ow + ox] / denom;
                        for dy in 0..win {
                            for dx in 0..win {
                                let idx = p * h * w + (oy * st + dy) * w + ox * st + dx;
                                d[idx] = d[idx] + v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gi)
}
