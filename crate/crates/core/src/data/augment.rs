use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Tensor;

/// Zero padding on each side before the random crop.
pub const CIFAR_PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augment {
    None,
    /// Zero-pad by 4, random crop back to size, horizontal flip with p = 0.5.
    Cifar,
}

/// Crops `image` (`[C, H, W]`) at offset `(dy, dx)` of its zero-padded
/// version, then optionally mirrors it left-right.
///
/// `(pad, pad)` without a flip reproduces the input.
pub fn crop_flip(
    image: &[f32],
    shape: [usize; 3],
    pad: usize,
    dy: usize,
    dx: usize,
    flip: bool,
) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let cx = if flip { w - 1 - x } else { x };
                let sx = (cx + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Applies `policy` to every image of `batch` (`[N, C, H, W]`). Draws
/// `dy`, `dx`, then the flip, per sample in order.
pub fn augment<R: Rng>(batch: &Tensor<f32>, policy: Augment, rng: &mut R) -> Result<Tensor<f32>> {
    let [n, c, h, w] = batch.dims4("augment")?;
    if policy == Augment::None {
        return Ok(batch.clone());
    }
    let per = c * h * w;
    let mut data = Vec::with_capacity(batch.len());
    for i in 0..n {
        let dy = rng.gen_range(0..=2 * CIFAR_PAD);
        let dx = rng.gen_range(0..=2 * CIFAR_PAD);
        let flip = rng.gen_bool(0.5);
        data.extend(crop_flip(
            &batch.data()[i * per..(i + 1) * per],
            [c, h, w],
            CIFAR_PAD,
            dy,
            dx,
            flip,
        ));
    }
    Tensor::new(batch.shape().to_vec(), data)
}
