//! Sign binarization, the modulation-vector scale, straight-through gradients,
//! and the bit-packed XNOR/popcount path used at inference.

mod pack;

pub use pack::{
    binary_conv2d, pack_bits, pack_input, pack_kernel_rows, xnor_popcount_dot, BitPackedTensor,
    PackedInput, PackedRows,
};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[inline]
pub fn sign<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

/// Elementwise sign with `sign(0) = +1`.
pub fn sign_binarize<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sign)
}

/// Learned per-layer vector that modulates every kernel of the layer.
///
/// In the forward pass only its mean is used, as the scale of the sign
/// pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulationVector<T = f32> {
    values: Vec<T>,
}

impl<T: Real> ModulationVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return dim_err("ModulationVector", "empty modulation vector");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("modulation vector".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Forward scale `α = mean(w)`; the sign of `α` is not constrained.
    pub fn alpha(&self) -> T {
        mean(&self.values)
    }
}

pub(crate) fn mean<T: Real>(v: &[T]) -> T {
    let mut s = T::zero();
    for &x in v {
        s = s + x;
    }
    s / T::from_usize(v.len()).unwrap()
}

fn rows_of<T: Real>(x: &Tensor<T>, k: usize, op: &'static str) -> Result<usize> {
    if k == 0 || !x.len().is_multiple_of(k) {
        return dim_err(
            op,
            format!(
                "tensor {:?} cannot be split into kernels of {k} elements",
                x.shape()
            ),
        );
    }
    Ok(x.len() / k)
}

/// `X̂ = mean(w) · sign(X)` for every kernel row of `x`; returns `(X̂, α)`.
///
/// `x` may hold a single kernel (`len == w.len()`) or a whole layer whose
/// trailing elements per output channel match `w.len()`.
pub fn binarize_kernel<T: Real>(x: &Tensor<T>, w: &ModulationVector<T>) -> Result<(Tensor<T>, T)> {
    rows_of(x, w.len(), "binarize_kernel")?;
    let alpha = w.alpha();
    Ok((x.map(|v| alpha * sign(v)), alpha))
}

/// `∂L_S/∂X = ∂L_S/∂X̂ ∘ 1[-1 ≤ w∘X ≤ 1] ∘ w`, applied kernel-wise.
pub fn kernel_ste_grad<T: Real>(
    grad_xhat: &Tensor<T>,
    x: &Tensor<T>,
    w: &ModulationVector<T>,
) -> Result<Tensor<T>> {
    grad_xhat.ensure_same_shape(x, "kernel_ste_grad")?;
    let k = w.len();
    rows_of(x, k, "kernel_ste_grad")?;
    let wv = w.values();
    let mut out = Tensor::zeros(x.shape());
    for ((o, g), xs) in out
        .data_mut()
        .chunks_exact_mut(k)
        .zip(grad_xhat.data().chunks_exact(k))
        .zip(x.data().chunks_exact(k))
    {
        for j in 0..k {
            let wx = wv[j] * xs[j];
            o[j] = if wx >= -T::one() && wx <= T::one() {
                g[j] * wv[j]
            } else {
                T::zero()
            };
        }
    }
    Ok(out)
}

/// `∂L_S/∂w = Σ_i ∂L_S/∂X̂_i ∘ 1[-1 ≤ w∘X_i ≤ 1] ∘ X_i`.
pub fn modulation_ste_grad<T: Real>(
    grad_xhat: &Tensor<T>,
    x: &Tensor<T>,
    w: &ModulationVector<T>,
) -> Result<Vec<T>> {
    grad_xhat.ensure_same_shape(x, "modulation_ste_grad")?;
    let k = w.len();
    rows_of(x, k, "modulation_ste_grad")?;
    let wv = w.values();
    let mut acc = vec![T::zero(); k];
    for (g, xs) in grad_xhat
        .data()
        .chunks_exact(k)
        .zip(x.data().chunks_exact(k))
    {
        for j in 0..k {
            let wx = wv[j] * xs[j];
            if wx >= -T::one() && wx <= T::one() {
                acc[j] = acc[j] + g[j] * xs[j];
            }
        }
    }
    Ok(acc)
}

pub fn binarize_activation<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    sign_binarize(a)
}

/// Clipped straight-through gradient: passes `grad_out` where `|a| ≤ 1`.
pub fn activation_ste_grad<T: Real>(grad_out: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip_map(a, "activation_ste_grad", |g, v| {
        if v.abs() <= T::one() {
            g
        } else {
            T::zero()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    fn w(v: &[f64]) -> ModulationVector<f64> {
        ModulationVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn sign_tie_rule() {
        assert_eq!(
            sign_binarize(&t(&[-0.3, 0.7, 0.0])).data(),
            &[-1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn binarize_kernel_examples() {
        let (xh, a) = binarize_kernel(&t(&[0.5, -0.2]), &w(&[1.0, 1.0])).unwrap();
        assert_eq!((xh.data(), a), (&[1.0, -1.0][..], 1.0));
        let (xh, a) = binarize_kernel(&t(&[0.5, -0.2]), &w(&[0.2, 0.6])).unwrap();
        assert!((a - 0.4).abs() < 1e-15);
        assert!((xh.data()[0] - 0.4).abs() < 1e-15 && (xh.data()[1] + 0.4).abs() < 1e-15);
        assert!(binarize_kernel(&t(&[0.5, -0.2, 0.1]), &w(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn kernel_ste_examples() {
        let g = kernel_ste_grad(
            &t(&[1.0, 1.0, 1.0]),
            &t(&[0.5, -3.0, 0.2]),
            &w(&[2.0, 1.0, 1.0]),
        )
        .unwrap();
        assert_eq!(g.data(), &[2.0, 0.0, 1.0]);
        // w∘X = 2 → indicator off
        let g = kernel_ste_grad(&t(&[1.0]), &t(&[2.0]), &w(&[1.0])).unwrap();
        assert_eq!(g.data(), &[0.0]);
        let g = kernel_ste_grad(&t(&[0.3, -0.8]), &t(&[0.9, -0.1]), &w(&[1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.3, -0.8]);
    }

    #[test]
    fn modulation_ste_examples() {
        let z = modulation_ste_grad(&t(&[0.0, 0.0]), &t(&[0.4, 0.2]), &w(&[1.0, 1.0])).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
        // Two kernels of two elements; second element of kernel 2 is outside the window.
        let x = Tensor::new(vec![2, 2], vec![0.5, -0.25, 0.75, 1.5]).unwrap();
        let g = Tensor::new(vec![2, 2], vec![2.0, 4.0, -1.0, 3.0]).unwrap();
        let r = modulation_ste_grad(&g, &x, &w(&[1.0, 1.0])).unwrap();
        assert_eq!(r, vec![2.0 * 0.5 + -0.75, 4.0 * -0.25]);
    }

    #[test]
    fn activation_examples() {
        let a = t(&[0.5, -2.0]);
        assert_eq!(binarize_activation(&a).data(), &[1.0, -1.0]);
        let g = activation_ste_grad(&t(&[1.0, 1.0]), &a).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0]);
    }

    #[test]
    fn alpha_is_plain_mean_of_signed_values() {
        assert_eq!(w(&[-1.0, 0.5]).alpha(), -0.25);
    }
}
