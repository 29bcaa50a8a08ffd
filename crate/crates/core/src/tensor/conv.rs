use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{dim_err, Result};

/// Stride/padding/kernel-size triple for square 2-D convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            kernel,
        }
    }

    /// Output extent along one spatial axis, `(in + 2p - k) / s + 1` (floor).
    pub fn output_size(&self, input: usize) -> Result<usize> {
        if self.stride == 0 || self.kernel == 0 {
            return dim_err("conv geometry", "stride and kernel size must be positive");
        }
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return dim_err(
                "conv geometry",
                format!("kernel {} larger than padded input {padded}", self.kernel),
            );
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    oh: usize,
    ow: usize,
    k: usize,
}

fn conv_dims<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<ConvDims> {
    let [n, c, h, w] = input.dims4("conv2d input")?;
    let [o, kc, kh, kw] = kernels.dims4("conv2d kernels")?;
    if kc != c {
        return dim_err(
            "conv2d",
            format!("input has {c} channels (axis 1) but kernels expect {kc} (axis 1)"),
        );
    }
    if kh != geom.kernel || kw != geom.kernel {
        return dim_err(
            "conv2d",
            format!(
                "kernel spatial size {kh}x{kw} (axes 2,3) disagrees with geometry {}",
                geom.kernel
            ),
        );
    }
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        o,
        oh: geom.output_size(h)?,
        ow: geom.output_size(w)?,
        k: geom.kernel,
    })
}

/// Unfolds one sample `[C, H, W]` into `[C*k*k, OH*OW]` columns.
fn im2col<T: Real>(x: &[T], d: &ConvDims, geom: ConvGeometry, cols: &mut [T]) {
    let (k, s, p) = (d.k, geom.stride as isize, geom.padding as isize);
    let plane = d.oh * d.ow;
    for c in 0..d.c {
        let xc = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..d.oh {
                    let iy = oy as isize * s + ky as isize - p;
                    let line = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into a `[C, H, W]` gradient buffer.
fn col2im<T: Real>(cols: &[T], d: &ConvDims, geom: ConvGeometry, gx: &mut [T]) {
    let (k, s, p) = (d.k, geom.stride as isize, geom.padding as isize);
    let plane = d.oh * d.ow;
    for c in 0..d.c {
        let gc = &mut gx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..d.oh {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut gc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip), NCHW input and OCkk kernels.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(input, kernels, geom)?;
    let ckk = d.c * d.k * d.k;
    let plane = d.oh * d.ow;
    let mut out = Tensor::zeros(&[d.n, d.o, d.oh, d.ow]);
    let mut cols = vec![T::zero(); ckk * plane];
    let in_stride = d.c * d.h * d.w;
    for n in 0..d.n {
        im2col(
            &input.data()[n * in_stride..(n + 1) * in_stride],
            &d,
            geom,
            &mut cols,
        );
        let dst = &mut out.data_mut()[n * d.o * plane..(n + 1) * d.o * plane];
        T::gemm(
            d.o,
            ckk,
            plane,
            T::one(),
            kernels.data(),
            ckk as isize,
            1,
            &cols,
            plane as isize,
            1,
            T::zero(),
            dst,
            plane as isize,
            1,
        );
    }
    Ok(out)
}

/// Gradients of `sum(grad_out * conv2d(input, kernels))` with respect to
/// the input and the kernels.
pub fn conv2d_vjp<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    geom: ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = conv_dims(input, kernels, geom)?;
    if grad_out.shape() != [d.n, d.o, d.oh, d.ow] {
        return dim_err(
            "conv2d_vjp",
            format!(
                "grad_out shape {:?} != output shape {:?}",
                grad_out.shape(),
                [d.n, d.o, d.oh, d.ow]
            ),
        );
    }
    let ckk = d.c * d.k * d.k;
    let plane = d.oh * d.ow;
    let in_stride = d.c * d.h * d.w;
    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_k = Tensor::zeros(kernels.shape());
    let mut cols = vec![T::zero(); ckk * plane];
    let mut gcols = vec![T::zero(); ckk * plane];
    for n in 0..d.n {
        let g = &grad_out.data()[n * d.o * plane..(n + 1) * d.o * plane];
        im2col(
            &input.data()[n * in_stride..(n + 1) * in_stride],
            &d,
            geom,
            &mut cols,
        );
        // grad_k += g [O x P] * cols^T [P x CKK]
        T::gemm(
            d.o,
            plane,
            ckk,
            T::one(),
            g,
            plane as isize,
            1,
            &cols,
            1,
            plane as isize,
            T::one(),
            grad_k.data_mut(),
            ckk as isize,
            1,
        );
        // gcols = K^T [CKK x O] * g [O x P]
        T::gemm(
            ckk,
            d.o,
            plane,
            T::one(),
            kernels.data(),
            1,
            ckk as isize,
            g,
            plane as isize,
            1,
            T::zero(),
            &mut gcols,
            plane as isize,
            1,
        );
        col2im(
            &gcols,
            &d,
            geom,
            &mut grad_in.data_mut()[n * in_stride..(n + 1) * in_stride],
        );
    }
    Ok((grad_in, grad_k))
}

/// Pads the two spatial axes of an NCHW tensor with a constant.
pub fn pad2d<T: Real>(input: &Tensor<T>, padding: usize, value: T) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4("pad2d")?;
    if padding == 0 {
        return Ok(input.clone());
    }
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    let mut out = Tensor::full(&[n, c, ph, pw], value);
    let src = input.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for y in 0..h {
            let s = plane * h * w + y * w;
            let t = plane * ph * pw + (y + padding) * pw + padding;
            dst[t..t + w].copy_from_slice(&src[s..s + w]);
        }
    }
    Ok(out)
}

/// Gradient of [`pad2d`]: crops the padded border away.
pub fn pad2d_vjp<T: Real>(grad_out: &Tensor<T>, padding: usize) -> Result<Tensor<T>> {
    let [n, c, ph, pw] = grad_out.dims4("pad2d_vjp")?;
    if padding == 0 {
        return Ok(grad_out.clone());
    }
    if ph < 2 * padding || pw < 2 * padding {
        return dim_err("pad2d_vjp", "gradient smaller than the padding");
    }
    let (h, w) = (ph - 2 * padding, pw - 2 * padding);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let src = grad_out.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for y in 0..h {
            let s = plane * ph * pw + (y + padding) * pw + padding;
            let t = plane * h * w + y * w;
            dst[t..t + w].copy_from_slice(&src[s..s + w]);
        }
    }
    Ok(out)
}
