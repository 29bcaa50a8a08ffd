//! Dense row-major tensors and the forward/VJP kernels used by the backbones.
//!
//! Every op is generic over [`Real`] so that gradient tests can run the exact
//! same code in 64-bit ("shadow mode") while training stays in 32-bit.

mod conv;
mod linear;
mod loss;
mod norm;
mod pool;

pub use conv::{conv2d, conv2d_vjp, pad2d, pad2d_vjp, ConvGeometry};
pub use linear::{linear, linear_vjp};
pub use loss::softmax_cross_entropy;
pub use norm::{batch_norm, batch_norm_vjp, BnCache, BnMode, BnState, BN_EPS, BN_MOMENTUM};
pub use pool::{pool2d, pool2d_vjp, PoolCache, PoolKind};

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Floating-point element type accepted by the tensor kernels.
pub trait Real: Float + FromPrimitive + Default + Debug + Sum + Send + Sync + 'static {
    /// Row-major general matrix multiply: `c = alpha * a * b + beta * c`
    /// with explicit row/column strides (so transposes are free).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(check_extent(a.len(), m, k, rsa, csa));
                assert!(check_extent(b.len(), k, n, rsb, csb));
                assert!(check_extent(c.len(), m, n, rsc, csc));
                // SAFETY: the asserts above keep every strided access in bounds.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) -> bool {
    if rows == 0 || cols == 0 {
        return true;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    rs >= 0 && cs >= 0 && (last as usize) < len
}

/// Dense N-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return dim_err(
                "Tensor::new",
                format!(
                    "shape {shape:?} needs {expected} elements, got {}",
                    data.len()
                ),
            );
        }
        Ok(Self { shape, data })
    }

    /// Like [`Tensor::new`] but also rejects NaN and infinities.
    pub fn checked(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "element {pos} of tensor {shape:?}"
            )));
        }
        Self::new(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets the tensor as `[N, C, H, W]`.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => dim_err(
                op,
                format!("expected 4-D NCHW tensor, got shape {:?}", self.shape),
            ),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [n, d] => Ok([n, d]),
            _ => dim_err(
                op,
                format!("expected 2-D tensor, got shape {:?}", self.shape),
            ),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return dim_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            );
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.ensure_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.ensure_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn ensure_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(
                op,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            );
        }
        Ok(())
    }

    /// Converts element type, e.g. to run an f32 fixture in 64-bit shadow mode.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    /// Selects rows along the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let n = *self.shape.first().unwrap_or(&0);
        let stride = if n == 0 { 0 } else { self.data.len() / n };
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "row",
                    index: r,
                    limit: n,
                });
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            return dim_err("select_rows", "scalar tensor has no rows");
        }
        shape[0] = rows.len();
        Ok(Self { shape, data })
    }

    /// Stacks tensors with equal shapes along the leading axis.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = match parts.first() {
            Some(p) => p,
            None => return dim_err("concat_rows", "no tensors given"),
        };
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return dim_err(
                    "concat_rows",
                    format!("trailing shape {:?} vs {:?}", &p.shape[1..], tail),
                );
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Self { shape, data })
    }
}
