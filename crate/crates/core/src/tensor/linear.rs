use super::{Real, Tensor};
use crate::error::{dim_err, Result};

fn check<T: Real>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let [n, d] = input.dims2("linear input")?;
    let [m, wd] = weight.dims2("linear weight")?;
    if d != wd {
        return dim_err(
            "linear",
            format!("input features {d} (axis 1) != weight columns {wd} (axis 1)"),
        );
    }
    Ok((n, d, m))
}

/// `input · weightᵀ + bias` for `input: [N, D]`, `weight: [M, D]`.
pub fn linear<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let (n, d, m) = check(input, weight)?;
    if bias.len() != m {
        return dim_err("linear", format!("bias length {} != {m}", bias.len()));
    }
    let mut out = Tensor::from_fn(&[n, m], |i| bias[i % m]);
    T::gemm(
        n,
        d,
        m,
        T::one(),
        input.data(),
        d as isize,
        1,
        weight.data(),
        1,
        d as isize,
        T::one(),
        out.data_mut(),
        m as isize,
        1,
    );
    Ok(out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_vjp<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let (n, d, m) = check(input, weight)?;
    if grad_out.shape() != [n, m] {
        return dim_err(
            "linear_vjp",
            format!("grad_out shape {:?} != [{n}, {m}]", grad_out.shape()),
        );
    }
    let g = grad_out.data();
    let mut gi = Tensor::zeros(&[n, d]);
    T::gemm(
        n,
        m,
        d,
        T::one(),
        g,
        m as isize,
        1,
        weight.data(),
        d as isize,
        1,
        T::zero(),
        gi.data_mut(),
        d as isize,
        1,
    );
    let mut gw = Tensor::zeros(&[m, d]);
    T::gemm(
        m,
        n,
        d,
        T::one(),
        g,
        1,
        m as isize,
        input.data(),
        d as isize,
        1,
        T::zero(),
        gw.data_mut(),
        d as isize,
        1,
    );
    let mut gb = vec![T::zero(); m];
    for row in g.chunks_exact(m) {
        for (b, &v) in gb.iter_mut().zip(row) {
            *b = *b + v;
        }
    }
    Ok((gi, gw, gb))
}
