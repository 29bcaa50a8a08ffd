use crate::error::{dim_err, Result};
use crate::tensor::{ConvGeometry, Real, Tensor};

const WORD: usize = 64;

fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD)
}

/// Mask selecting the valid bits of the last word of an `n`-bit row.
fn tail_mask(n: usize) -> u64 {
    match n % WORD {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Sign bits packed little-endian into 64-bit words (bit set ⇔ element ≥ 0).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitPackedTensor {
    words: Vec<u64>,
    logical_len: usize,
    shape: Vec<usize>,
}

impl BitPackedTensor {
    /// Rebuilds a packed tensor from stored words, rejecting stray pad bits.
    pub fn from_words(shape: Vec<usize>, words: Vec<u64>) -> Result<Self> {
        let logical_len: usize = shape.iter().product();
        if words.len() != words_for(logical_len) {
            return dim_err(
                "BitPackedTensor",
                format!("{} words for {logical_len} bits", words.len()),
            );
        }
        if let Some(&last) = words.last() {
            if last & !tail_mask(logical_len) != 0 {
                return dim_err("BitPackedTensor", "nonzero pad bits");
            }
        }
        Ok(Self {
            words,
            logical_len,
            shape,
        })
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn logical_len(&self) -> usize {
        self.logical_len
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bit(&self, i: usize) -> bool {
        self.words[i / WORD] >> (i % WORD) & 1 == 1
    }

    /// Expands back to a ±1 tensor.
    pub fn unpack<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(
            &self.shape,
            |i| if self.bit(i) { T::one() } else { -T::one() },
        )
    }
}

pub fn pack_bits<T: Real>(t: &Tensor<T>) -> BitPackedTensor {
    let n = t.len();
    let mut words = vec![0u64; words_for(n)];
    for (i, &v) in t.data().iter().enumerate() {
        if v >= T::zero() {
            words[i / WORD] |= 1 << (i % WORD);
        }
    }
    BitPackedTensor {
        words,
        logical_len: n,
        shape: t.shape().to_vec(),
    }
}

/// `2·popcount(XNOR(a, b)) − n` over the first `n` bits of two word slices.
#[inline]
fn xnor_dot_words(a: &[u64], b: &[u64], n: usize) -> i64 {
    let full = n / WORD;
    let mut pc: u32 = 0;
    for i in 0..full {
        pc += (!(a[i] ^ b[i])).count_ones();
    }
    if !n.is_multiple_of(WORD) {
        pc += (!(a[full] ^ b[full]) & tail_mask(n)).count_ones();
    }
    2 * pc as i64 - n as i64
}

/// Dot product of the two ±1 vectors represented by `a` and `b`.
pub fn xnor_popcount_dot(a: &BitPackedTensor, b: &BitPackedTensor) -> Result<i64> {
    if a.logical_len != b.logical_len {
        return dim_err(
            "xnor_popcount_dot",
            format!("lengths {} and {} differ", a.logical_len, b.logical_len),
        );
    }
    Ok(xnor_dot_words(&a.words, &b.words, a.logical_len))
}

/// Row-aligned packed matrix: every row starts on a fresh word and its pad
/// bits are zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedRows {
    rows: usize,
    row_len: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl PackedRows {
    fn zeroed(rows: usize, row_len: usize) -> Self {
        let words_per_row = words_for(row_len);
        Self {
            rows,
            row_len,
            words_per_row,
            words: vec![0; rows * words_per_row],
        }
    }

    #[inline]
    fn set(&mut self, row: usize, bit: usize) {
        self.words[row * self.words_per_row + bit / WORD] |= 1 << (bit % WORD);
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_row..(i + 1) * self.words_per_row]
    }

    /// Re-lays a flat packed tensor `[rows, ...]` out one row per word run.
    pub fn from_flat(flat: &BitPackedTensor) -> Result<Self> {
        let rows = *flat.shape.first().unwrap_or(&0);
        if rows == 0 || !flat.logical_len.is_multiple_of(rows) {
            return dim_err("PackedRows::from_flat", format!("shape {:?}", flat.shape));
        }
        let row_len = flat.logical_len / rows;
        let mut out = Self::zeroed(rows, row_len);
        for r in 0..rows {
            for j in 0..row_len {
                if flat.bit(r * row_len + j) {
                    out.set(r, j);
                }
            }
        }
        Ok(out)
    }
}

/// Packs each output channel's kernel `[C, k, k]` into one row.
pub fn pack_kernel_rows<T: Real>(kernels: &Tensor<T>) -> Result<PackedRows> {
    let [o, c, kh, kw] = kernels.dims4("pack_kernel_rows")?;
    let row_len = c * kh * kw;
    let mut out = PackedRows::zeroed(o, row_len);
    for (r, row) in kernels.data().chunks_exact(row_len.max(1)).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v >= T::zero() {
                out.set(r, j);
            }
        }
    }
    Ok(out)
}

/// Receptive fields of a binarized input, one packed row per output pixel.
#[derive(Clone, Debug)]
pub struct PackedInput {
    pub rows: PackedRows,
    pub batch: usize,
    pub channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub geom: ConvGeometry,
}

/// Binarizes (sign, ties to +1) and im2col-packs `input: [N, C, H, W]`.
///
/// Padding pixels are the sign of a zero pad, i.e. +1.
pub fn pack_input<T: Real>(input: &Tensor<T>, geom: ConvGeometry) -> Result<PackedInput> {
    let [n, c, h, w] = input.dims4("pack_input")?;
    let (oh, ow) = (geom.output_size(h)?, geom.output_size(w)?);
    let k = geom.kernel;
    let row_len = c * k * k;
    let mut rows = PackedRows::zeroed(n * oh * ow, row_len);
    let x = input.data();
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = (b * oh + oy) * ow + ox;
                let mut bit = 0;
                for ch in 0..c {
                    let plane = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for ky in 0..k {
                        let iy = oy as isize * s + ky as isize - p;
                        for kx in 0..k {
                            let ix = ox as isize * s + kx as isize - p;
                            let inside = iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize;
                            if !inside || plane[iy as usize * w + ix as usize] >= T::zero() {
                                rows.set(r, bit);
                            }
                            bit += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(PackedInput {
        rows,
        batch: n,
        channels: c,
        out_h: oh,
        out_w: ow,
        geom,
    })
}

/// XNOR/popcount convolution: `out[n, o, y, x] = α_o · ⟨field(n, y, x), kernel_o⟩`.
///
/// The inner product is exact integer arithmetic; the only float operation is
/// the final multiply by `α_o`.
pub fn binary_conv2d(
    input: &PackedInput,
    kernels: &PackedRows,
    alphas: &[f32],
) -> Result<Tensor<f32>> {
    if kernels.row_len != input.rows.row_len {
        return dim_err(
            "binary_conv2d",
            format!(
                "receptive field has {} bits but kernels have {}",
                input.rows.row_len, kernels.row_len
            ),
        );
    }
    if alphas.len() != kernels.rows {
        return dim_err(
            "binary_conv2d",
            format!(
                "{} scales for {} output channels",
                alphas.len(),
                kernels.rows
            ),
        );
    }
    let (o, plane) = (kernels.rows, input.out_h * input.out_w);
    let n_bits = kernels.row_len;
    let mut out = Tensor::zeros(&[input.batch, o, input.out_h, input.out_w]);
    let dst = out.data_mut();
    for b in 0..input.batch {
        for pix in 0..plane {
            let field = input.rows.row(b * plane + pix);
            for (oc, &alpha) in alphas.iter().enumerate() {
                let dot = xnor_dot_words(field, kernels.row(oc), n_bits);
                dst[(b * o + oc) * plane + pix] = alpha * dot as f32;
            }
        }
    }
    Ok(out)
}
