//! Dense row-major tensors and the raw kernels behind the differentiable ops.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type stored in a [`Tensor`]. Implemented for `f32` (training) and
/// `f64` (verification).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + LowerExp + Send + Sync + 'static
{
    /// Dtype tag used by the PTNSR file format.
    const DTYPE: u8;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: u8 = 0;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 1;
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense row-major n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    dims: Vec<usize>,
    data: Vec<F>,
}

impl<F: Debug> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn new(dims: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape(format!("dims must be positive, got {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("dims {dims:?} hold {n} values but {} were given", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, F::zero())
    }

    pub fn full(dims: &[usize], value: F) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: F) -> Self {
        Self { dims: vec![1], data: vec![value] }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n = dims.iter().product();
        Self { dims: dims.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    /// 2-D tensor from nested rows; panics on ragged input (test convenience).
    pub fn from_rows(rows: &[&[F]]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self { dims: vec![rows.len(), cols], data }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { F::one() } else { F::zero() })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r, *c)),
            d => Err(Error::shape(format!("expected a 2-D tensor, got dims {d:?}"))),
        }
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().expect("tensor has at least one axis")
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.last_dim();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() || dims.contains(&0) {
            return Err(Error::shape(format!("cannot reshape {:?} into {dims:?}", self.dims)));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.shape2()?;
        let mut out = vec![F::zero(); r * c];
        transpose_into(&self.data, r, c, &mut out);
        Ok(Self { dims: vec![c, r], data: out })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.shape2()?;
        let (k2, n) = other.shape2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims differ: {:?} x {:?}", self.dims, other.dims)));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_acc(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self { dims: vec![m, n], data: out })
    }

    /// Gather whole rows (first-axis slices) by index.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let rows = self.dims[0];
        let stride = self.data.len() / rows;
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= rows {
                return Err(Error::shape(format!("row index {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut dims = self.dims.clone();
        dims[0] = idx.len();
        Self::new(dims, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.data.iter().zip(&other.data).map(|(a, b)| (*a - *b).abs()).fold(F::zero(), F::max)
    }

    /// Convert element type (e.g. f32 weights into an f64 verification model).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|v| G::lit(v.as_f64())).collect() }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, i-k-j order so the inner loop is contiguous.
pub(crate) fn matmul_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · b` where `a` is `m×k` and `b` is `m×n`.
pub(crate) fn matmul_at_b_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let a_row = &a[r * k..(r + 1) * k];
        let b_row = &b[r * n..(r + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m×k] += a · bᵀ` where `a` is `m×n` and `b` is `k×n`.
pub(crate) fn matmul_a_bt_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, n: usize, k: usize) {
    let mut bt = vec![F::zero(); n * k];
    transpose_into(b, k, n, &mut bt);
    matmul_acc(a, &bt, out, m, n, k);
}

pub(crate) fn transpose_into<F: Copy>(src: &[F], rows: usize, cols: usize, dst: &mut [F]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let full = (input as isize - 1) * stride as isize + kernel as isize - 2 * pad as isize;
    if input == 0 || full <= 0 {
        return Err(Error::shape(format!(
            "transposed convolution output is empty (in={input}, k={kernel}, s={stride}, p={pad})"
        )));
    }
    Ok(full as usize)
}

/// Geometry of a 2-D transposed convolution over a `Cin×H×W` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvT2d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvT2d {
    pub fn infer(x_dims: &[usize], w_dims: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h_in, w_in) = match x_dims {
            [c, h, w] => (*c, *h, *w),
            d => return Err(Error::shape(format!("conv_transpose2d input must be C×H×W, got {d:?}"))),
        };
        let (wc_in, c_out, kh, kw) = match w_dims {
            [a, b, c, d] => (*a, *b, *c, *d),
            d => return Err(Error::shape(format!("conv_transpose2d kernel must be Cin×Cout×k×k, got {d:?}"))),
        };
        if wc_in != c_in || kh != kw {
            return Err(Error::shape(format!("kernel {w_dims:?} does not match input {x_dims:?}")));
        }
        if stride == 0 {
            return Err(Error::shape("stride must be positive"));
        }
        Ok(Self {
            c_in,
            c_out,
            kernel: kh,
            stride,
            pad,
            h_in,
            w_in,
            h_out: conv_transpose_out(h_in, kh, stride, pad)?,
            w_out: conv_transpose_out(w_in, kw, stride, pad)?,
        })
    }

    fn cols(&self) -> usize {
        self.c_out * self.kernel * self.kernel
    }

    /// Visit every (input pixel, kernel tap) pair that lands inside the output.
    /// Arguments: input pixel, tap index `ky*k+kx`, output pixel.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.kernel;
        for iy in 0..self.h_in {
            for ix in 0..self.w_in {
                let pix = iy * self.w_in + ix;
                for ky in 0..k {
                    let oy = (iy * self.stride + ky) as isize - self.pad as isize;
                    if oy < 0 || oy >= self.h_out as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ox = (ix * self.stride + kx) as isize - self.pad as isize;
                        if ox < 0 || ox >= self.w_out as isize {
                            continue;
                        }
                        f(pix, ky * k + kx, oy as usize * self.w_out + ox as usize);
                    }
                }
            }
        }
    }

    /// Forward pass: `x` is `Cin×H×W`, `w` is `Cin×Cout×k×k`.
    ///
    /// Computed as `cols = xᵀ·W` (one row of `Cout·k·k` contributions per input
    /// pixel) followed by a scatter-add into the output grid.
    pub(crate) fn forward<F: Scalar>(&self, x: &[F], w: &[F]) -> Vec<F> {
        let hw = self.h_in * self.w_in;
        let kk = self.kernel * self.kernel;
        let mut xt = vec![F::zero(); hw * self.c_in];
        transpose_into(x, self.c_in, hw, &mut xt);
        let mut cols = vec![F::zero(); hw * self.cols()];
        matmul_acc(&xt, w, &mut cols, hw, self.c_in, self.cols());
        let out_hw = self.h_out * self.w_out;
        let mut out = vec![F::zero(); self.c_out * out_hw];
        let ncols = self.cols();
        self.for_each_tap(|pix, tap, opix| {
            let row = &cols[pix * ncols..(pix + 1) * ncols];
            for co in 0..self.c_out {
                let o = &mut out[co * out_hw + opix];
                *o = *o + row[co * kk + tap];
            }
        });
        out
    }

    /// Backward pass: returns `(dx, dw)` for upstream gradient `dout`.
    pub(crate) fn backward<F: Scalar>(&self, x: &[F], w: &[F], dout: &[F]) -> (Vec<F>, Vec<F>) {
        let hw = self.h_in * self.w_in;
        let kk = self.kernel * self.kernel;
        let out_hw = self.h_out * self.w_out;
        let ncols = self.cols();
        let mut dcols = vec![F::zero(); hw * ncols];
        self.for_each_tap(|pix, tap, opix| {
            let row = &mut dcols[pix * ncols..(pix + 1) * ncols];
            for co in 0..self.c_out {
                row[co * kk + tap] = dout[co * out_hw + opix];
            }
        });
        // dxᵀ[hw×Cin] = dcols · Wᵀ
        let mut dxt = vec![F::zero(); hw * self.c_in];
        matmul_a_bt_acc(&dcols, w, &mut dxt, hw, ncols, self.c_in);
        let mut dx = vec![F::zero(); self.c_in * hw];
        transpose_into(&dxt, hw, self.c_in, &mut dx);
        // dW[Cin×cols] = x · dcols
        let mut dw = vec![F::zero(); self.c_in * ncols];
        matmul_acc(x, &dcols, &mut dw, self.c_in, hw, ncols);
        (dx, dw)
    }
}

/// Numerically stable row softmax over the last axis.
pub(crate) fn softmax_rows_into<F: Scalar>(x: &[F], cols: usize, out: &mut [F]) {
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = xr.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            total = total + *o;
        }
        let inv = F::one() / total;
        for o in or.iter_mut() {
            *o = *o * inv;
        }
    }
}

const GELU_C: f64 = 0.044715;

/// tanh-approximated GELU and its derivative.
pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + F::lit(GELU_C) * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = F::lit(0.5);
    let inner = c * (x + F::lit(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = c * (F::one() + F::lit(3.0 * GELU_C) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

/// Nearest integer with ties resolved toward the smaller value, floored at 1.
///
/// Shared by the pruning and merging counters and the cost model so that both
/// always agree on token counts.
pub fn round_count(x: f64) -> usize {
    let r = (x - 0.5).ceil();
    if r < 1.0 {
        1
    } else {
        r as usize
    }
}
