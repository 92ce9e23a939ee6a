//! Dense NCHW tensors, row-major matrices and convolution geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ConvError, Result};

fn checked_volume(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Dense 4-D tensor of `f32` in row-major order, last dimension fastest.
///
/// Used for inputs `(N, C_i, H_i, W_i)`, filters `(C_o, C_i, H_f, W_f)` and
/// outputs `(N, C_o, H_o, W_o)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Result<Self> {
        let len = Self::checked_len(dims)?;
        Ok(Self {
            dims,
            data: vec![0.0; len],
        })
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let len = Self::checked_len(dims)?;
        if data.len() != len {
            return Err(ConvError::Shape(format!(
                "dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    /// Builds a tensor by evaluating `f` at every index.
    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> f32) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        for (flat, v) in t.data.iter_mut().enumerate() {
            *v = f(unravel(dims, flat));
        }
        Ok(t)
    }

    /// Uniform values in `[-1, 1)` drawn from a seeded ChaCha8 stream.
    pub fn random(dims: [usize; 4], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(dims, &mut rng)
    }

    pub fn random_with(dims: [usize; 4], rng: &mut impl Rng) -> Result<Self> {
        let len = Self::checked_len(dims)?;
        let data = (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Ok(Self { dims, data })
    }

    fn checked_len(dims: [usize; 4]) -> Result<usize> {
        if dims.contains(&0) {
            return Err(ConvError::Shape(format!(
                "dims {dims:?} contain a zero extent"
            )));
        }
        checked_volume(&dims)
            .ok_or_else(|| ConvError::Shape(format!("dims {dims:?} overflow usize")))
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Flat offset of `(a, b, c, d)`. Indices are not range-checked.
    #[inline(always)]
    pub fn offset(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        let [_, d1, d2, d3] = self.dims;
        ((a * d1 + b) * d2 + c) * d3 + d
    }

    /// Inverse of [`offset`](Self::offset).
    pub fn index_of(&self, flat: usize) -> [usize; 4] {
        unravel(self.dims, flat)
    }

    #[inline(always)]
    pub fn at(&self, a: usize, b: usize, c: usize, d: usize) -> f32 {
        self.data[self.offset(a, b, c, d)]
    }

    pub fn get(&self, idx: [usize; 4]) -> Option<f32> {
        if idx.iter().zip(self.dims).all(|(&i, d)| i < d) {
            Some(self.at(idx[0], idx[1], idx[2], idx[3]))
        } else {
            None
        }
    }

    pub fn set(&mut self, idx: [usize; 4], value: f32) {
        let off = self.offset(idx[0], idx[1], idx[2], idx[3]);
        self.data[off] = value;
    }

    /// Contiguous `(d1, d2, d3)` block of the first-axis entry `a`.
    pub fn slab(&self, a: usize) -> &[f32] {
        let n = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[a * n..(a + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor4 {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor4, f: impl Fn(f32, f32) -> f32) -> Result<Tensor4> {
        same_dims(self, other)?;
        Ok(Tensor4 {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

#[inline]
fn unravel(dims: [usize; 4], flat: usize) -> [usize; 4] {
    let [_, d1, d2, d3] = dims;
    let d = flat % d3;
    let rest = flat / d3;
    let c = rest % d2;
    let rest = rest / d2;
    [rest / d1, rest % d1, c, d]
}

fn same_dims(a: &Tensor4, b: &Tensor4) -> Result<()> {
    if a.dims != b.dims {
        return Err(ConvError::Shape(format!("{:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

/// Row-major `f32` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat2 {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Mat2 {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        let len = Self::checked_len(rows, cols)?;
        Ok(Self {
            rows,
            cols,
            data: vec![0.0; len],
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let len = Self::checked_len(rows, cols)?;
        if data.len() != len {
            return Err(ConvError::Shape(format!(
                "{rows}x{cols} matrix needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n, n)?;
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        Ok(m)
    }

    fn checked_len(rows: usize, cols: usize) -> Result<usize> {
        if rows == 0 || cols == 0 {
            return Err(ConvError::Shape(format!(
                "{rows}x{cols} matrix has a zero extent"
            )));
        }
        rows.checked_mul(cols)
            .ok_or_else(|| ConvError::Shape(format!("{rows}x{cols} overflows usize")))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline(always)]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Filter geometry and stride. Padding and dilation are not supported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvParams {
    pub c_in: usize,
    pub c_out: usize,
    pub h_f: usize,
    pub w_f: usize,
    /// Applied to both spatial axes.
    pub stride: usize,
}

impl ConvParams {
    pub fn new(c_in: usize, c_out: usize, h_f: usize, w_f: usize, stride: usize) -> Result<Self> {
        let p = Self {
            c_in,
            c_out,
            h_f,
            w_f,
            stride,
        };
        p.validate()?;
        Ok(p)
    }

    /// Parameters matching a `(C_o, C_i, H_f, W_f)` filter tensor.
    pub fn for_filter(filter: &Tensor4, stride: usize) -> Result<Self> {
        let [c_out, c_in, h_f, w_f] = filter.dims();
        Self::new(c_in, c_out, h_f, w_f, stride)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(ConvError::Geometry("stride must be at least 1".into()));
        }
        if self.c_in == 0 || self.c_out == 0 || self.h_f == 0 || self.w_f == 0 {
            return Err(ConvError::Geometry(format!("zero extent in {self:?}")));
        }
        Ok(())
    }

    pub fn filter_dims(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.h_f, self.w_f]
    }
}

/// Output spatial size of an unpadded convolution:
/// `floor((h_i - h_f) / s) + 1` on each axis.
pub fn output_dims(h_i: usize, w_i: usize, p: &ConvParams) -> Result<(usize, usize)> {
    p.validate()?;
    if p.h_f > h_i || p.w_f > w_i {
        return Err(ConvError::Geometry(format!(
            "{}x{} filter does not fit a {h_i}x{w_i} input",
            p.h_f, p.w_f
        )));
    }
    Ok(((h_i - p.h_f) / p.stride + 1, (w_i - p.w_f) / p.stride + 1))
}

/// Every extent of one convolution problem, validated once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvShape {
    pub batch: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub h_f: usize,
    pub w_f: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvShape {
    pub fn new(input_dims: [usize; 4], p: &ConvParams) -> Result<Self> {
        let [batch, c_in, h_in, w_in] = input_dims;
        if input_dims.contains(&0) {
            return Err(ConvError::Geometry(format!(
                "input dims {input_dims:?} contain a zero extent"
            )));
        }
        if c_in != p.c_in {
            return Err(ConvError::Shape(format!(
                "input has {c_in} channels, filter expects {}",
                p.c_in
            )));
        }
        let (h_out, w_out) = output_dims(h_in, w_in, p)?;
        Ok(Self {
            batch,
            c_in,
            h_in,
            w_in,
            c_out: p.c_out,
            h_f: p.h_f,
            w_f: p.w_f,
            stride: p.stride,
            h_out,
            w_out,
        })
    }

    /// Shape of convolving `input` with `filter`, checking that the two agree.
    pub fn for_tensors(input: &Tensor4, filter: &Tensor4, stride: usize) -> Result<Self> {
        let p = ConvParams::for_filter(filter, stride)?;
        Self::new(input.dims(), &p)
    }

    pub fn params(&self) -> ConvParams {
        ConvParams {
            c_in: self.c_in,
            c_out: self.c_out,
            h_f: self.h_f,
            w_f: self.w_f,
            stride: self.stride,
        }
    }

    pub fn input_dims(&self) -> [usize; 4] {
        [self.batch, self.c_in, self.h_in, self.w_in]
    }

    pub fn filter_dims(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.h_f, self.w_f]
    }

    pub fn output_dims(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.h_out, self.w_out]
    }

    /// Source-column span touched by one output row: `(W_o - 1)·s + W_f`.
    pub fn w_eff(&self) -> usize {
        (self.w_out - 1) * self.stride + self.w_f
    }

    /// Multiply-adds times two.
    pub fn flops(&self) -> u64 {
        2 * [
            self.batch, self.c_out, self.h_out, self.w_out, self.c_in, self.h_f, self.w_f,
        ]
        .iter()
        .map(|&x| x as u64)
        .product::<u64>()
    }
}

/// Largest elementwise `|a - b| / max(|a|, |b|, 1)`.
///
/// Equal values (including `+0` vs `-0` and identical NaN bit patterns)
/// contribute 0. A NaN facing a different value counts as infinite.
pub fn max_rel_diff(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    same_dims(a, b)?;
    Ok(max_rel_diff_slices(a.data(), b.data()))
}

pub(crate) fn max_rel_diff_slices(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |worst, (&x, &y)| {
        if x == y || x.to_bits() == y.to_bits() {
            return worst;
        }
        let (x, y) = (x as f64, y as f64);
        let d = (x - y).abs() / x.abs().max(y.abs()).max(1.0);
        if d.is_nan() {
            f64::INFINITY
        } else {
            worst.max(d)
        }
    })
}
