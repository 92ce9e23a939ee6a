//! Baseline convolutions: direct, explicit im2col + GEMM, implicit GEMM and
//! the basic im2win kernel.
//!
//! Each kernel sums the reduction index `k = (r·H_f + u)·W_f + v` in
//! ascending order into a 32-bit accumulator starting at zero. No kernel
//! splits the reduction of a single output element, so on finite inputs all
//! of them produce identical bits.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{ConvError, Result};
use crate::tensor::{ConvParams, ConvShape, Mat2, Tensor4};
use crate::transforms::{
    filter_to_matrix, im2col_into, im2win, scatter_output_image, Im2winTensor,
};

/// GEMM view of a convolution: `M = C_o`, `N = N_i·H_o·W_o`, `K = C_i·H_f·W_f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GemmDims {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

impl GemmDims {
    pub fn new(m: usize, n: usize, k: usize) -> Self {
        Self { m, n, k }
    }

    pub fn from_shape(s: &ConvShape) -> Self {
        Self {
            m: s.c_out,
            n: s.batch * s.h_out * s.w_out,
            k: s.c_in * s.h_f * s.w_f,
        }
    }
}

/// Recovers tensor indices from GEMM coordinates by the div/mod rules of the
/// implicit GEMM formulation.
#[derive(Clone, Copy, Debug)]
pub struct IndexMap {
    plane: usize,
    w_out: usize,
    taps: usize,
    w_f: usize,
}

impl IndexMap {
    pub fn new(s: &ConvShape) -> Self {
        Self {
            plane: s.h_out * s.w_out,
            w_out: s.w_out,
            taps: s.h_f * s.w_f,
            w_f: s.w_f,
        }
    }

    /// `n -> (i_n, o_h, o_w)`.
    #[inline(always)]
    pub fn split_n(&self, n: usize) -> (usize, usize, usize) {
        let rem = n % self.plane;
        (n / self.plane, rem / self.w_out, rem % self.w_out)
    }

    /// `k -> (i_c, f_h, f_w)`.
    #[inline(always)]
    pub fn split_k(&self, k: usize) -> (usize, usize, usize) {
        let rem = k % self.taps;
        (k / self.taps, rem / self.w_f, rem % self.w_f)
    }

    pub fn join_n(&self, i_n: usize, o_h: usize, o_w: usize) -> usize {
        i_n * self.plane + o_h * self.w_out + o_w
    }

    pub fn join_k(&self, i_c: usize, f_h: usize, f_w: usize) -> usize {
        i_c * self.taps + f_h * self.w_f + f_w
    }
}

pub(crate) fn check_filter(filter: &Tensor4, p: &ConvParams) -> Result<()> {
    if filter.dims() != p.filter_dims() {
        return Err(ConvError::Shape(format!(
            "filter dims {:?}, parameters expect {:?}",
            filter.dims(),
            p.filter_dims()
        )));
    }
    Ok(())
}

fn setup(input: &Tensor4, filter: &Tensor4, p: &ConvParams) -> Result<(ConvShape, Tensor4)> {
    check_filter(filter, p)?;
    let shape = ConvShape::new(input.dims(), p)?;
    let out = Tensor4::zeros(shape.output_dims())?;
    Ok((shape, out))
}

/// Seven-loop direct convolution:
/// `O(i, j, m, n) = Σ_{r,u,v} I(i, r, m·s + u, n·s + v) · F(j, r, u, v)`.
pub fn conv_direct(input: &Tensor4, filter: &Tensor4, p: &ConvParams) -> Result<Tensor4> {
    let (shape, mut out) = setup(input, filter, p)?;
    let ConvShape {
        c_in,
        h_in,
        w_in,
        c_out,
        h_f,
        w_f,
        stride: s,
        h_out,
        w_out,
        ..
    } = shape;
    let src = input.data();
    let taps = filter.data();
    out.data_mut()
        .par_chunks_mut(h_out * w_out)
        .enumerate()
        .for_each(|(plane, dst)| {
            let (i, j) = (plane / c_out, plane % c_out);
            for r in 0..c_in {
                let image = &src[(i * c_in + r) * h_in * w_in..][..h_in * w_in];
                for u in 0..h_f {
                    for v in 0..w_f {
                        let w = taps[((j * c_in + r) * h_f + u) * w_f + v];
                        for (m, out_row) in dst.chunks_exact_mut(w_out).enumerate() {
                            let in_row = &image[(m * s + u) * w_in + v..];
                            if s == 1 {
                                for (o, &x) in out_row.iter_mut().zip(in_row) {
                                    *o += x * w;
                                }
                            } else {
                                for (o, &x) in out_row.iter_mut().zip(in_row.iter().step_by(s)) {
                                    *o += x * w;
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

const GEMM_ROWS: usize = 4;
const GEMM_DEPTH: usize = 256;

/// `C = A·B` with 32-bit accumulation in ascending `k`.
pub fn gemm(a: &Mat2, b: &Mat2) -> Result<Mat2> {
    if a.cols() != b.rows() {
        return Err(ConvError::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut c = Mat2::zeros(a.rows(), b.cols())?;
    gemm_into(a.data(), b.data(), a.cols(), b.cols(), c.data_mut());
    Ok(c)
}

/// Row-blocked `c += a·b` for row-major `a (rows × depth)`, `b (depth × cols)`.
fn gemm_into(a: &[f32], b: &[f32], depth: usize, cols: usize, c: &mut [f32]) {
    c.par_chunks_mut(GEMM_ROWS * cols)
        .enumerate()
        .for_each(|(block, c_rows)| {
            let row0 = block * GEMM_ROWS;
            let rows = c_rows.len() / cols;
            for k0 in (0..depth).step_by(GEMM_DEPTH) {
                let k1 = (k0 + GEMM_DEPTH).min(depth);
                for (ri, c_row) in c_rows.chunks_exact_mut(cols).enumerate().take(rows) {
                    let a_row = &a[(row0 + ri) * depth..][..depth];
                    for k in k0..k1 {
                        let x = a_row[k];
                        let b_row = &b[k * cols..][..cols];
                        for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                            *cv += x * bv;
                        }
                    }
                }
            }
        });
}

/// im2col + GEMM, one image at a time so only one im2col matrix is alive.
pub fn conv_im2col_gemm(input: &Tensor4, filter: &Tensor4, p: &ConvParams) -> Result<Tensor4> {
    conv_im2col_gemm_timed(input, filter, p).map(|(out, _)| out)
}

/// [`conv_im2col_gemm`] that also reports the time spent in im2col.
pub fn conv_im2col_gemm_timed(
    input: &Tensor4,
    filter: &Tensor4,
    p: &ConvParams,
) -> Result<(Tensor4, Duration)> {
    let (shape, mut out) = setup(input, filter, p)?;
    let plane = shape.h_out * shape.w_out;
    let depth = shape.c_in * shape.h_f * shape.w_f;
    let filter_mat = filter_to_matrix(filter, p)?;
    let mut cols = vec![0.0f32; plane * depth];
    let mut product = vec![0.0f32; plane * shape.c_out];
    let mut transform = Duration::ZERO;
    for (i, out_image) in out
        .data_mut()
        .chunks_exact_mut(shape.c_out * plane)
        .enumerate()
    {
        let t0 = Instant::now();
        im2col_into(input.slab(i), &shape, &mut cols);
        transform += t0.elapsed();
        product.fill(0.0);
        gemm_into(&cols, filter_mat.data(), depth, shape.c_out, &mut product);
        scatter_output_image(&product, shape.c_out, out_image);
    }
    Ok((out, transform))
}

/// Columns of the GEMM view handled together by [`conv_implicit_gemm`].
const N_CHUNK: usize = 64;

/// Implicit GEMM: loops over `(m, n, k)` recovering tensor indices on the fly.
/// Each column's input offset and each `k`'s tap offset are decomposed once
/// per chunk and added.
pub fn conv_implicit_gemm(input: &Tensor4, filter: &Tensor4, p: &ConvParams) -> Result<Tensor4> {
    let (shape, mut out) = setup(input, filter, p)?;
    let map = IndexMap::new(&shape);
    let ConvShape {
        c_in,
        h_in,
        w_in,
        c_out,
        h_f,
        w_f,
        stride: s,
        h_out,
        w_out,
        ..
    } = shape;
    let k_len = c_in * h_f * w_f;
    let plane = h_out * w_out;
    let (src, taps) = (input.data(), filter.data());
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (i_n, m) = (idx / c_out, idx % c_out);
            let mut base = [0usize; N_CHUNK];
            for (c, out) in dst.chunks_mut(N_CHUNK).enumerate() {
                let n0 = i_n * plane + c * N_CHUNK;
                for (j, b) in base.iter_mut().take(out.len()).enumerate() {
                    let (o_n, o_h, o_w) = map.split_n(n0 + j);
                    *b = (o_n * c_in * h_in + o_h * s) * w_in + o_w * s;
                }
                let mut acc = [0.0f32; N_CHUNK];
                for k in 0..k_len {
                    let (f_c, f_h, f_w) = map.split_k(k);
                    let delta = (f_c * h_in + f_h) * w_in + f_w;
                    let tap = taps[((m * c_in + f_c) * h_f + f_h) * w_f + f_w];
                    for (a, &b) in acc.iter_mut().zip(&base[..out.len()]) {
                        *a += src[b + delta] * tap;
                    }
                }
                out.copy_from_slice(&acc[..out.len()]);
            }
        });
    Ok(out)
}

/// Basic im2win convolution: transform, then one work item per output
/// element reading the input only through `Ĩ`.
pub fn conv_im2win_basic(input: &Tensor4, filter: &Tensor4, p: &ConvParams) -> Result<Tensor4> {
    check_filter(filter, p)?;
    let win = im2win(input, p)?;
    im2win_basic_compute(&win, filter)
}

/// Compute phase of [`conv_im2win_basic`] on an existing im2win tensor.
pub fn im2win_basic_compute(win: &Im2winTensor, filter: &Tensor4) -> Result<Tensor4> {
    let shape = *win.shape();
    check_filter(filter, &shape.params())?;
    let mut out = Tensor4::zeros(shape.output_dims())?;
    let map = IndexMap::new(&shape);
    let ConvShape {
        c_in,
        c_out,
        h_f,
        w_f,
        h_out,
        w_out,
        ..
    } = shape;
    let k_len = c_in * h_f * w_f;
    let plane = h_out * w_out;
    let (src, taps) = (win.data(), filter.data());
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (i_n, m) = (idx / c_out, idx % c_out);
            for (p_idx, o) in dst.iter_mut().enumerate() {
                let (o_n, o_h, o_w) = map.split_n(i_n * plane + p_idx);
                let mut acc = 0.0f32;
                let mut w = taps[m * k_len..(m + 1) * k_len].iter();
                for f_c in 0..c_in {
                    for f_h in 0..h_f {
                        for f_w in 0..w_f {
                            let x = src[win.offset(o_n, f_c, o_h, f_h, f_w, o_w)];
                            acc += x * w.next().unwrap();
                        }
                    }
                }
                *o = acc;
            }
        });
    Ok(out)
}
