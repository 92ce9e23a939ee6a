//! im2col and im2win lowerings, and the element counts they materialize.
//!
//! The im2win tensor `Ĩ` has shape `(N, C_i, H_o, H_f·w_eff)` where
//! `w_eff = (W_o - 1)·s + W_f`. Row `(i, r, m)` holds input rows
//! `m·s .. m·s + H_f` of channel `r` interleaved column by column:
//!
//! ```text
//! Ĩ(i, r, m, c·H_f + u) = I(i, r, m·s + u, c)    c < w_eff, u < H_f
//! ```
//!
//! so the dot-product window `(m, n)` is the contiguous slice
//! `[n·s·H_f, n·s·H_f + H_f·W_f)` of that row. When `(W_i - W_f) % s == 0`,
//! `w_eff == W_i`; otherwise the unread right-edge columns are dropped.

use rayon::prelude::*;

use crate::error::{ConvError, Result};
use crate::tensor::{ConvParams, ConvShape, Mat2, Tensor4};

/// Lowers one image of `input` to its `(H_o·W_o) × (C_i·H_f·W_f)` im2col matrix.
///
/// `M(m·W_o + n, (r·H_f + u)·W_f + v) = I(image, r, m·s + u, n·s + v)`.
pub fn im2col(input: &Tensor4, image: usize, p: &ConvParams) -> Result<Mat2> {
    let shape = ConvShape::new(input.dims(), p)?;
    if image >= shape.batch {
        return Err(ConvError::Index(format!(
            "image {image} of a batch of {}",
            shape.batch
        )));
    }
    let cols = shape.c_in * shape.h_f * shape.w_f;
    let mut m = Mat2::zeros(shape.h_out * shape.w_out, cols)?;
    im2col_into(input.slab(image), &shape, m.data_mut());
    Ok(m)
}

/// Writes the im2col matrix of one `(C_i, H_i, W_i)` image into `out`.
pub(crate) fn im2col_into(image: &[f32], shape: &ConvShape, out: &mut [f32]) {
    let &ConvShape {
        c_in,
        h_in,
        w_in,
        h_f,
        w_f,
        stride: s,
        w_out,
        ..
    } = shape;
    let cols = c_in * h_f * w_f;
    out.par_chunks_mut(cols).enumerate().for_each(|(row, dst)| {
        let (m, n) = (row / w_out, row % w_out);
        let mut k = 0;
        for r in 0..c_in {
            for u in 0..h_f {
                let src = (r * h_in + m * s + u) * w_in + n * s;
                dst[k..k + w_f].copy_from_slice(&image[src..src + w_f]);
                k += w_f;
            }
        }
    });
}

/// Unfolds a `(C_o, C_i, H_f, W_f)` filter into the `(C_i·H_f·W_f) × C_o`
/// matrix `N((r·H_f + u)·W_f + v, j) = F(j, r, u, v)`.
pub fn filter_to_matrix(f: &Tensor4, p: &ConvParams) -> Result<Mat2> {
    if f.dims() != p.filter_dims() {
        return Err(ConvError::Shape(format!(
            "filter dims {:?}, parameters expect {:?}",
            f.dims(),
            p.filter_dims()
        )));
    }
    let k = p.c_in * p.h_f * p.w_f;
    let c_out = p.c_out;
    let mut n = Mat2::zeros(k, c_out)?;
    let src = f.data();
    for (row, dst) in n.data_mut().chunks_exact_mut(c_out).enumerate() {
        for (j, d) in dst.iter_mut().enumerate() {
            *d = src[j * k + row];
        }
    }
    Ok(n)
}

/// Reshapes the `(h_o·w_o) × C_o` GEMM result into a `(1, C_o, h_o, w_o)`
/// output image: `O(j, m, n) = R'(m·w_o + n, j)`.
pub fn output_from_matrix(r_prime: &Mat2, h_o: usize, w_o: usize) -> Result<Tensor4> {
    if h_o.checked_mul(w_o) != Some(r_prime.rows()) {
        return Err(ConvError::Shape(format!(
            "{}x{} matrix cannot hold a {h_o}x{w_o} output plane",
            r_prime.rows(),
            r_prime.cols()
        )));
    }
    let c_out = r_prime.cols();
    let mut out = Tensor4::zeros([1, c_out, h_o, w_o])?;
    scatter_output_image(r_prime.data(), c_out, out.data_mut());
    Ok(out)
}

pub(crate) fn scatter_output_image(r_prime: &[f32], c_out: usize, out: &mut [f32]) {
    let plane = r_prime.len() / c_out;
    for (j, dst) in out.chunks_exact_mut(plane).enumerate() {
        for (p, d) in dst.iter_mut().enumerate() {
            *d = r_prime[p * c_out + j];
        }
    }
}

/// The window-ordered input layout consumed by the im2win kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct Im2winTensor {
    shape: ConvShape,
    row_len: usize,
    data: Vec<f32>,
}

impl Im2winTensor {
    /// Geometry of the convolution this tensor was built for.
    pub fn shape(&self) -> &ConvShape {
        &self.shape
    }

    /// `(N, C_i, H_o, H_f·w_eff)`.
    pub fn dims(&self) -> [usize; 4] {
        [
            self.shape.batch,
            self.shape.c_in,
            self.shape.h_out,
            self.row_len,
        ]
    }

    pub fn w_eff(&self) -> usize {
        self.shape.w_eff()
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Window-row `(i_n, i_c, o_h)` of length `H_f·w_eff`.
    pub fn row(&self, i_n: usize, i_c: usize, o_h: usize) -> &[f32] {
        let start = ((i_n * self.shape.c_in + i_c) * self.shape.h_out + o_h) * self.row_len;
        &self.data[start..start + self.row_len]
    }

    /// Flat offset of the element feeding output column `o_w` at filter tap
    /// `(f_h, f_w)`. Indices are not range-checked.
    #[inline(always)]
    pub(crate) fn offset(
        &self,
        i_n: usize,
        i_c: usize,
        o_h: usize,
        f_h: usize,
        f_w: usize,
        o_w: usize,
    ) -> usize {
        let s = &self.shape;
        ((i_n * s.c_in + i_c) * s.h_out + o_h) * self.row_len + (o_w * s.stride + f_w) * s.h_f + f_h
    }

    /// `Ĩ(i_n, i_c, o_h, (o_w·s + f_w)·H_f + f_h)`, which equals
    /// `I(i_n, i_c, o_h·s + f_h, o_w·s + f_w)`.
    pub fn gather(
        &self,
        i_n: usize,
        i_c: usize,
        o_h: usize,
        f_h: usize,
        f_w: usize,
        o_w: usize,
    ) -> Result<f32> {
        let s = &self.shape;
        let checks = [
            ("i_n", i_n, s.batch),
            ("i_c", i_c, s.c_in),
            ("o_h", o_h, s.h_out),
            ("f_h", f_h, s.h_f),
            ("f_w", f_w, s.w_f),
            ("o_w", o_w, s.w_out),
        ];
        for (name, v, bound) in checks {
            if v >= bound {
                return Err(ConvError::Index(format!("{name} = {v} >= {bound}")));
            }
        }
        Ok(self.data[self.offset(i_n, i_c, o_h, f_h, f_w, o_w)])
    }
}

/// Builds the im2win tensor of `input`.
pub fn im2win(input: &Tensor4, p: &ConvParams) -> Result<Im2winTensor> {
    let shape = ConvShape::new(input.dims(), p)?;
    let row_len = shape.h_f * shape.w_eff();
    let len = shape.batch * shape.c_in * shape.h_out * row_len;
    let mut data = vec![0.0f32; len];
    let &ConvShape {
        c_in,
        h_in,
        w_in,
        h_f,
        stride: s,
        h_out,
        ..
    } = &shape;
    let w_eff = shape.w_eff();
    let src = input.data();
    data.par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(row, dst)| {
            let m = row % h_out;
            let plane = row / h_out;
            let base = plane * h_in * w_in;
            debug_assert!(plane / c_in < shape.batch);
            for u in 0..h_f {
                let src_row = &src[base + (m * s + u) * w_in..][..w_eff];
                for (c, &v) in src_row.iter().enumerate() {
                    dst[c * h_f + u] = v;
                }
            }
        });
    Ok(Im2winTensor {
        shape,
        row_len,
        data,
    })
}

/// Storage layouts whose materialized size can be counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layout {
    /// The NCHW input itself.
    Raw,
    Im2col,
    Im2win,
}

impl Layout {
    pub const ALL: [Layout; 3] = [Layout::Raw, Layout::Im2col, Layout::Im2win];

    pub fn name(self) -> &'static str {
        match self {
            Layout::Raw => "raw",
            Layout::Im2col => "im2col",
            Layout::Im2win => "im2win",
        }
    }
}

impl std::str::FromStr for Layout {
    type Err = ConvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Layout::Raw),
            "im2col" => Ok(Layout::Im2col),
            "im2win" => Ok(Layout::Im2win),
            other => Err(ConvError::Format(format!(
                "unknown layout {other:?} (expected raw, im2col or im2win)"
            ))),
        }
    }
}

/// Elements materialized by `layout` for an input of `input_dims`, counting
/// the im2col matrices of the whole batch.
pub fn footprint_elems(layout: Layout, input_dims: [usize; 4], p: &ConvParams) -> Result<u64> {
    let s = ConvShape::new(input_dims, p)?;
    let n = |v: usize| v as u64;
    Ok(match layout {
        Layout::Raw => n(s.batch) * n(s.c_in) * n(s.h_in) * n(s.w_in),
        Layout::Im2col => n(s.batch) * n(s.h_out) * n(s.w_out) * n(s.c_in) * n(s.h_f) * n(s.w_f),
        Layout::Im2win => n(s.batch) * n(s.c_in) * n(s.h_out) * n(s.h_f) * n(s.w_eff()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// 1×3×3×3 input holding 0..26, 2×2 filter, stride 1.
    fn cube3() -> (Tensor4, ConvParams) {
        let input = Tensor4::from_vec([1, 3, 3, 3], (0..27).map(|v| v as f32).collect()).unwrap();
        (input, ConvParams::new(3, 2, 2, 2, 1).unwrap())
    }

    #[test]
    fn cube3_element_counts() {
        let (input, p) = cube3();
        assert_eq!(im2col(&input, 0, &p).unwrap().data().len(), 48);
        let win = im2win(&input, &p).unwrap();
        assert_eq!(win.len(), 36);
        assert_eq!(win.dims(), [1, 3, 2, 6]);
        assert_eq!(
            footprint_elems(Layout::Im2col, input.dims(), &p).unwrap(),
            48
        );
        assert_eq!(
            footprint_elems(Layout::Im2win, input.dims(), &p).unwrap(),
            36
        );
        assert_eq!(footprint_elems(Layout::Raw, input.dims(), &p).unwrap(), 27);
    }

    #[test]
    fn cube3_im2col_first_row() {
        let (input, p) = cube3();
        let m = im2col(&input, 0, &p).unwrap();
        assert_eq!((m.rows(), m.cols()), (4, 12));
        // window (0,0): channel r contributes r*9 + {0, 1, 3, 4}
        let expected: Vec<f32> = (0..3)
            .flat_map(|r| [0, 1, 3, 4].map(|o| (r * 9 + o) as f32))
            .collect();
        assert_eq!(m.row(0), &expected[..]);
    }

    #[test]
    fn cube3_im2win_rows() {
        let (input, p) = cube3();
        let win = im2win(&input, &p).unwrap();
        // channel 0, output row 0 reads input rows 0 and 1 column by column
        assert_eq!(win.row(0, 0, 0), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(win.row(0, 2, 1), &[21.0, 24.0, 22.0, 25.0, 23.0, 26.0]);
        // window (m=0, n=1) is the contiguous slice [2, 6): input columns 1..3 of rows 0..2
        assert_eq!(&win.row(0, 0, 0)[2..6], &[1.0, 4.0, 2.0, 5.0]);
        let window: Vec<f32> = (0..2)
            .flat_map(|f_h| (0..2).map(move |f_w| (f_h, f_w)))
            .map(|(f_h, f_w)| win.gather(0, 0, 0, f_h, f_w, 1).unwrap())
            .collect();
        assert_eq!(window, vec![1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn single_window_has_no_duplication() {
        let input = Tensor4::random([1, 2, 4, 5], 1).unwrap();
        let p = ConvParams::new(2, 1, 4, 5, 1).unwrap();
        let win = im2win(&input, &p).unwrap();
        assert_eq!(win.len(), input.len());
        for r in 0..2 {
            for h in 0..4 {
                for w in 0..5 {
                    assert_eq!(win.row(0, r, 0)[w * 4 + h], input.at(0, r, h, w));
                }
            }
        }
    }

    #[test]
    fn trivial_im2col() {
        let input = Tensor4::from_vec([1, 1, 1, 1], vec![2.5]).unwrap();
        let p = ConvParams::new(1, 1, 1, 1, 1).unwrap();
        let m = im2col(&input, 0, &p).unwrap();
        assert_eq!((m.rows(), m.cols(), m.at(0, 0)), (1, 1, 2.5));
        assert!(matches!(im2col(&input, 1, &p), Err(ConvError::Index(_))));
    }

    #[test]
    fn filter_matrix_examples() {
        let f = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let n = filter_to_matrix(&f, &ConvParams::new(1, 1, 2, 2, 1).unwrap()).unwrap();
        assert_eq!((n.rows(), n.cols()), (4, 1));
        assert_eq!(n.data(), &[1.0, 2.0, 3.0, 4.0]);

        let f = Tensor4::random([2, 3, 2, 2], 5).unwrap();
        let n = filter_to_matrix(&f, &ConvParams::new(3, 2, 2, 2, 1).unwrap()).unwrap();
        assert_eq!((n.rows(), n.cols()), (12, 2));

        let f = Tensor4::random([4, 3, 3, 3], 6).unwrap();
        let n = filter_to_matrix(&f, &ConvParams::new(3, 4, 3, 3, 1).unwrap()).unwrap();
        for j in 0..4 {
            for r in 0..3 {
                for u in 0..3 {
                    for v in 0..3 {
                        assert_eq!(n.at(r * 9 + u * 3 + v, j), f.at(j, r, u, v));
                    }
                }
            }
        }
        let wrong = ConvParams::new(3, 4, 3, 2, 1).unwrap();
        assert!(matches!(
            filter_to_matrix(&f, &wrong),
            Err(ConvError::Shape(_))
        ));
    }

    #[test]
    fn output_from_matrix_examples() {
        let m = Mat2::from_vec(1, 1, vec![7.0]).unwrap();
        assert_eq!(output_from_matrix(&m, 1, 1).unwrap().data(), &[7.0]);

        let m = Mat2::from_vec(4, 2, (0..8).map(|v| v as f32).collect()).unwrap();
        let o = output_from_matrix(&m, 2, 2).unwrap();
        assert_eq!(o.dims(), [1, 2, 2, 2]);
        assert_eq!(&o.data()[4..], &[1.0, 3.0, 5.0, 7.0]);

        let mut rng_vals = Tensor4::random([1, 1, 9, 5], 9).unwrap().into_vec();
        let m = Mat2::from_vec(9, 5, rng_vals.clone()).unwrap();
        let o = output_from_matrix(&m, 3, 3).unwrap();
        // inverse flattening
        for j in 0..5 {
            for mm in 0..3 {
                for nn in 0..3 {
                    rng_vals[(mm * 3 + nn) * 5 + j] -= o.at(0, j, mm, nn);
                }
            }
        }
        assert!(rng_vals.iter().all(|&v| v == 0.0));
        assert!(output_from_matrix(&m, 2, 4).is_err());
    }

    #[test]
    fn conv1_footprints() {
        let p = ConvParams::new(3, 96, 11, 11, 4).unwrap();
        let dims = [1, 3, 227, 227];
        assert_eq!(
            footprint_elems(Layout::Im2col, dims, &p).unwrap(),
            1_098_075
        );
        assert_eq!(footprint_elems(Layout::Im2win, dims, &p).unwrap(), 412_005);
        assert_eq!(footprint_elems(Layout::Raw, dims, &p).unwrap(), 154_587);
    }

    #[test]
    fn ragged_stride_drops_unread_columns() {
        // (W_i - W_f) % s != 0: the last input column is never read
        let input = Tensor4::random([1, 1, 5, 6], 2).unwrap();
        let p = ConvParams::new(1, 1, 3, 3, 2).unwrap();
        let win = im2win(&input, &p).unwrap();
        assert_eq!(win.w_eff(), 5);
        assert_eq!(win.dims(), [1, 1, 2, 15]);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let (input, p) = cube3();
        let win = im2win(&input, &p).unwrap();
        assert_eq!(win.gather(0, 0, 0, 0, 0, 0).unwrap(), win.data()[0]);
        assert!(matches!(
            win.gather(0, 0, 0, 0, 0, 2),
            Err(ConvError::Index(_))
        ));
        assert!(matches!(
            win.gather(0, 3, 0, 0, 0, 0),
            Err(ConvError::Index(_))
        ));
    }

    #[test]
    fn one_by_one_filter_duplicates_nothing() {
        let p = ConvParams::new(7, 3, 1, 1, 1).unwrap();
        let dims = [2, 7, 9, 11];
        let raw = footprint_elems(Layout::Raw, dims, &p).unwrap();
        assert_eq!(footprint_elems(Layout::Im2col, dims, &p).unwrap(), raw);
        assert_eq!(footprint_elems(Layout::Im2win, dims, &p).unwrap(), raw);
    }

    prop_compose! {
        fn geometry()(n in 1usize..3, c in 1usize..4, h_f in 1usize..6, w_f in 1usize..6, s in 1usize..4,
                      extra_h in 0usize..7, extra_w in 0usize..7)
            -> ([usize; 4], ConvParams) {
            ([n, c, h_f + extra_h, w_f + extra_w], ConvParams::new(c, 1, h_f, w_f, s).unwrap())
        }
    }

    proptest! {
        #[test]
        fn gather_matches_direct_read((dims, p) in geometry(), seed in any::<u64>()) {
            let input = Tensor4::random(dims, seed).unwrap();
            let win = im2win(&input, &p).unwrap();
            let s = *win.shape();
            prop_assert_eq!(win.len() as u64, footprint_elems(Layout::Im2win, dims, &p).unwrap());
            for i in 0..s.batch { for r in 0..s.c_in { for m in 0..s.h_out { for n in 0..s.w_out {
                for u in 0..s.h_f { for v in 0..s.w_f {
                    prop_assert_eq!(
                        win.gather(i, r, m, u, v, n).unwrap(),
                        input.at(i, r, m * s.stride + u, n * s.stride + v)
                    );
                }}
                // window (m, n) is one contiguous slice
                let start = n * s.stride * s.h_f;
                let slice = &win.row(i, r, m)[start..start + s.h_f * s.w_f];
                for v in 0..s.w_f { for u in 0..s.h_f {
                    prop_assert_eq!(slice[v * s.h_f + u], input.at(i, r, m * s.stride + u, n * s.stride + v));
                }}
            }}}}
        }

        #[test]
        fn im2col_rows_are_flattened_windows((dims, p) in geometry(), seed in any::<u64>()) {
            let input = Tensor4::random(dims, seed).unwrap();
            let s = ConvShape::new(dims, &p).unwrap();
            let mut total = 0u64;
            for i in 0..s.batch {
                let m = im2col(&input, i, &p).unwrap();
                total += m.data().len() as u64;
                for oh in 0..s.h_out { for ow in 0..s.w_out {
                    let row = m.row(oh * s.w_out + ow);
                    let mut k = 0;
                    for r in 0..s.c_in { for u in 0..s.h_f { for v in 0..s.w_f {
                        prop_assert_eq!(row[k], input.at(i, r, oh * s.stride + u, ow * s.stride + v));
                        k += 1;
                    }}}
                }}
            }
            prop_assert_eq!(total, footprint_elems(Layout::Im2col, dims, &p).unwrap());
        }

        #[test]
        fn transforms_are_deterministic((dims, p) in geometry(), seed in any::<u64>()) {
            let input = Tensor4::random(dims, seed).unwrap();
            prop_assert_eq!(im2win(&input, &p).unwrap(), im2win(&input, &p).unwrap());
            prop_assert_eq!(im2col(&input, 0, &p).unwrap(), im2col(&input, 0, &p).unwrap());
        }
    }
}
