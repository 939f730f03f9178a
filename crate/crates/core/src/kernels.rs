//! Raw forward/backward loops behind the graph operations.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn out_sample(&self) -> usize {
        self.k * self.out_plane()
    }
}

/// Unfolds one sample into a `[C·kh·kw, out_h·out_w]` column matrix.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.c {
        let src = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let x = (ox * g.stride + j) as isize - pad;
                        *out = if x < 0 || x >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im_add<T: Scalar>(g: &ConvGeometry, cols: &[T], input_grad: &mut [T]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.c {
        let dst = &mut input_grad[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - pad;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + j) as isize - pad;
                        if x >= 0 && x < g.w as isize {
                            dst[y as usize * g.w + x as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns the output and, if `keep_cols`, the unfolded
/// inputs of every sample (needed for the weight gradient).
pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    keep_cols: bool,
) -> (Vec<T>, Vec<T>) {
    let rows = g.col_rows();
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.n * g.out_sample()];
    let mut saved = if keep_cols {
        vec![T::zero(); g.n * rows * plane]
    } else {
        Vec::new()
    };
    let mut scratch = if keep_cols {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    for n in 0..g.n {
        let cols: &mut [T] = if keep_cols {
            &mut saved[n * rows * plane..(n + 1) * rows * plane]
        } else {
            &mut scratch
        };
        im2col(g, &input[n * g.in_sample()..(n + 1) * g.in_sample()], cols);
        let out_n = &mut out[n * g.out_sample()..(n + 1) * g.out_sample()];
        T::gemm(
            g.k,
            rows,
            plane,
            T::one(),
            weight,
            rows as isize,
            1,
            cols,
            plane as isize,
            1,
            T::zero(),
            out_n,
            plane as isize,
            1,
        );
        if let Some(b) = bias {
            for (k, chunk) in out_n.chunks_mut(plane).enumerate() {
                for v in chunk {
                    *v += b[k];
                }
            }
        }
    }
    (out, saved)
}

pub(crate) fn conv2d_weight_grad<T: Scalar>(
    g: &ConvGeometry,
    out_grad: &[T],
    cols: &[T],
    weight_grad: &mut [T],
) {
    let rows = g.col_rows();
    let plane = g.out_plane();
    for n in 0..g.n {
        let dout = &out_grad[n * g.out_sample()..(n + 1) * g.out_sample()];
        let cols_n = &cols[n * rows * plane..(n + 1) * rows * plane];
        T::gemm(
            g.k,
            plane,
            rows,
            T::one(),
            dout,
            plane as isize,
            1,
            cols_n,
            1,
            plane as isize,
            T::one(),
            weight_grad,
            rows as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_input_grad<T: Scalar>(
    g: &ConvGeometry,
    out_grad: &[T],
    weight: &[T],
    input_grad: &mut [T],
) {
    let rows = g.col_rows();
    let plane = g.out_plane();
    let mut dcols = vec![T::zero(); rows * plane];
    for n in 0..g.n {
        let dout = &out_grad[n * g.out_sample()..(n + 1) * g.out_sample()];
        T::gemm(
            rows,
            g.k,
            plane,
            T::one(),
            weight,
            1,
            rows as isize,
            dout,
            plane as isize,
            1,
            T::zero(),
            &mut dcols,
            plane as isize,
            1,
        );
        col2im_add(
            g,
            &dcols,
            &mut input_grad[n * g.in_sample()..(n + 1) * g.in_sample()],
        );
    }
}

/// Max over non-overlapping or strided windows without padding. Returns the
/// output and the flat input index of each window's first maximum.
pub(crate) fn max_pool2d_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    let mut argmax = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = input[best_idx];
                for i in 0..window {
                    let row = base + (oy * stride + i) * w + ox * stride;
                    for (j, &v) in input[row..row + window].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_idx = row + j;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax, out_h, out_w)
}
