//! Raw array kernels behind the differentiable ops. Shapes are validated
//! by the callers in `tape.rs`; everything here assumes consistent sizes.

use crate::scalar::Scalar;

/// Geometry of a square-kernel 2-D convolution over an NCHW batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Rows of the unfolded patch matrix (`C * k * k`).
    pub fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Output positions per image (`H' * W'`).
    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn in_index(&self, oy: usize, ki: usize) -> Option<usize> {
        (oy * self.stride + ki).checked_sub(self.pad).filter(|&iy| iy < self.h)
    }

    fn in_index_x(&self, ox: usize, kj: usize) -> Option<usize> {
        (ox * self.stride + kj).checked_sub(self.pad).filter(|&ix| ix < self.w)
    }
}

/// Unfolds one image (`C x H x W`) into a `patch x positions` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match g.in_index(oy, ki) {
                        None => out.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, v) in out.iter_mut().enumerate() {
                                *v = g.in_index_x(ox, kj).map_or(T::zero(), |ix| src[ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let Some(iy) = g.in_index(oy, ki) else {
                        continue;
                    };
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in 0..g.wo {
                        if let Some(ix) = g.in_index_x(ox, kj) {
                            dst[ix] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns the output and, when `keep_cols`, the
/// unfolded patches of every image (needed for the weight gradient).
pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    keep_cols: bool,
) -> (Vec<T>, Vec<T>) {
    let kk = g.patch();
    let p = g.positions();
    let mut out = vec![T::zero(); g.n * g.o * p];
    let mut saved = if keep_cols {
        vec![T::zero(); g.n * kk * p]
    } else {
        Vec::new()
    };
    let mut scratch = if keep_cols { Vec::new() } else { vec![T::zero(); kk * p] };
    for n in 0..g.n {
        let xin = &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let cols: &mut [T] = if keep_cols {
            &mut saved[n * kk * p..(n + 1) * kk * p]
        } else {
            &mut scratch
        };
        im2col(xin, g, cols);
        let dst = &mut out[n * g.o * p..(n + 1) * g.o * p];
        if let Some(b) = bias {
            for (o, row) in dst.chunks_exact_mut(p).enumerate() {
                row.fill(b[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.o,
            kk,
            p,
            T::one(),
            weight,
            kk as isize,
            1,
            cols,
            p as isize,
            1,
            beta,
            dst,
            p as isize,
            1,
        );
    }
    (out, saved)
}

/// Gradient of a convolution w.r.t. its weight, accumulated over the batch.
pub(crate) fn conv_weight_grad<T: Scalar>(dout: &[T], cols: &[T], g: &ConvGeom) -> Vec<T> {
    let kk = g.patch();
    let p = g.positions();
    let mut dw = vec![T::zero(); g.o * kk];
    for n in 0..g.n {
        let dy = &dout[n * g.o * p..(n + 1) * g.o * p];
        let c = &cols[n * kk * p..(n + 1) * kk * p];
        // dw[o, q] += sum_p dy[o, p] * cols[q, p]
        T::gemm(
            g.o,
            p,
            kk,
            T::one(),
            dy,
            p as isize,
            1,
            c,
            1,
            p as isize,
            T::one(),
            &mut dw,
            kk as isize,
            1,
        );
    }
    dw
}

/// Gradient of a convolution w.r.t. its input.
pub(crate) fn conv_input_grad<T: Scalar>(dout: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let kk = g.patch();
    let p = g.positions();
    let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
    let mut dcols = vec![T::zero(); kk * p];
    for n in 0..g.n {
        let dy = &dout[n * g.o * p..(n + 1) * g.o * p];
        // dcols[q, p] = sum_o w[o, q] * dy[o, p]
        T::gemm(
            kk,
            g.o,
            p,
            T::one(),
            weight,
            1,
            kk as isize,
            dy,
            p as isize,
            1,
            T::zero(),
            &mut dcols,
            p as isize,
            1,
        );
        col2im(
            &dcols,
            g,
            &mut dx[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w],
        );
    }
    dx
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Row-wise log-softmax of an `rows x cols` matrix.
pub(crate) fn log_softmax<T: Scalar>(logits: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}
