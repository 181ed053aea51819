//! Strided 2-D convolution and its transpose, via im2col and one GEMM per call.
//!
//! Weights are stored output-channel first for both operators:
//! `[C_out, C_in, k, k]`. Batches are NCHW.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};

use super::Var;
use crate::scalar::Scalar;

/// Spatial output size of a convolution.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad)
        .checked_sub(kernel)
        .map(|span| span / stride + 1)
}

/// Spatial output size of a transposed convolution.
pub fn conv_transpose_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    ((input.max(1) - 1) * stride + kernel).checked_sub(2 * pad)
}

/// Geometry of the sliding window between a "wide" image and a "narrow" grid.
#[derive(Clone, Copy, Debug)]
struct Window {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Source index of tap `k` (0..kernel) at output index `o`, if inside the image.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        (o * stride + k).checked_sub(pad).filter(|&i| i < limit)
    }
}

/// Unfolds `[B, C, H, W]` into `[C·k·k, B·OH·OW]`.
fn im2col<F: Scalar>(x: &[F], g: &Window) -> Array2<F> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![F::zero(); rows * cols];
    let plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let src = &x[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                    let dst = &mut dst_row[b * out_plane..(b + 1) * out_plane];
                    for oh in 0..g.out_h {
                        let Some(ih) = Window::source(oh, ki, g.stride, g.pad, g.height) else {
                            continue;
                        };
                        let src_row = &src[ih * g.width..(ih + 1) * g.width];
                        let dst_line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                        for (ow, d) in dst_line.iter_mut().enumerate() {
                            if let Some(iw) = Window::source(ow, kj, g.stride, g.pad, g.width) {
                                *d = src_row[iw];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((rows, cols), out).expect("im2col shape")
}

/// Folds `[C·k·k, B·OH·OW]` back into `[B, C, H, W]`, summing overlaps.
fn col2im<F: Scalar>(cols_mat: ArrayView2<'_, F>, g: &Window) -> ArrayD<F> {
    let cols_std = cols_mat.as_standard_layout();
    let cols_data = cols_std.as_slice().expect("contiguous columns");
    let cols = g.cols();
    let plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let mut x = vec![F::zero(); g.batch * g.channels * plane];
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src_row = &cols_data[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let dst = &mut x[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                    let src = &src_row[b * out_plane..(b + 1) * out_plane];
                    for oh in 0..g.out_h {
                        let Some(ih) = Window::source(oh, ki, g.stride, g.pad, g.height) else {
                            continue;
                        };
                        for ow in 0..g.out_w {
                            if let Some(iw) = Window::source(ow, kj, g.stride, g.pad, g.width) {
                                let d = &mut dst[ih * g.width + iw];
                                *d = *d + src[oh * g.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[g.batch, g.channels, g.height, g.width]), x).expect("col2im shape")
}

/// `[B, C, S]`-ordered data as `[C, B·S]`.
fn channels_major<F: Scalar>(x: &ArrayD<F>) -> Array2<F> {
    let sh = x.shape();
    let (b, c) = (sh[0], sh[1]);
    let s: usize = sh[2..].iter().product();
    let x = x.as_standard_layout();
    let v = x
        .view()
        .into_shape_with_order((b, c, s))
        .expect("NCHW view");
    let permuted = v.permuted_axes([1, 0, 2]);
    let owned = permuted.as_standard_layout().into_owned();
    owned.into_shape_with_order((c, b * s)).expect("channel-major")
}

/// `[C, B·S]` back into `[B, C, h, w]`.
fn batch_major<F: Scalar>(m: Array2<F>, b: usize, h: usize, w: usize) -> ArrayD<F> {
    let c = m.nrows();
    let v = m.into_shape_with_order((c, b, h * w)).expect("batch-major");
    v.permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[b, c, h, w]))
        .expect("NCHW")
}

fn matmul<F: Scalar>(a: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> Array2<F> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(F::one(), &a, &b, F::zero(), &mut out);
    out
}

fn contiguous<F: Scalar>(x: &ArrayD<F>) -> std::borrow::Cow<'_, [F]> {
    match x.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().copied().collect()),
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    /// Cross-correlation of `[B, C_in, H, W]` with `[C_out, C_in, k, k]`.
    pub fn conv2d(self, weight: Var<'t, F>, stride: usize, pad: usize) -> Var<'t, F> {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape(), w.shape());
        assert_eq!(xs.len(), 4, "conv2d: input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d: weight must be [O, C, k, k]");
        assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d: square kernels only");
        let (batch, c_out, kernel) = (xs[0], ws[0], ws[2]);
        let g = Window {
            batch,
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel,
            stride,
            pad,
            out_h: conv_output_size(xs[2], kernel, stride, pad).expect("conv2d: input smaller than kernel"),
            out_w: conv_output_size(xs[3], kernel, stride, pad).expect("conv2d: input smaller than kernel"),
        };
        let cols = im2col(&contiguous(&x), &g);
        let w2 = w
            .view()
            .into_shape_with_order((c_out, g.rows()))
            .expect("weight matrix");
        let y = batch_major(matmul(w2, cols.view()), batch, g.out_h, g.out_w);
        self.tape.apply(y, &[self, weight], move |grad, needs| {
            let dy = channels_major(grad);
            let dw = needs[1].then(|| {
                let dw = matmul(dy.view(), cols.t());
                dw.into_shape_with_order(IxDyn(w.shape())).expect("weight grad").into_dyn()
            });
            let dx = needs[0].then(|| {
                let w2 = w.view().into_shape_with_order((c_out, g.rows())).expect("weight matrix");
                let dcols = matmul(w2.t(), dy.view());
                col2im(dcols.view(), &g)
            });
            vec![dx, dw]
        })
    }

    /// Transposed convolution of `[B, C_in, H, W]` with `[C_out, C_in, k, k]`.
    ///
    /// Adjoint of [`Var::conv2d`] with the same kernel, stride and padding.
    pub fn conv_transpose2d(self, weight: Var<'t, F>, stride: usize, pad: usize) -> Var<'t, F> {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape().to_vec(), w.shape().to_vec());
        assert_eq!(xs.len(), 4, "conv_transpose2d: input must be NCHW");
        assert_eq!(ws.len(), 4, "conv_transpose2d: weight must be [O, C, k, k]");
        assert_eq!(xs[1], ws[1], "conv_transpose2d: channel mismatch");
        let (batch, c_in, c_out, kernel) = (xs[0], xs[1], ws[0], ws[2]);
        let out_h = conv_transpose_output_size(xs[2], kernel, stride, pad).expect("conv_transpose2d: bad geometry");
        let out_w = conv_transpose_output_size(xs[3], kernel, stride, pad).expect("conv_transpose2d: bad geometry");
        let g = Window {
            batch,
            channels: c_out,
            height: out_h,
            width: out_w,
            kernel,
            stride,
            pad,
            out_h: xs[2],
            out_w: xs[3],
        };
        // A[(o, ki, kj), c] = w[o, c, ki, kj]
        let kk = kernel * kernel;
        let a = w
            .view()
            .into_shape_with_order((c_out, c_in, kk))
            .expect("weight view")
            .permuted_axes([0, 2, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c_out * kk, c_in))
            .expect("weight matrix");
        let x_mat = channels_major(&x);
        let cols = matmul(a.view(), x_mat.view());
        let y = col2im(cols.view(), &g);
        self.tape.apply(y, &[self, weight], move |grad, needs| {
            let dcols = im2col(&contiguous(grad), &g);
            let dx = needs[0].then(|| {
                let dx_mat = matmul(a.t(), dcols.view());
                batch_major(dx_mat, batch, xs[2], xs[3])
            });
            let dw = needs[1].then(|| {
                let da = matmul(dcols.view(), x_mat.t());
                da.into_shape_with_order((c_out, kk, c_in))
                    .expect("weight grad view")
                    .permuted_axes([0, 2, 1])
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&[c_out, c_in, kernel, kernel]))
                    .expect("weight grad")
            });
            vec![dx, dw]
        })
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::{check_gradients, random_tensor, weighted_sum};

    /// Direct six-loop convolution.
    fn naive_conv(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
        let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut y = ArrayD::zeros(IxDyn(&[b, o, oh, ow]));
        for bi in 0..b {
            for oi in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ih = (i * stride + ki) as isize - pad as isize;
                                    let iw = (j * stride + kj) as isize - pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                        acc += x[[bi, ci, ih as usize, iw as usize]] * w[[oi, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        y[[bi, oi, i, j]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let x = random_tensor(&[2, 3, 9, 7], 1);
        let w = random_tensor(&[4, 3, 4, 4], 2);
        for (stride, pad) in [(1, 0), (2, 1), (1, 1), (2, 0)] {
            let tape = Tape::new();
            let y = tape.constant(x.clone()).conv2d(tape.constant(w.clone()), stride, pad);
            let expected = naive_conv(&x, &w, stride, pad);
            assert_eq!(y.shape(), expected.shape());
            let diff = (&*y.value() - &expected).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
            assert!(diff < 1e-12, "stride {stride} pad {pad}: {diff}");
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_T(y)>
        let x = random_tensor(&[2, 3, 8, 8], 3);
        let w = random_tensor(&[5, 3, 4, 4], 4);
        let tape = Tape::new();
        let cx = tape.constant(x.clone()).conv2d(tape.constant(w.clone()), 2, 1);
        let y = random_tensor(&cx.shape(), 5);
        // conv_transpose2d maps C_in -> C_out of its own weight: use the weight
        // with roles swapped, [3, 5, k, k].
        let wt = w.clone().permuted_axes(IxDyn(&[1, 0, 2, 3])).as_standard_layout().into_owned();
        let ty = tape.constant(y.clone()).conv_transpose2d(tape.constant(wt), 2, 1);
        assert_eq!(ty.shape(), x.shape());
        let lhs = (&*cx.value() * &y).sum();
        let rhs = (&x * &*ty.value()).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn output_sizes() {
        assert_eq!(conv_output_size(256, 4, 2, 1), Some(128));
        assert_eq!(conv_output_size(32, 4, 1, 1), Some(31));
        assert_eq!(conv_output_size(1, 4, 1, 1), None);
        assert_eq!(conv_transpose_output_size(1, 4, 2, 1), Some(2));
        assert_eq!(conv_transpose_output_size(32, 4, 2, 1), Some(64));
    }

    #[test]
    fn conv_gradients() {
        let inputs = vec![random_tensor(&[2, 3, 6, 6], 6), random_tensor(&[4, 3, 4, 4], 7)];
        let report = check_gradients(&inputs, 1e-6, |tape, v| weighted_sum(tape, v[0].conv2d(v[1], 2, 1), 2));
        assert!(report.max_rel_error < 1e-7, "{report:?}");
        let report = check_gradients(&inputs, 1e-6, |tape, v| weighted_sum(tape, v[0].conv2d(v[1], 1, 1), 2));
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn conv_transpose_gradients() {
        let inputs = vec![random_tensor(&[2, 3, 3, 3], 8), random_tensor(&[2, 3, 4, 4], 9)];
        let report = check_gradients(&inputs, 1e-6, |tape, v| {
            weighted_sum(tape, v[0].conv_transpose2d(v[1], 2, 1), 4)
        });
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }
}
