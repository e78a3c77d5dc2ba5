//! im2col-based 2-D convolution primitives on single images (CHW layout).
//!
//! Forward, backward-data and backward-filter are all expressed as one GEMM
//! plus an im2col/col2im copy, which keeps the arithmetic inside
//! `matrixmultiply`. Transposed convolution reuses the same pieces with the
//! roles of input and output swapped.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayView4};

/// Output spatial size for a conv with the given geometry.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output spatial size for a transposed conv (inverse of `conv_out_dim`).
pub fn conv_transpose_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Unfold `x` (C,H,W) into a (C*kh*kw, Ho*Wo) patch matrix.
pub fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let mut out_row = cols.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[oy * wo + ox] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a (C*kh*kw, Ho*Wo) patch matrix back into (C,H,W), accumulating
/// overlapping contributions. Adjoint of `im2col`.
pub fn col2im(
    cols: &ArrayView2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut x = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let in_row = cols.row(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[ci, iy as usize, ix as usize]] += in_row[oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}

fn filter_matrix(w: &ArrayView4<f64>) -> Array2<f64> {
    let (o, c, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    w.to_shape((o, c * kh * kw)).unwrap().to_owned()
}

/// y = conv(x, w) + b for one image. w: (O,C,kh,kw), b: (O).
pub fn conv2d(
    x: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    b: Option<&ArrayView1<f64>>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = conv_out_dim(x.shape()[1], kh, stride, pad);
    let wo = conv_out_dim(x.shape()[2], kw, stride, pad);
    let cols = im2col(x, kh, kw, stride, pad);
    let mut y = filter_matrix(w).dot(&cols);
    if let Some(b) = b {
        for (mut row, &bv) in y.rows_mut().into_iter().zip(b.iter()) {
            row += bv;
        }
    }
    y.into_shape_with_order((o, ho, wo)).unwrap()
}

/// Gradient of the conv output w.r.t. its input: gx = conv_backward_data(gy, w).
pub fn conv2d_backward_data(
    gy: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    in_h: usize,
    in_w: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (o, c, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let gy_mat = gy.to_shape((o, gy.shape()[1] * gy.shape()[2])).unwrap();
    let gcols = filter_matrix(w).t().dot(&gy_mat);
    col2im(&gcols.view(), c, in_h, in_w, kh, kw, stride, pad)
}

/// Gradient w.r.t. the filter: gw = gy * im2col(x)^T, reshaped to (O,C,kh,kw).
pub fn conv2d_backward_filter(
    x: &ArrayView3<f64>,
    gy: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array4<f64> {
    let c = x.shape()[0];
    let o = gy.shape()[0];
    let cols = im2col(x, kh, kw, stride, pad);
    let gy_mat = gy.to_shape((o, gy.shape()[1] * gy.shape()[2])).unwrap();
    let gw = gy_mat.dot(&cols.t());
    gw.into_shape_with_order((o, c, kh, kw)).unwrap()
}

/// Gradient w.r.t. the bias: spatial sum of gy per output channel.
pub fn conv2d_backward_bias(gy: &ArrayView3<f64>) -> Array1<f64> {
    let o = gy.shape()[0];
    let gy_mat = gy.to_shape((o, gy.shape()[1] * gy.shape()[2])).unwrap();
    gy_mat.sum_axis(ndarray::Axis(1))
}

/// Transposed convolution for one image. w: (C,O,kh,kw) (input-major), b: (O).
pub fn conv_transpose2d(
    x: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    b: Option<&ArrayView1<f64>>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (c, o, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (h, wid) = (x.shape()[1], x.shape()[2]);
    let ho = conv_transpose_out_dim(h, kh, stride, pad);
    let wo = conv_transpose_out_dim(wid, kw, stride, pad);
    let w_mat = w.to_shape((c, o * kh * kw)).unwrap().to_owned();
    let x_mat = x.to_shape((c, h * wid)).unwrap();
    let cols = w_mat.t().dot(&x_mat);
    let mut y = col2im(&cols.view(), o, ho, wo, kh, kw, stride, pad);
    if let Some(b) = b {
        for (mut plane, &bv) in y.outer_iter_mut().zip(b.iter()) {
            plane += bv;
        }
    }
    y
}

/// Gradient of the transposed conv w.r.t. its input: a plain conv of gy.
pub fn conv_transpose2d_backward_data(
    gy: &ArrayView3<f64>,
    w: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (c, o, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let cols = im2col(gy, kh, kw, stride, pad);
    let w_mat = w.to_shape((c, o * kh * kw)).unwrap().to_owned();
    let gx = w_mat.dot(&cols);
    let h = conv_out_dim(gy.shape()[1], kh, stride, pad);
    let wid = conv_out_dim(gy.shape()[2], kw, stride, pad);
    gx.into_shape_with_order((c, h, wid)).unwrap()
}

/// Gradient of the transposed conv w.r.t. the filter.
pub fn conv_transpose2d_backward_filter(
    x: &ArrayView3<f64>,
    gy: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array4<f64> {
    let c = x.shape()[0];
    let o = gy.shape()[0];
    let x_mat = x.to_shape((c, x.shape()[1] * x.shape()[2])).unwrap();
    let cols = im2col(gy, kh, kw, stride, pad);
    let gw = x_mat.dot(&cols.t());
    gw.into_shape_with_order((c, o, kh, kw)).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};

    fn seq3(c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |(a, b, d)| (a * h * w + b * w + d) as f64 * 0.1 - 1.0)
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = seq3(2, 5, 4);
        let w = Array4::from_shape_fn((3, 2, 3, 3), |(o, c, i, j)| {
            ((o + 2 * c + 3 * i + 5 * j) as f64).sin()
        });
        let b = ndarray::arr1(&[0.3, -0.1, 0.2]);
        let stride = 2;
        let pad = 1;
        let y = conv2d(&x.view(), &w.view(), Some(&b.view()), stride, pad);
        let (ho, wo) = (conv_out_dim(5, 3, stride, pad), conv_out_dim(4, 3, stride, pad));
        assert_eq!(y.shape(), &[3, ho, wo]);
        for o in 0..3 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < 5 && ix >= 0 && ix < 4 {
                                    acc += x[[c, iy as usize, ix as usize]] * w[[o, c, ky, kx]];
                                }
                            }
                        }
                    }
                    assert!((y[[o, oy, ox]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_T(y)> for bias-free maps with tied
        // weights, on a stride-exact geometry. The conv filter (O, C, kh, kw)
        // reinterprets directly as the transpose filter (C_in=O, Out=C, ...).
        let x = seq3(2, 7, 7);
        let w = Array4::from_shape_fn((3, 2, 3, 3), |(o, c, i, j)| {
            ((o + c + i + j) as f64 * 0.7).cos()
        });
        let y = conv2d(&x.view(), &w.view(), None, 2, 1);
        let g = Array3::from_shape_fn(
            (y.shape()[0], y.shape()[1], y.shape()[2]),
            |(a, b, c)| ((a + b + c) as f64).sin(),
        );
        let xt = conv_transpose2d(&g.view(), &w.view(), None, 2, 1);
        assert_eq!(xt.shape(), x.shape());
        let lhs: f64 = (&y * &g).sum();
        let rhs: f64 = (&x * &xt).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn backward_data_matches_finite_difference() {
        let x = seq3(1, 4, 4);
        let w = Array4::from_shape_fn((2, 1, 3, 3), |(o, _, i, j)| {
            ((o * 9 + i * 3 + j) as f64 * 0.3).sin()
        });
        let loss = |x: &Array3<f64>| conv2d(&x.view(), &w.view(), None, 1, 1).sum();
        let y = conv2d(&x.view(), &w.view(), None, 1, 1);
        let gy = Array3::ones((2, y.shape()[1], y.shape()[2]));
        let gx = conv2d_backward_data(&gy.view(), &w.view(), 4, 4, 1, 1);
        let h = 1e-6;
        for idx in [(0, 0, 0), (0, 1, 2), (0, 3, 3)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((gx[idx] - fd).abs() < 1e-6, "{:?}", idx);
        }
    }
}
