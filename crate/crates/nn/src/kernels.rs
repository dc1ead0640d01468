//! CPU kernels for 2-D convolution and its two adjoints.
//!
//! Everything is f64, NCHW layout, square-free (kh/kw independent).
//! `conv2d` is the forward map, `conv2d_input_grad` its adjoint in the
//! input argument, `conv2d_weight_grad` its adjoint in the weight
//! argument. The three maps are mutually closed under differentiation,
//! which is what makes higher-order autodiff over conv nets possible.

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};
use rayon::prelude::*;

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    debug_assert!(input + 2 * pad >= kernel);
    (input + 2 * pad - kernel) / stride + 1
}

/// Parallel GEMM `out = a * b` chunked over columns of `b`.
fn matmul_into(a: ArrayView2<f64>, b: ArrayView2<f64>, out: &mut Array2<f64>) {
    let n = b.ncols();
    let threads = rayon::current_num_threads().max(1);
    let work = a.nrows() * a.ncols() * n;
    if threads < 2 || work < (1 << 18) || n < 2 * threads {
        ndarray::linalg::general_mat_mul(1.0, &a, &b, 0.0, out);
        return;
    }
    let chunk = n.div_ceil(threads);
    let b_chunks: Vec<_> = b.axis_chunks_iter(Axis(1), chunk).collect();
    let out_chunks: Vec<_> = out.axis_chunks_iter_mut(Axis(1), chunk).collect();
    b_chunks
        .into_par_iter()
        .zip(out_chunks)
        .for_each(|(bc, mut oc)| {
            ndarray::linalg::general_mat_mul(1.0, &a, &bc, 0.0, &mut oc);
        });
}

/// Plain parallel matmul, allocating the output.
pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.nrows(), "matmul inner dims");
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    matmul_into(a, b, &mut out);
    out
}

/// Lay out image patches as a `(C*kh*kw, N*oh*ow)` matrix.
///
/// Row `(c, ky, kx)`, column `(n, oy, ox)` holds
/// `x[n, c, oy*stride + ky - pad, ox*stride + kx - pad]` (zero outside).
fn im2col(
    x: ArrayView4<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * kh * kw, n * oh * ow));
    let xs = x.as_slice().expect("im2col expects standard layout");
    let col_w = n * oh * ow;
    let rows: Vec<(usize, &mut [f64])> = {
        let s = cols.as_slice_mut().unwrap();
        s.chunks_mut(col_w).enumerate().collect()
    };
    rows.into_par_iter().for_each(|(row, dst)| {
        let kx = row % kw;
        let ky = (row / kw) % kh;
        let ch = row / (kh * kw);
        for ni in 0..n {
            let x_plane = &xs[(ni * c + ch) * h * w..(ni * c + ch + 1) * h * w];
            for oy in 0..oh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                let dst_row = &mut dst[(ni * oh + oy) * ow..(ni * oh + oy + 1) * ow];
                if iy < 0 || iy >= h as isize {
                    continue; // zeros already in place
                }
                let src_row = &x_plane[iy as usize * w..(iy as usize + 1) * w];
                if stride == 1 {
                    // contiguous span, clipped at the borders
                    let ix0 = kx as isize - pad as isize;
                    let o_lo = (-ix0).max(0) as usize;
                    let o_hi = ow.min(((w as isize) - ix0).max(0) as usize);
                    if o_lo < o_hi {
                        dst_row[o_lo..o_hi].copy_from_slice(
                            &src_row[(o_lo as isize + ix0) as usize
                                ..(o_hi as isize + ix0) as usize],
                        );
                    }
                } else {
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    });
    cols
}

/// Adjoint of `im2col`: scatter-add columns back into an image.
fn col2im(
    cols: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<f64> {
    let mut x = Array4::<f64>::zeros((n, c, h, w));
    let cs = cols.as_slice().expect("col2im expects standard layout");
    let col_w = n * oh * ow;
    let planes: Vec<(usize, &mut [f64])> = {
        let s = x.as_slice_mut().unwrap();
        s.chunks_mut(h * w).enumerate().collect()
    };
    // parallel over (n, c) planes; each plane only reads rows of its own channel
    planes.into_par_iter().for_each(|(plane, dst)| {
        let ch = plane % c;
        let ni = plane / c;
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let src = &cs[row * col_w..(row + 1) * col_w];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &src[(ni * oh + oy) * ow..(ni * oh + oy) * ow + ow];
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src_row[ox];
                        }
                    }
                }
            }
        }
    });
    x
}

/// `y[n,o,oy,ox] = sum_{c,ky,kx} x[n,c,oy*s+ky-p,ox*s+kx-p] * w[o,c,ky,kx]`
pub fn conv2d(x: ArrayView4<f64>, wgt: ArrayView4<f64>, stride: usize, pad: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (o, cw, kh, kw) = wgt.dim();
    assert_eq!(c, cw, "conv2d channel mismatch");
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let cols = im2col(x, kh, kw, stride, pad, oh, ow);
    let wmat = wgt.into_shape_with_order((o, c * kh * kw)).unwrap();
    let out = matmul(wmat.view(), cols.view()); // (o, n*oh*ow)
    // (o, n, oh, ow) -> (n, o, oh, ow)
    let out4 = out.into_shape_with_order((o, n, oh, ow)).unwrap();
    let mut y = Array4::<f64>::zeros((n, o, oh, ow));
    y.axis_iter_mut(Axis(0))
        .enumerate()
        .for_each(|(ni, mut yn)| yn.assign(&out4.index_axis(Axis(1), ni)));
    y
}

/// Adjoint of `conv2d` in `x`: maps an output cotangent `g` back to input space.
pub fn conv2d_input_grad(
    g: ArrayView4<f64>,
    wgt: ArrayView4<f64>,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
) -> Array4<f64> {
    let (n, o, oh, ow) = g.dim();
    let (ow_, c, kh, kw) = wgt.dim();
    assert_eq!(o, ow_, "conv2d_input_grad out-channel mismatch");
    debug_assert_eq!(oh, conv_out_len(in_h, kh, stride, pad));
    debug_assert_eq!(ow, conv_out_len(in_w, kw, stride, pad));
    // g as (o, n*oh*ow)
    let mut gmat = Array2::<f64>::zeros((o, n * oh * ow));
    for ni in 0..n {
        for oc in 0..o {
            let src = g.index_axis(Axis(0), ni);
            let src = src.index_axis(Axis(0), oc);
            let dst = &mut gmat.as_slice_mut().unwrap()
                [oc * n * oh * ow + ni * oh * ow..oc * n * oh * ow + (ni + 1) * oh * ow];
            dst.copy_from_slice(src.as_slice().unwrap());
        }
    }
    let wmat = wgt.into_shape_with_order((o, c * kh * kw)).unwrap();
    let cols = matmul(wmat.t(), gmat.view()); // (c*kh*kw, n*oh*ow)
    col2im(&cols, n, c, in_h, in_w, kh, kw, stride, pad, oh, ow)
}

/// Adjoint of `conv2d` in the weights: correlates input with an output cotangent.
pub fn conv2d_weight_grad(
    x: ArrayView4<f64>,
    g: ArrayView4<f64>,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (ng, o, oh, ow) = g.dim();
    assert_eq!(n, ng, "conv2d_weight_grad batch mismatch");
    debug_assert_eq!(oh, conv_out_len(h, kh, stride, pad));
    debug_assert_eq!(ow, conv_out_len(w, kw, stride, pad));
    let cols = im2col(x, kh, kw, stride, pad, oh, ow); // (c*kh*kw, n*oh*ow)
    let mut gmat = Array2::<f64>::zeros((o, n * oh * ow));
    for ni in 0..n {
        for oc in 0..o {
            let src = g.index_axis(Axis(0), ni);
            let src = src.index_axis(Axis(0), oc);
            gmat.as_slice_mut().unwrap()
                [oc * n * oh * ow + ni * oh * ow..oc * n * oh * ow + (ni + 1) * oh * ow]
                .copy_from_slice(src.as_slice().unwrap());
        }
    }
    let dw = matmul(gmat.view(), cols.t()); // (o, c*kh*kw)
    dw.into_shape_with_order((o, c, kh, kw)).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
    }

    fn conv2d_naive(
        x: &Array4<f64>,
        wgt: &Array4<f64>,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (o, _, kh, kw) = wgt.dim();
        let oh = conv_out_len(h, kh, stride, pad);
        let ow = conv_out_len(w, kw, stride, pad);
        let mut y = Array4::<f64>::zeros((n, o, oh, ow));
        for ni in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += x[[ni, ch, iy as usize, ix as usize]]
                                            * wgt[[oc, ch, ky, kx]];
                                    }
                                }
                            }
                        }
                        y[[ni, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    fn dot4(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv2d_matches_naive_reference() {
        for (seed, (shape, k, s, p)) in [
            (((2, 3, 9, 8), 3, 1, 1), 0u64),
            (((1, 5, 34, 34), 4, 2, 0), 1),
            (((2, 4, 7, 7), 1, 1, 0), 2),
            (((1, 2, 11, 13), 3, 2, 1), 3),
        ]
        .iter()
        .map(|(cfg, s)| (*s, *cfg))
        {
            let x = randn4(shape, seed);
            let w = randn4((6, shape.1, k, k), seed + 100);
            let got = conv2d(x.view(), w.view(), s, p);
            let want = conv2d_naive(&x, &w, s, p);
            let err = (&got - &want).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "max err {err} for k={k} s={s} p={p}");
        }
    }

    #[test]
    fn adjoint_identities_hold() {
        // <C(x,w), g> == <x, Bx(g,w)> == <w, Bw(x,g)>
        for (i, &(k, s, p)) in [(3usize, 1usize, 1usize), (4, 2, 0), (1, 1, 0), (3, 2, 1)]
            .iter()
            .enumerate()
        {
            let x = randn4((2, 3, 10, 9), 40 + i as u64);
            let w = randn4((5, 3, k, k), 80 + i as u64);
            let y = conv2d(x.view(), w.view(), s, p);
            let g = randn4(y.dim(), 120 + i as u64);
            let lhs = dot4(&y, &g);
            let bx = conv2d_input_grad(g.view(), w.view(), s, p, 10, 9);
            let bw = conv2d_weight_grad(x.view(), g.view(), s, p, k, k);
            let mid = dot4(&x, &bx);
            let rhs = dot4(&w, &bw);
            assert!((lhs - mid).abs() < 1e-9 * lhs.abs().max(1.0), "Bx adjoint");
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "Bw adjoint");
        }
    }

    #[test]
    fn conv_out_len_composition_for_detector_sizes() {
        // 34 -> 16 -> 7 -> 5 -> 3 -> 1 and 256 -> 127 -> 62 -> 60 -> 58 -> 56
        let chain = |mut v: usize| {
            for (k, s) in [(4, 2), (4, 2), (3, 1), (3, 1), (3, 1)] {
                v = conv_out_len(v, k, s, 0);
            }
            v
        };
        assert_eq!(chain(34), 1);
        assert_eq!(chain(256), 56);
        assert_eq!(chain(64), 8);
        assert_eq!(chain(128), 24);
    }
}
