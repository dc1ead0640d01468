//! Differentiable primitives.
//!
//! Every VJP here is written in terms of other primitives, so the graph
//! produced by [`crate::grad`] is itself differentiable. Broadcast and
//! reduction ops come in adjoint pairs; the conv trio reuses the adjoint
//! identities of the bilinear map (see `kernels`).

use crate::kernels;
use crate::var::Var;
use ndarray::{ArrayD, Ix2, Ix4, IxDyn};

fn same_shape(a: &Var, b: &Var) {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

pub fn add(a: &Var, b: &Var) -> Var {
    same_shape(a, b);
    let data = a.data() + b.data();
    Var::from_op(data, vec![a.clone(), b.clone()], Box::new(|_, g| {
        vec![Some(g.clone()), Some(g.clone())]
    }))
}

pub fn sub(a: &Var, b: &Var) -> Var {
    same_shape(a, b);
    let data = a.data() - b.data();
    Var::from_op(data, vec![a.clone(), b.clone()], Box::new(|_, g| {
        vec![Some(g.clone()), Some(neg(g))]
    }))
}

pub fn mul(a: &Var, b: &Var) -> Var {
    same_shape(a, b);
    let data = a.data() * b.data();
    Var::from_op(data, vec![a.clone(), b.clone()], Box::new(|node, g| {
        let (a, b) = (&node.0.parents[0], &node.0.parents[1]);
        vec![Some(mul(g, b)), Some(mul(g, a))]
    }))
}

pub fn neg(a: &Var) -> Var {
    let data = a.data().mapv(|v| -v);
    Var::from_op(data, vec![a.clone()], Box::new(|_, g| vec![Some(neg(g))]))
}

pub fn scale(a: &Var, c: f64) -> Var {
    let data = a.data().mapv(|v| v * c);
    Var::from_op(data, vec![a.clone()], Box::new(move |_, g| {
        vec![Some(scale(g, c))]
    }))
}

pub fn add_scalar(a: &Var, c: f64) -> Var {
    let data = a.data().mapv(|v| v + c);
    Var::from_op(data, vec![a.clone()], Box::new(|_, g| vec![Some(g.clone())]))
}

/// Elementwise product with a fixed array (treated as a constant).
pub fn mul_const(a: &Var, mask: ArrayD<f64>) -> Var {
    assert_eq!(a.shape(), mask.shape());
    let data = a.data() * &mask;
    Var::from_op(data, vec![a.clone()], Box::new(move |_, g| {
        vec![Some(mul_const(g, mask.clone()))]
    }))
}

pub fn recip(a: &Var) -> Var {
    let data = a.data().mapv(|v| 1.0 / v);
    Var::from_op(data, vec![a.clone()], Box::new(|node, g| {
        // d(1/x) = -g * y^2 with y the op output
        let y2 = mul(node, node);
        vec![Some(neg(&mul(g, &y2)))]
    }))
}

pub fn log(a: &Var) -> Var {
    let data = a.data().mapv(f64::ln);
    Var::from_op(data, vec![a.clone()], Box::new(|node, g| {
        vec![Some(mul(g, &recip(&node.0.parents[0])))]
    }))
}

pub fn relu(a: &Var) -> Var {
    let data = a.data().mapv(|v| v.max(0.0));
    let mask = a.data().mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    Var::from_op(data, vec![a.clone()], Box::new(move |_, g| {
        vec![Some(mul_const(g, mask.clone()))]
    }))
}

pub fn sigmoid(a: &Var) -> Var {
    let data = a.data().mapv(|v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    });
    Var::from_op(data, vec![a.clone()], Box::new(|node, g| {
        // g * y * (1 - y), with y the sigmoid output so curvature is kept
        let one_minus = add_scalar(&neg(node), 1.0);
        vec![Some(mul(&mul(g, node), &one_minus))]
    }))
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(a: &Var) -> Var {
    let data = a.data().mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
    Var::from_op(data, vec![a.clone()], Box::new(|node, g| {
        vec![Some(mul(g, &sigmoid(&node.0.parents[0])))]
    }))
}

// ---------------------------------------------------------------------------
// reductions and broadcasts (adjoint pairs)
// ---------------------------------------------------------------------------

/// Sum of all elements, producing a rank-0 tensor.
pub fn sum_all(a: &Var) -> Var {
    let total: f64 = a.data().iter().sum();
    let data = ArrayD::from_elem(IxDyn(&[]), total);
    Var::from_op(data, vec![a.clone()], Box::new(|node, g| {
        let shape = node.0.parents[0].shape().to_vec();
        vec![Some(expand_scalar(g, &shape))]
    }))
}

/// Broadcast a rank-0 tensor to `shape`.
pub fn expand_scalar(a: &Var, shape: &[usize]) -> Var {
    assert_eq!(a.len(), 1);
    let v = a.item();
    let data = ArrayD::from_elem(IxDyn(shape), v);
    Var::from_op(data, vec![a.clone()], Box::new(|_, g| vec![Some(sum_all(g))]))
}

pub fn mean_all(a: &Var) -> Var {
    let n = a.len().max(1) as f64;
    scale(&sum_all(a), 1.0 / n)
}

/// Sum an NCHW tensor over (N, H, W), producing `[C]`.
pub fn sum_to_c(a: &Var) -> Var {
    let x = a.data().view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = x.dim();
    let mut out = ndarray::Array1::<f64>::zeros(c);
    for ni in 0..n {
        for ci in 0..c {
            out[ci] += x.index_axis(ndarray::Axis(0), ni)
                .index_axis(ndarray::Axis(0), ci)
                .sum();
        }
    }
    let _ = (h, w);
    Var::from_op(out.into_dyn(), vec![a.clone()], Box::new(|node, g| {
        let s = node.0.parents[0].shape();
        let (n, h, w) = (s[0], s[2], s[3]);
        vec![Some(expand_c(g, n, h, w))]
    }))
}

/// Broadcast `[C]` to `[N, C, H, W]`.
pub fn expand_c(a: &Var, n: usize, h: usize, w: usize) -> Var {
    let c = a.len();
    let v = a.data();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
    {
        let slice = out.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let val = v[[ci]];
                let base = (ni * c + ci) * h * w;
                slice[base..base + h * w].fill(val);
            }
        }
    }
    Var::from_op(out, vec![a.clone()], Box::new(|_, g| vec![Some(sum_to_c(g))]))
}

/// Sum an NCHW tensor over (H, W), producing `[N, C]`.
pub fn sum_to_nc(a: &Var) -> Var {
    let x = a.data().view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, _, _) = x.dim();
    let mut out = ndarray::Array2::<f64>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            out[[ni, ci]] = x.index_axis(ndarray::Axis(0), ni)
                .index_axis(ndarray::Axis(0), ci)
                .sum();
        }
    }
    Var::from_op(out.into_dyn(), vec![a.clone()], Box::new(|node, g| {
        let s = node.0.parents[0].shape();
        vec![Some(expand_nc(g, s[2], s[3]))]
    }))
}

/// Broadcast `[N, C]` to `[N, C, H, W]`.
pub fn expand_nc(a: &Var, h: usize, w: usize) -> Var {
    let s = a.shape();
    assert_eq!(s.len(), 2);
    let (n, c) = (s[0], s[1]);
    let v = a.data();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
    {
        let slice = out.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let val = v[[ni, ci]];
                let base = (ni * c + ci) * h * w;
                slice[base..base + h * w].fill(val);
            }
        }
    }
    Var::from_op(out, vec![a.clone()], Box::new(|_, g| vec![Some(sum_to_nc(g))]))
}

/// Sum `[M, F]` over rows, producing `[F]`.
pub fn sum_rows(a: &Var) -> Var {
    let x = a.data().view().into_dimensionality::<Ix2>().unwrap();
    let out = x.sum_axis(ndarray::Axis(0));
    Var::from_op(out.into_dyn(), vec![a.clone()], Box::new(|node, g| {
        let m = node.0.parents[0].shape()[0];
        vec![Some(expand_rows(g, m))]
    }))
}

/// Broadcast `[F]` to `[M, F]`.
pub fn expand_rows(a: &Var, m: usize) -> Var {
    let f = a.len();
    let row = a.data().view().into_shape_with_order(f).unwrap();
    let out = ndarray::Array2::from_shape_fn((m, f), |(_, j)| row[j]);
    Var::from_op(out.into_dyn(), vec![a.clone()], Box::new(|_, g| {
        vec![Some(sum_rows(g))]
    }))
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

pub fn matmul(a: &Var, b: &Var) -> Var {
    let av = a.data().view().into_dimensionality::<Ix2>().expect("matmul lhs rank");
    let bv = b.data().view().into_dimensionality::<Ix2>().expect("matmul rhs rank");
    let data = kernels::matmul(av, bv);
    Var::from_op(data.into_dyn(), vec![a.clone(), b.clone()], Box::new(|node, g| {
        let (a, b) = (&node.0.parents[0], &node.0.parents[1]);
        vec![
            Some(matmul(g, &transpose(b))),
            Some(matmul(&transpose(a), g)),
        ]
    }))
}

pub fn transpose(a: &Var) -> Var {
    let av = a.data().view().into_dimensionality::<Ix2>().expect("transpose rank");
    let data = av.t().as_standard_layout().to_owned();
    Var::from_op(data.into_dyn(), vec![a.clone()], Box::new(|_, g| {
        vec![Some(transpose(g))]
    }))
}

pub fn reshape(a: &Var, shape: &[usize]) -> Var {
    let data = a
        .data()
        .clone()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape size mismatch");
    Var::from_op(data, vec![a.clone()], Box::new(|node, g| {
        let orig = node.0.parents[0].shape().to_vec();
        vec![Some(reshape(g, &orig))]
    }))
}

// ---------------------------------------------------------------------------
// convolution trio
// ---------------------------------------------------------------------------

fn as4(v: &Var) -> ndarray::ArrayView4<'_, f64> {
    v.data().view().into_dimensionality::<Ix4>().expect("rank-4 tensor")
}

/// 2-D convolution, NCHW x OIKK.
pub fn conv2d(x: &Var, w: &Var, stride: usize, pad: usize) -> Var {
    let data = kernels::conv2d(as4(x), as4(w), stride, pad);
    Var::from_op(
        data.into_dyn(),
        vec![x.clone(), w.clone()],
        Box::new(move |node, g| {
            let (x, w) = (&node.0.parents[0], &node.0.parents[1]);
            let (h, wd) = (x.shape()[2], x.shape()[3]);
            let (kh, kw) = (w.shape()[2], w.shape()[3]);
            vec![
                Some(conv2d_input_grad(g, w, stride, pad, h, wd)),
                Some(conv2d_weight_grad(x, g, stride, pad, kh, kw)),
            ]
        }),
    )
}

/// Adjoint of [`conv2d`] in the input; itself differentiable.
pub fn conv2d_input_grad(
    g: &Var,
    w: &Var,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
) -> Var {
    let data = kernels::conv2d_input_grad(as4(g), as4(w), stride, pad, in_h, in_w);
    Var::from_op(
        data.into_dyn(),
        vec![g.clone(), w.clone()],
        Box::new(move |node, u| {
            let (g, w) = (&node.0.parents[0], &node.0.parents[1]);
            let (kh, kw) = (w.shape()[2], w.shape()[3]);
            vec![
                Some(conv2d(u, w, stride, pad)),
                Some(conv2d_weight_grad(u, g, stride, pad, kh, kw)),
            ]
        }),
    )
}

/// Adjoint of [`conv2d`] in the weights; itself differentiable.
pub fn conv2d_weight_grad(
    x: &Var,
    g: &Var,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Var {
    let data = kernels::conv2d_weight_grad(as4(x), as4(g), stride, pad, kh, kw);
    Var::from_op(
        data.into_dyn(),
        vec![x.clone(), g.clone()],
        Box::new(move |node, v| {
            let (x, g) = (&node.0.parents[0], &node.0.parents[1]);
            let (h, w) = (x.shape()[2], x.shape()[3]);
            vec![
                Some(conv2d_input_grad(g, v, stride, pad, h, w)),
                Some(conv2d(x, v, stride, pad)),
            ]
        }),
    )
}

// ---------------------------------------------------------------------------
// composites
// ---------------------------------------------------------------------------

/// Per-channel bias add on NCHW.
pub fn bias_nchw(x: &Var, b: &Var) -> Var {
    let s = x.shape();
    add(x, &expand_c(b, s[0], s[2], s[3]))
}

/// Per-(sample, channel) affine `x * (1 + s) + t` on NCHW.
pub fn affine_nc(x: &Var, s: &Var, t: &Var) -> Var {
    let sh = x.shape();
    let (h, w) = (sh[2], sh[3]);
    let scale = expand_nc(&add_scalar(s, 1.0), h, w);
    add(&mul(x, &scale), &expand_nc(t, h, w))
}

/// Mean of elementwise squared difference.
pub fn mse(a: &Var, b: &Var) -> Var {
    let d = sub(a, b);
    mean_all(&mul(&d, &d))
}

/// Sum of squares of all elements.
pub fn sum_sq(a: &Var) -> Var {
    sum_all(&mul(a, a))
}
