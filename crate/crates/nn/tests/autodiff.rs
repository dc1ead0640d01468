//! Gradient correctness against central finite differences, including
//! second-order gradients of an input-gradient-norm penalty.

use grad_nn::check::{finite_diff_grad, max_rel_err};
use grad_nn::{grad, ops, Var};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || StandardNormal.sample(&mut rng))
}

/// Scalar test function mixing most primitives: conv -> relu -> conv ->
/// sigmoid -> weighted log terms and a matmul branch.
fn mixed_scalar(x: &Var, w1: &Var, w2: &Var, b: &Var, m: &Var) -> Var {
    let h1 = ops::relu(&ops::bias_nchw(&ops::conv2d(x, w1, 1, 1), b));
    let h2 = ops::sigmoid(&ops::conv2d(&h1, w2, 2, 0));
    let safe = ops::add_scalar(&ops::scale(&h2, 0.5), 0.25); // keep logs in range
    let t1 = ops::sum_all(&ops::log(&safe));
    let flat = ops::reshape(&h2, &[1, h2.len()]);
    let proj = ops::matmul(&flat, m);
    let t2 = ops::sum_sq(&ops::softplus(&proj));
    ops::add(&t1, &ops::scale(&t2, 0.1))
}

#[test]
fn first_order_matches_finite_differences() {
    let x0 = randn(&[1, 2, 8, 8], 1);
    let w1d = randn(&[3, 2, 3, 3], 2).mapv(|v| v * 0.4);
    let w2d = randn(&[2, 3, 4, 4], 3).mapv(|v| v * 0.4);
    let bd = randn(&[3], 4);
    let h2len = 2 * 3 * 3; // conv arithmetic: 8 -(k3s1p1)-> 8 -(k4s2)-> 3
    let md = randn(&[h2len, 4], 5).mapv(|v| v * 0.3);

    for (pi, pdata) in [&x0, &w1d, &w2d, &bd, &md].iter().enumerate() {
        let eval = |p: &ArrayD<f64>| -> f64 {
            let arrs: Vec<&ArrayD<f64>> = [&x0, &w1d, &w2d, &bd, &md]
                .iter()
                .enumerate()
                .map(|(i, a)| if i == pi { p } else { *a })
                .collect();
            let vars: Vec<Var> = arrs.iter().map(|a| Var::constant((*a).clone())).collect();
            mixed_scalar(&vars[0], &vars[1], &vars[2], &vars[3], &vars[4]).item()
        };
        let fd = finite_diff_grad(eval, pdata, 1e-5);

        let vars: Vec<Var> = [&x0, &w1d, &w2d, &bd, &md]
            .iter()
            .map(|a| Var::leaf((*a).clone()))
            .collect();
        let loss = mixed_scalar(&vars[0], &vars[1], &vars[2], &vars[3], &vars[4]);
        let g = grad(&loss, &[&vars[pi]]);
        let err = max_rel_err(
            g[0].data().as_slice().unwrap(),
            fd.as_slice().unwrap(),
            1e-6,
        );
        assert!(err < 1e-6, "param {pi}: max rel err {err}");
    }
}

/// d/dtheta of || d f / d x ||^2 must match finite differences of the
/// penalty itself over theta: the double-backward path through the conv
/// trio and sigmoid curvature.
#[test]
fn second_order_gradient_penalty_matches_finite_differences() {
    let xd = randn(&[2, 2, 6, 6], 10).mapv(|v| 0.5 * v);
    let w1d = randn(&[4, 2, 3, 3], 11).mapv(|v| 0.5 * v);
    let w2d = randn(&[1, 4, 2, 2], 12).mapv(|v| 0.5 * v);

    let penalty = |w1a: &ArrayD<f64>, w2a: &ArrayD<f64>, create: bool| -> (f64, Option<(Var, Var)>) {
        let x = Var::leaf(xd.clone());
        let w1 = Var::leaf(w1a.clone());
        let w2 = Var::leaf(w2a.clone());
        // f: mean sigmoid score over batch; conv(k3,s1) -> relu -> conv(k2,s2)
        let h = ops::relu(&ops::conv2d(&x, &w1, 1, 0));
        let y = ops::sigmoid(&ops::conv2d(&h, &w2, 2, 0));
        let f = ops::sum_all(&y);
        let gx = grad(&f, &[&x]).remove(0);
        let pen = ops::sum_sq(&gx);
        if create {
            (pen.item(), Some((ops::scale(&pen, 1.0), w1)).map(|(p, w1)| {
                let gs = grad(&p, &[&w1, &w2]);
                (gs[0].clone(), gs[1].clone())
            }))
        } else {
            (pen.item(), None)
        }
    };

    let (_, grads) = penalty(&w1d, &w2d, true);
    let (gw1, gw2) = grads.unwrap();

    let fd_w1 = finite_diff_grad(|p| penalty(p, &w2d, false).0, &w1d, 1e-5);
    let fd_w2 = finite_diff_grad(|p| penalty(&w1d, p, false).0, &w2d, 1e-5);

    let e1 = max_rel_err(gw1.data().as_slice().unwrap(), fd_w1.as_slice().unwrap(), 1e-5);
    let e2 = max_rel_err(gw2.data().as_slice().unwrap(), fd_w2.as_slice().unwrap(), 1e-5);
    assert!(e1 < 1e-5, "w1 second-order max rel err {e1}");
    assert!(e2 < 1e-5, "w2 second-order max rel err {e2}");
}

#[test]
fn gradient_accumulates_over_shared_nodes() {
    // y = x*x + x => dy/dx = 2x + 1
    let x = Var::leaf(ArrayD::from_elem(IxDyn(&[3]), 2.0));
    let y = ops::sum_all(&ops::add(&ops::mul(&x, &x), &x));
    let g = grad(&y, &[&x]).remove(0);
    for v in g.data().iter() {
        assert!((v - 5.0).abs() < 1e-12);
    }
}

#[test]
fn constants_block_gradient_flow() {
    let x = Var::leaf(randn(&[4], 20));
    let c = Var::constant(randn(&[4], 21));
    let y = ops::sum_all(&ops::mul(&x, &c));
    let g = grad(&y, &[&x, &c]);
    assert_eq!(g[0].data().as_slice().unwrap(), c.data().as_slice().unwrap());
    assert!(g[1].data().iter().all(|v| *v == 0.0));
}

#[test]
fn broadcast_reduce_adjoint_pairs() {
    // <expand(v), g> == <v, reduce(g)> for the channel pair
    let v = randn(&[3], 30);
    let g = randn(&[2, 3, 4, 5], 31);
    let vv = Var::constant(v.clone());
    let exp = ops::expand_c(&vv, 2, 4, 5);
    let lhs: f64 = exp.data().iter().zip(g.iter()).map(|(a, b)| a * b).sum();
    let gv = Var::constant(g);
    let red = ops::sum_to_c(&gv);
    let rhs: f64 = red.data().iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10);
}
