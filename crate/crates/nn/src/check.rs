//! Finite-difference oracles used by tests across the workspace.

use ndarray::ArrayD;

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut g = ArrayD::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = xp.as_slice_mut().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + h;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - h;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central-difference gradient at a subset of coordinates.
pub fn finite_diff_grad_at<F>(mut f: F, x: &ArrayD<f64>, h: f64, coords: &[usize]) -> Vec<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut out = Vec::with_capacity(coords.len());
    let mut xp = x.clone();
    for &idx in coords {
        let orig = xp.as_slice_mut().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + h;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - h;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Largest relative error between two gradients, with an absolute floor
/// so that near-zero components do not blow up the ratio.
pub fn max_rel_err(got: &[f64], want: &[f64], abs_floor: f64) -> f64 {
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g - w).abs() / w.abs().max(abs_floor))
        .fold(0.0, f64::max)
}
