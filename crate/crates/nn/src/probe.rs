//! Empirical receptive-field measurement by single-pixel perturbation.
//!
//! A network with receptive field `n` and output stride `s` maps output
//! location `o` to the input window `[o*s, o*s + n)`. The probe perturbs
//! pixels around a target output's expected window and records which
//! perturbations change that output value at all (exact f64 comparison):
//! pixels outside the window must leave it bit-identical, pixels on the
//! window boundary and along the center cross must change it.

use ndarray::{Array4, Axis};

#[derive(Debug, Clone)]
pub struct RfReport {
    pub expected_rf: usize,
    pub measured_rf_h: usize,
    pub measured_rf_w: usize,
    pub expected_stride: usize,
    pub measured_stride: Option<usize>,
    pub failures: Vec<String>,
}

impl RfReport {
    pub fn is_pass(&self) -> bool {
        self.failures.is_empty()
            && self.measured_rf_h == self.expected_rf
            && self.measured_rf_w == self.expected_rf
            && self.measured_stride.map(|s| s == self.expected_stride).unwrap_or(false)
    }
}

fn base_input(channels: usize, h: usize, w: usize) -> Array4<f64> {
    // deterministic positive texture; an LCG keeps the probe dependency-free
    let mut state: u64 = 0x9e3779b97f4a7c15;
    Array4::from_shape_simple_fn((1, channels, h, w), move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        0.25 + 0.75 * ((state >> 11) as f64 / (1u64 << 53) as f64)
    })
}

/// True if perturbing `(py, px)` on channel 0 changes output `(oy, ox)`.
/// Evaluates perturbations in batched chunks through `forward`.
fn probe_pixels<F>(
    forward: &F,
    base: &Array4<f64>,
    base_out: f64,
    target: (usize, usize, usize),
    pixels: &[(usize, usize)],
    delta: f64,
) -> Vec<bool>
where
    F: Fn(&Array4<f64>) -> Array4<f64>,
{
    let (_, c, h, w) = base.dim();
    let (oc, oy, ox) = target;
    let mut changed = vec![false; pixels.len()];
    for sign in [delta, -delta] {
        for (chunk_idx, chunk) in pixels.chunks(64).enumerate() {
            let mut batch = Array4::zeros((chunk.len(), c, h, w));
            for (bi, &(py, px)) in chunk.iter().enumerate() {
                let mut sample = batch.index_axis_mut(Axis(0), bi);
                sample.assign(&base.index_axis(Axis(0), 0));
                sample[[0, py, px]] += sign;
            }
            let out = forward(&batch);
            for bi in 0..chunk.len() {
                if out[[bi, oc, oy, ox]] != base_out {
                    changed[chunk_idx * 64 + bi] = true;
                }
            }
        }
    }
    changed
}

/// Measure the receptive field of `forward` (batched NCHW -> NCHW map).
pub fn probe_receptive_field<F>(
    forward: F,
    channels: usize,
    expected_rf: usize,
    expected_stride: usize,
) -> RfReport
where
    F: Fn(&Array4<f64>) -> Array4<f64>,
{
    let n = expected_rf;
    let s = expected_stride;
    let hw = n + 2 * s + 2; // at least 3 output positions per axis
    let base = base_input(channels, hw, hw);
    let out = forward(&base);
    let (_, _, oh, ow) = out.dim();
    assert!(oh >= 3 && ow >= 3, "probe input too small for this network");
    let (oy, ox) = (1, 1);
    let base_val = out[[0, 0, oy, ox]];
    let (wy, wx) = (oy * s, ox * s); // expected window origin
    let delta = 8.0;

    let mut failures = Vec::new();

    // pixels to test: center cross inside the window, the outermost inside
    // ring (Chebyshev distance floor(n/2) from the window center), and the
    // first ring outside the window.
    let mut inside = Vec::new();
    let cy = wy + n / 2;
    let cx = wx + n / 2;
    for iy in wy..wy + n {
        inside.push((iy, cx));
        inside.push((iy, wx));
        inside.push((iy, wx + n - 1));
    }
    for ix in wx..wx + n {
        inside.push((cy, ix));
        inside.push((wy, ix));
        inside.push((wy + n - 1, ix));
    }
    inside.sort_unstable();
    inside.dedup();

    let mut outside = Vec::new();
    let lo_y = wy.checked_sub(1);
    let lo_x = wx.checked_sub(1);
    for iy in wy.saturating_sub(1)..(wy + n + 1).min(hw) {
        if let Some(x) = lo_x {
            outside.push((iy, x));
        }
        if wx + n < hw {
            outside.push((iy, wx + n));
        }
    }
    for ix in wx.saturating_sub(1)..(wx + n + 1).min(hw) {
        if let Some(y) = lo_y {
            outside.push((y, ix));
        }
        if wy + n < hw {
            outside.push((wy + n, ix));
        }
    }
    outside.sort_unstable();
    outside.dedup();

    let in_changed = probe_pixels(&forward, &base, base_val, (0, oy, ox), &inside, delta);
    for (&(py, px), ch) in inside.iter().zip(&in_changed) {
        if !ch {
            failures.push(format!("inside pixel ({py},{px}) left output unchanged"));
        }
    }
    let out_changed = probe_pixels(&forward, &base, base_val, (0, oy, ox), &outside, delta);
    for (&(py, px), ch) in outside.iter().zip(&out_changed) {
        if *ch {
            failures.push(format!("outside pixel ({py},{px}) changed the output"));
        }
    }

    // measured extent: scan along the center row/column across the window
    // plus its one-pixel margin
    let row_pixels: Vec<(usize, usize)> = (wx.saturating_sub(1)..(wx + n + 1).min(hw))
        .map(|ix| (cy, ix))
        .collect();
    let row_changed = probe_pixels(&forward, &base, base_val, (0, oy, ox), &row_pixels, delta);
    let col_pixels: Vec<(usize, usize)> = (wy.saturating_sub(1)..(wy + n + 1).min(hw))
        .map(|iy| (iy, cx))
        .collect();
    let col_changed = probe_pixels(&forward, &base, base_val, (0, oy, ox), &col_pixels, delta);
    let measured_rf_w = row_changed.iter().filter(|c| **c).count();
    let measured_rf_h = col_changed.iter().filter(|c| **c).count();

    // stride: the window of output (oy+1, ox) starts at (oy+1)*s, so the
    // first input row that influences it sits `stride` rows below wy.
    let probe_rows: Vec<(usize, usize)> = (wy..(wy + 2 * s + 1).min(hw)).map(|iy| (iy, cx)).collect();
    let next_val = out[[0, 0, oy + 1, ox]];
    let next_changed = probe_pixels(&forward, &base, next_val, (0, oy + 1, ox), &probe_rows, delta);
    let measured_stride = next_changed
        .iter()
        .position(|c| *c)
        .map(|first| probe_rows[first].0 - wy);

    if measured_rf_h != n || measured_rf_w != n {
        failures.push(format!(
            "measured rf {measured_rf_h}x{measured_rf_w}, expected {n}x{n}"
        ));
    }
    if measured_stride != Some(s) {
        failures.push(format!(
            "measured stride {measured_stride:?}, expected {s}"
        ));
    }

    RfReport {
        expected_rf: n,
        measured_rf_h,
        measured_rf_w,
        expected_stride: s,
        measured_stride,
        failures,
    }
}
