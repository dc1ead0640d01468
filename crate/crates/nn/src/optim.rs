//! Decoupled-weight-decay Adam and the one-cycle learning-rate schedule.

use ndarray::ArrayD;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW over a flat list of parameter tensors. Decay is decoupled:
/// it multiplies the parameter directly and never enters the moments.
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, param_shapes: &[&[usize]]) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: param_shapes.iter().map(|s| ArrayD::zeros(*s)).collect(),
            v: param_shapes.iter().map(|s| ArrayD::zeros(*s)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut ArrayD<f64>], grads: &[ArrayD<f64>], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "grad shape mismatch");
            ndarray::Zip::from(&mut **p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * *p);
                });
        }
    }
}

/// One-cycle schedule: linear warmup over the first `warmup_frac` of steps
/// to `peak`, then cosine anneal down to `peak / floor_div`.
#[derive(Debug, Clone)]
pub struct OneCycle {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
    pub floor_div: f64,
}

impl OneCycle {
    pub fn new(peak: f64, total_steps: usize) -> Self {
        OneCycle {
            peak,
            total_steps,
            warmup_frac: 0.1,
            floor_div: 100.0,
        }
    }

    /// Learning rate for 0-based step index.
    pub fn lr(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1);
        let warm = ((total as f64 * self.warmup_frac).ceil() as usize).max(1);
        if step < warm {
            return self.peak * (step + 1) as f64 / warm as f64;
        }
        let floor = self.peak / self.floor_div;
        let span = (total - warm).max(1) as f64;
        let p = ((step - warm) as f64 / span).min(1.0);
        floor + (self.peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn decoupled_decay_with_zero_grads() {
        // zero grads => moments stay zero => update is pure decay
        let mut p = ArrayD::from_elem(ndarray::IxDyn(&[4]), 2.0);
        let g = ArrayD::zeros(ndarray::IxDyn(&[4]));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.01, ..Default::default() }, &[&[4]]);
        opt.step(&mut [&mut p], &[g], 0.1);
        for v in p.iter() {
            assert!((v - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = ArrayD::from_elem(ndarray::IxDyn(&[1]), 0.0);
        let g = ArrayD::from_elem(ndarray::IxDyn(&[1]), 3.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &[&[1]]);
        opt.step(&mut [&mut p], &[g], 0.5);
        // bias-corrected first step moves by ~lr in the gradient direction
        assert!(p[[0]] < -0.49 && p[[0]] > -0.51, "got {}", p[[0]]);
    }

    #[test]
    fn one_cycle_shape() {
        let sch = OneCycle::new(1e-3, 100);
        // warmup covers steps 0..9 and ends exactly at the peak
        assert!((sch.lr(9) - 1e-3).abs() < 1e-15);
        assert!(sch.lr(0) > 0.0 && sch.lr(0) < sch.lr(5));
        // anneal is monotone down to the floor
        let mut prev = sch.lr(10);
        for s in 11..100 {
            let cur = sch.lr(s);
            assert!(cur <= prev + 1e-15);
            prev = cur;
        }
        assert!((sch.lr(99) - 1e-5).abs() < 1e-7);
    }
}
