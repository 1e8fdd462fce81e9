//! Adam with a warmup + exponential-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// `lr(t) = base * min(1, t / warmup) * decay^(t / decay_interval)`, with `t`
/// the 1-based step number.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: u64,
    pub decay: f64,
    pub decay_interval: u64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule {
            base,
            warmup_steps: 0,
            decay: 1.0,
            decay_interval: 1,
        }
    }

    pub fn rate(&self, step: u64) -> f64 {
        let t = step as f64;
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (t / self.warmup_steps as f64).min(1.0)
        };
        self.base * warm * self.decay.powf(t / self.decay_interval.max(1) as f64)
    }
}

/// Per-parameter gradient buffers indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn new(n_params: usize) -> Self {
        ParamGrads {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[f64], scale: f64) {
        let slot = self.grads[id.0].get_or_insert_with(|| vec![0.0; g.len()]);
        for (s, v) in slot.iter_mut().zip(g) {
            *s += scale * v;
        }
    }

    pub fn add_from(&mut self, grads: &crate::autodiff::Gradients, scale: f64) {
        for id in grads.param_ids() {
            if let Some(g) = grads.param(id) {
                self.accumulate(id, g, scale);
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if max_norm > 0.0 && norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, schedule: LrSchedule) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.m[id.0], &self.v[id.0])
    }

    /// Restores optimizer state (checkpoint resume).
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Structure("adam moment count mismatch".into()));
        }
        for (i, (a, b)) in m.iter().zip(&v).enumerate() {
            if a.len() != self.m[i].len() || b.len() != self.v[i].len() {
                return Err(Error::Structure(format!("adam moment size mismatch for parameter {i}")));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One bias-corrected Adam update; returns the learning rate used.
    /// Parameters without a gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<f64> {
        for id in params.ids() {
            if let Some(g) = grads.get(id) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Divergence {
                        param: params.name(id).to_string(),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let lr = self.schedule.rate(self.step);
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for id in params.ids() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64) -> (ParamStore, ParamId) {
        let mut p = ParamStore::new();
        let id = p.add("theta", Tensor::scalar(value)).unwrap();
        (p, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut p, id) = single(0.7);
        let mut adam = AdamState::new(&p, LrSchedule::constant(0.1));
        let mut g = ParamGrads::new(1);
        g.accumulate(id, &[0.0], 1.0);
        adam.update(&mut p, &g).unwrap();
        assert_eq!(p.get(id).data(), &[0.7]);
    }

    #[test]
    fn first_step_is_lr_sized() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let (mut p, id) = single(0.0);
        let mut adam = AdamState::new(&p, LrSchedule::constant(0.1));
        let mut g = ParamGrads::new(1);
        g.accumulate(id, &[1.0], 1.0);
        adam.update(&mut p, &g).unwrap();
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((p.get(id).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn minimizes_quadratic() {
        let (mut p, id) = single(1.0);
        let mut adam = AdamState::new(&p, LrSchedule::constant(0.1));
        for _ in 0..100 {
            let theta = p.get(id).data()[0];
            let mut g = ParamGrads::new(1);
            g.accumulate(id, &[2.0 * theta], 1.0);
            adam.update(&mut p, &g).unwrap();
        }
        assert!(p.get(id).data()[0].abs() < 0.5);
    }

    #[test]
    fn non_finite_gradient_names_param() {
        let (mut p, id) = single(1.0);
        let mut adam = AdamState::new(&p, LrSchedule::constant(0.1));
        let mut g = ParamGrads::new(1);
        g.accumulate(id, &[f64::NAN], 1.0);
        let err = adam.update(&mut p, &g).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(adam.step(), 0);
    }

    #[test]
    fn schedule_warmup_and_decay() {
        let s = LrSchedule {
            base: 1.0,
            warmup_steps: 10,
            decay: 0.5,
            decay_interval: 100,
        };
        assert!((s.rate(5) - 0.5 * 0.5f64.powf(0.05)).abs() < 1e-15);
        assert!((s.rate(100) - 0.5).abs() < 1e-15);
    }
}
