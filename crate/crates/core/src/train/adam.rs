use std::collections::BTreeMap;

use super::config::AdamConfig;
use crate::autodiff::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was NaN or infinite; parameters and moments are untouched.
    Skipped,
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }

    /// Updates that have been applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient entry are left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> StepOutcome {
        if grads.values().any(|g| !g.is_finite()) {
            log::warn!("non-finite gradient at step {}, update skipped", self.step + 1);
            return StepOutcome::Skipped;
        }
        let scale = match self.cfg.clip_norm {
            Some(c) => {
                let norm = grads.values().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.cfg;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * scale;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        StepOutcome::Applied
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(x: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(x));
        p
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("x".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(1.5);
        let mut opt = Adam::new(AdamConfig::default());
        assert_eq!(opt.step(&mut p, &grad(0.0)), StepOutcome::Applied);
        assert_eq!(p.get("x").unwrap().data()[0], 1.5);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [1e-3, -0.5, 42.0] {
            let mut p = store(0.0);
            Adam::new(AdamConfig::default()).step(&mut p, &grad(g));
            let moved = p.get("x").unwrap().data()[0];
            assert!((moved.abs() - 1e-3).abs() < 1e-7, "{g}: {moved}");
            assert_eq!(moved.signum(), -g.signum());
        }
    }

    #[test]
    fn quadratic_trajectory_matches_recurrence() {
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut p = store(1.0);
        let mut opt = Adam::new(cfg);
        // Reference: the published recurrences written out on scalars.
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);

            let cur = p.get("x").unwrap().data()[0];
            opt.step(&mut p, &grad(2.0 * cur));
        }
        assert!((p.get("x").unwrap().data()[0] - x).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_skipped() {
        let mut p = store(1.0);
        let mut opt = Adam::new(AdamConfig::default());
        assert_eq!(opt.step(&mut p, &grad(f64::NAN)), StepOutcome::Skipped);
        assert_eq!(opt.steps(), 0);
        assert_eq!(p.get("x").unwrap().data()[0], 1.0);
    }

    #[test]
    fn clipping_bounds_the_gradient() {
        let cfg = AdamConfig { clip_norm: Some(1.0), ..AdamConfig::default() };
        let mut a = store(0.0);
        let mut b = store(0.0);
        let mut oa = Adam::new(cfg.clone());
        let mut ob = Adam::new(cfg);
        oa.step(&mut a, &grad(100.0));
        ob.step(&mut b, &grad(1.0));
        oa.step(&mut a, &grad(1.0));
        ob.step(&mut b, &grad(1.0));
        assert_eq!(a, b);
    }
}
