//! Adam with decoupled weight decay and a warmup + cosine learning-rate
//! schedule.

use crate::autodiff::params::ParamStore;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let m = params
            .iter()
            .map(|(_, e)| Tensor::zeros(e.value.shape()))
            .collect();
        let v = params
            .iter()
            .map(|(_, e)| Tensor::zeros(e.value.shape()))
            .collect();
        Adam {
            cfg,
            m,
            v,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. `grads` is aligned with the store's registration
    /// order; `None` entries (frozen or unused parameters) are skipped. The
    /// step aborts before touching any parameter if a gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[Option<Tensor>],
        lr_mult: f64,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    let name = params.iter().nth(i).map(|(_, e)| e.name.clone());
                    return Err(Error::numerical(format!(
                        "non-finite gradient for parameter {}",
                        name.unwrap_or_else(|| format!("#{i}"))
                    )));
                }
            }
        }

        self.steps += 1;
        let t = self.steps as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        let lr = self.cfg.lr * lr_mult;

        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for (i, id) in ids.iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if !params.get(*id).trainable {
                continue;
            }
            let apply_decay = params.get(*id).decay && self.cfg.weight_decay > 0.0;
            let wd = self.cfg.weight_decay;
            let lr = lr * params.get(*id).lr_scale;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let b1 = self.cfg.beta1;
            let b2 = self.cfg.beta2;
            let eps = self.cfg.eps;
            let value = params.value_mut(*id);
            for j in 0..value.numel() {
                let gj = g.data()[j];
                let mj = b1 * m.data()[j] + (1.0 - b1) * gj;
                let vj = b2 * v.data()[j] + (1.0 - b2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let mut p = value.data()[j];
                p -= lr * m_hat / (v_hat.sqrt() + eps);
                if apply_decay {
                    p -= lr * wd * value.data()[j];
                }
                value.data_mut()[j] = p;
            }
        }
        Ok(())
    }
}

/// Learning-rate multiplier: linear ramp over `warmup_steps` (starting at 0),
/// then a half cosine from 1 down to 0 over the remaining steps.
pub fn lr_multiplier(step: u64, total_steps: u64, warmup_steps: u64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = step.saturating_sub(warmup_steps) as f64 / span as f64;
    0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut ps = ParamStore::new();
        let id = ps.register("x", Tensor::from_vec(vec![1.5]), true, true);
        let mut opt = Adam::new(AdamConfig::default(), &ps);
        opt.step(&mut ps, &[Some(Tensor::from_vec(vec![0.0]))], 1.0)
            .unwrap();
        assert_eq!(ps.value(id).data(), &[1.5]);
    }

    #[test]
    fn one_step_on_quadratic_matches_hand_calc() {
        // f(x) = x^2 at x=1: grad 2, Adam defaults, lr 0.1 -> x ~= 0.9.
        let mut ps = ParamStore::new();
        let id = ps.register("x", Tensor::from_vec(vec![1.0]), true, false);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &ps);
        opt.step(&mut ps, &[Some(Tensor::from_vec(vec![2.0]))], 1.0)
            .unwrap();
        let x = ps.value(id).data()[0];
        assert!((x - 0.9).abs() < 1e-8, "got {x}");
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut ps = ParamStore::new();
        let id = ps.register("x", Tensor::from_vec(vec![1.0]), true, true);
        let mut opt = Adam::new(AdamConfig::default(), &ps);
        let err = opt
            .step(&mut ps, &[Some(Tensor::from_vec(vec![f64::NAN]))], 1.0)
            .unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert_eq!(ps.value(id).data(), &[1.0], "params untouched on abort");
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut ps = ParamStore::new();
        let id = ps.register("x", Tensor::from_vec(vec![1.0]), false, true);
        let mut opt = Adam::new(AdamConfig::default(), &ps);
        opt.step(&mut ps, &[Some(Tensor::from_vec(vec![5.0]))], 1.0)
            .unwrap();
        assert_eq!(ps.value(id).data(), &[1.0]);
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_multiplier(0, 100, 10), 0.0);
        assert_eq!(lr_multiplier(5, 100, 10), 0.5);
        assert_eq!(lr_multiplier(10, 100, 10), 1.0);
        let mid = lr_multiplier(55, 100, 10);
        assert!((mid - 0.5).abs() < 1e-12, "got {mid}");
        assert!(lr_multiplier(100, 100, 10) < 1e-12);
        // No warmup: starts at full rate.
        assert_eq!(lr_multiplier(0, 100, 0), 1.0);
    }
}
