//! Learnable per-frame action sensitivity.
//!
//! Each class carries one Gaussian over normalized instance-relative
//! position per sub-task (classification / localization). Evaluated at a
//! positive point's position it yields a weight; weights are normalized to
//! mean 1 within each instance so the loss mass stays fixed and only its
//! distribution across frames can move.

use crate::autodiff::params::{BoundParams, ParamId, ParamStore};
use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geom::ActionInstance;
use crate::pyramid::PyramidPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubTask {
    Classification,
    Localization,
}

/// Gaussian mean/width per class per sub-task, stored in a [`ParamStore`].
///
/// Widths and means are kept inside their bounds by projection after every
/// optimizer step, so stored values are always valid.
#[derive(Debug, Clone)]
pub struct SensitivityParams {
    pub mu_cls: ParamId,
    pub sigma_cls: ParamId,
    pub mu_loc: ParamId,
    pub sigma_loc: ParamId,
    pub classes: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl SensitivityParams {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        classes: usize,
        mu_init: f64,
        sigma_init: f64,
        sigma_min: f64,
        sigma_max: f64,
        trainable: bool,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("sensitivity needs at least one class"));
        }
        if !(sigma_min > 0.0 && sigma_max >= sigma_min) {
            return Err(Error::invalid(format!(
                "sigma bounds must satisfy 0 < min <= max, got [{sigma_min}, {sigma_max}]"
            )));
        }
        let mu0 = mu_init.clamp(0.0, 1.0);
        let sigma0 = sigma_init.clamp(sigma_min, sigma_max);
        let mk = |v: f64| Tensor::full(&[classes], v);
        Ok(SensitivityParams {
            mu_cls: store.register("sensitivity.mu_cls", mk(mu0), trainable, false),
            sigma_cls: store.register("sensitivity.sigma_cls", mk(sigma0), trainable, false),
            mu_loc: store.register("sensitivity.mu_loc", mk(mu0), trainable, false),
            sigma_loc: store.register("sensitivity.sigma_loc", mk(sigma0), trainable, false),
            classes,
            sigma_min,
            sigma_max,
        })
    }

    fn ids(&self, task: SubTask) -> (ParamId, ParamId) {
        match task {
            SubTask::Classification => (self.mu_cls, self.sigma_cls),
            SubTask::Localization => (self.mu_loc, self.sigma_loc),
        }
    }

    /// Projects means into `[0, 1]` and widths into `[sigma_min, sigma_max]`.
    /// Called after each optimizer step.
    pub fn project(&self, store: &mut ParamStore) {
        for id in [self.mu_cls, self.mu_loc] {
            for v in store.value_mut(id).data_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
        for id in [self.sigma_cls, self.sigma_loc] {
            for v in store.value_mut(id).data_mut() {
                *v = v.clamp(self.sigma_min, self.sigma_max);
            }
        }
    }

    pub fn mu_values(&self, store: &ParamStore, task: SubTask) -> Vec<f64> {
        store.value(self.ids(task).0).data().to_vec()
    }

    pub fn sigma_values(&self, store: &ParamStore, task: SubTask) -> Vec<f64> {
        store.value(self.ids(task).1).data().to_vec()
    }

    /// Mean-1 normalized weights for one instance's positive points.
    ///
    /// `positions` are the instance-relative positions in `[0, 1]` of the
    /// points, one entry each; gradients flow to the class's mu and sigma.
    pub fn instance_weights<'g>(
        &self,
        tape: &'g Tape,
        bound: &BoundParams<'g>,
        task: SubTask,
        class: usize,
        positions: &[f64],
    ) -> Result<Var<'g>> {
        if positions.is_empty() {
            return Err(Error::invalid(
                "instance_weights needs at least one positive point",
            ));
        }
        if class >= self.classes {
            return Err(Error::invalid(format!(
                "class {class} out of range for {} classes",
                self.classes
            )));
        }
        let (mu_id, sigma_id) = self.ids(task);
        let n = positions.len();
        let pos = tape.constant(Tensor::from_vec(positions.to_vec()));
        let mu = bound.var(mu_id).gather_rows(&[class])?.repeat(n)?;
        let sigma = bound.var(sigma_id).gather_rows(&[class])?.repeat(n)?;
        let raw = gaussian_weights(pos, mu, sigma)?;
        let mean = raw.mean_all().repeat(n)?;
        raw.div(mean)
    }
}

/// `exp(-(t - mu)^2 / (2 sigma^2))` on the tape, elementwise over vectors.
pub fn gaussian_weights<'g>(t: Var<'g>, mu: Var<'g>, sigma: Var<'g>) -> Result<Var<'g>> {
    let d = t.sub(mu)?;
    let num = d.mul(d)?;
    let denom = sigma.mul(sigma)?.scale(2.0);
    num.div(denom)?.neg().exp().pipe()
}

trait Pipe: Sized {
    fn pipe(self) -> Result<Self> {
        Ok(self)
    }
}
impl<T> Pipe for T {}

/// Value-level Gaussian weight, peak 1 at `t == mu`.
pub fn raw_weight(t: f64, mu: f64, sigma: f64) -> f64 {
    let d = t - mu;
    (-(d * d) / (2.0 * sigma * sigma)).exp()
}

/// Position of a positive point inside its matched instance, in `[0, 1]`.
pub fn normalized_position(point: &PyramidPoint, instance: &ActionInstance) -> Result<f64> {
    let seg = instance.segment;
    if !seg.contains(point.t_center) {
        return Err(Error::invalid(format!(
            "point at {} lies outside instance [{}, {}]",
            point.t_center,
            seg.start(),
            seg.end()
        )));
    }
    Ok((point.t_center - seg.start()) / seg.duration())
}
