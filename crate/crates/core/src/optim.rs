//! SGD with momentum and weight decay, and its masked and globally scaled
//! variants.

use crate::error::{AmssError, Result};
use crate::mask::MaskPlan;
use crate::params::{GradientSet, Owner, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(AmssError::InvalidInput(format!("learning rate {lr} must be finite and >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(AmssError::InvalidInput(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(AmssError::InvalidInput(format!("weight decay {weight_decay} must be >= 0")));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    /// Plain SGD: no momentum, no decay.
    pub fn plain(lr: f64) -> Result<Self> {
        Self::new(lr, 0.0, 0.0)
    }

    fn check(&self, params: &ParamStore, grads: &GradientSet) -> Result<()> {
        grads.check_matches(params)?;
        for (id, g) in grads.iter() {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(AmssError::NonFiniteGradient {
                    param: params.name(id).to_string(),
                });
            }
        }
        Ok(())
    }

    /// Updates one parameter with `g_eff = (g + λw) ⊙ m`. Coordinates whose
    /// mask is zero are left alone entirely, velocity included.
    fn update(&mut self, params: &mut ParamStore, id: ParamId, grad: &Tensor, mask: Option<&Tensor>, scale: f64) {
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        let w = params.get_mut(id).data_mut();
        let g = grad.data();
        let m = mask.map(|t| t.data());
        let vel = if mu > 0.0 {
            Some(
                self.velocity[id.0]
                    .get_or_insert_with(|| Tensor::zeros(grad.shape()))
                    .data_mut(),
            )
        } else {
            None
        };
        match vel {
            Some(v) => {
                for j in 0..w.len() {
                    let mj = m.map_or(1.0, |m| m[j]) * scale;
                    if mj == 0.0 {
                        continue;
                    }
                    v[j] = mu * v[j] + (g[j] + wd * w[j]) * mj;
                    w[j] -= lr * v[j];
                }
            }
            None => {
                for j in 0..w.len() {
                    let mj = m.map_or(1.0, |m| m[j]) * scale;
                    if mj == 0.0 {
                        continue;
                    }
                    w[j] -= lr * (g[j] + wd * w[j]) * mj;
                }
            }
        }
    }

    /// Unmasked step on every parameter.
    pub fn sgd_step(&mut self, params: &mut ParamStore, grads: &GradientSet) -> Result<()> {
        self.check(params, grads)?;
        for (id, g) in grads.iter() {
            self.update(params, id, g, None, 1.0);
        }
        Ok(())
    }

    /// Masked step on the parameters covered by `plan`; nothing else moves.
    pub fn masked_step(&mut self, params: &mut ParamStore, grads: &GradientSet, plan: &MaskPlan) -> Result<()> {
        self.check(params, grads)?;
        plan.check_against(params)?;
        for (id, m) in plan.param_masks() {
            self.update(params, id, grads.get(id), Some(&m), 1.0);
        }
        Ok(())
    }

    /// Full step where parameters covered by a plan are masked and every
    /// other parameter takes an ordinary update.
    pub fn step_with_plans(&mut self, params: &mut ParamStore, grads: &GradientSet, plans: &[MaskPlan]) -> Result<()> {
        self.check(params, grads)?;
        let mut masks: Vec<Option<Tensor>> = vec![None; params.len()];
        for plan in plans {
            plan.check_against(params)?;
            for (id, m) in plan.param_masks() {
                if masks[id.0].is_some() {
                    return Err(AmssError::PlanMismatch(format!(
                        "{} is covered by two plans",
                        params.name(id)
                    )));
                }
                masks[id.0] = Some(m);
            }
        }
        for (id, g) in grads.iter() {
            self.update(params, id, g, masks[id.0].as_ref(), 1.0);
        }
        Ok(())
    }

    /// Every modality-`k` parameter uses `v_k · g`; shared parameters use `g`.
    pub fn global_scaled_step(&mut self, params: &mut ParamStore, grads: &GradientSet, v: &[f64]) -> Result<()> {
        self.check(params, grads)?;
        if let Some(bad) = v.iter().find(|x| !(**x > 0.0 && **x <= 1.0)) {
            return Err(AmssError::InvalidInput(format!("scaling coefficient {bad} outside (0, 1]")));
        }
        for (id, g) in grads.iter() {
            let scale = match params.owner(id) {
                Owner::Modality(k) => *v.get(k).ok_or_else(|| {
                    AmssError::InvalidInput(format!("no scaling coefficient for modality {k}"))
                })?,
                Owner::Shared => 1.0,
            };
            self.update(params, id, g, None, scale);
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has not
/// improved for more than `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub const DEFAULT_FACTOR: f64 = 0.1;

    pub fn new(patience: usize) -> Self {
        Self {
            factor: Self::DEFAULT_FACTOR,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records an epoch's loss; returns the new learning rate when it drops.
    pub fn observe(&mut self, loss: f64, opt: &mut Sgd) -> Option<f64> {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return None;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            opt.lr *= self.factor;
            return Some(opt.lr);
        }
        None
    }
}
