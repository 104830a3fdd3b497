//! Adam optimizer and the warmup/decay learning-rate schedule.
//!
//! Adam keeps first- and second-moment estimates per parameter, bias-corrected by
//! step count, with *decoupled* weight decay: the decay term `lr · λ · θ` joins the
//! update directly instead of being folded into the gradient. Decay applies only to
//! parameters of kind [`ParamKind::Weight`] — biases and normalization gains are
//! exempt, as is standard for transformer training.
//!
//! A step with any non-finite gradient is rejected wholesale: parameters, moments,
//! and the step counter all stay untouched, so the caller can drop the bad batch and
//! carry on.

use crate::error::{err, Result};
use crate::params::{BoundParams, ParamKind, ParamStore};
use crate::tensor::Tape;

/// Adam hyperparameters. `lr` here is the *peak* rate; the per-step rate is whatever
/// the caller passes to [`Adam::step`] (usually from [`lr_schedule`]).
#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay coefficient for weight-kind parameters.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-6, weight_decay: 0.01 }
    }
}

/// Optimizer state, aligned with a parameter store's declaration order.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Adam {
        let m = store.specs().iter().map(|s| vec![0.0; s.numel()]).collect();
        let v = store.specs().iter().map(|s| vec![0.0; s.numel()]).collect();
        Adam { cfg, m, v, steps: 0 }
    }

    /// Completed steps.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. `grads` aligns with the store's declaration order; `None` means a
    /// zero gradient for that parameter. Rejects the whole step if any gradient is
    /// non-finite, leaving every parameter and moment untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Vec<f64>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(err!(
                Contract,
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            ));
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(err!(Contract, "learning rate must be finite and non-negative, got {lr}"));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.len() != store.specs()[i].numel() {
                    return Err(err!(
                        Contract,
                        "gradient {} has {} entries, parameter {:?} has {}",
                        i,
                        g.len(),
                        store.specs()[i].name,
                        store.specs()[i].numel()
                    ));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(err!(
                        Eval,
                        "non-finite gradient for {:?}; step rejected",
                        store.specs()[i].name
                    ));
                }
            }
        }

        self.steps += 1;
        let t = self.steps;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bias1 = 1.0 - b1.powi(t as i32);
        let bias2 = 1.0 - b2.powi(t as i32);
        // One index drives four parallel structures (specs, tensors, m, v, grads);
        // iterator zips cannot borrow `store` mutably alongside the rest.
        #[allow(clippy::needless_range_loop)]
        for i in 0..store.len() {
            let decay = match store.specs()[i].kind {
                ParamKind::Weight => self.cfg.weight_decay,
                ParamKind::Bias | ParamKind::Gain => 0.0,
            };
            let data = store.tensor_at_mut(i).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                data[j] -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps) + decay * data[j]);
            }
        }
        Ok(())
    }
}

/// Reads the gradients of bound parameters off a tape after `backward`, in
/// declaration order. Parameters the loss never touched yield `None`.
pub fn collect_grads(tape: &Tape, bound: &BoundParams) -> Vec<Option<Vec<f64>>> {
    bound.ids().iter().map(|&id| tape.grad(id).map(|g| g.to_vec())).collect()
}

/// Linear warmup to `peak` over `warmup` steps, then linear decay to zero at `total`
/// steps; zero afterwards. `step` is zero-based.
pub fn lr_schedule(peak: f64, warmup: u64, total: u64, step: u64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    peak * (total - step) as f64 / (total - warmup).max(1) as f64
}
