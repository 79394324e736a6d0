use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{decays, zeros_like, ParamVisit, Real};

/// AdamW with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 0.05, beta1: 0.9, beta2: 0.95, eps: 1e-8 }
    }
}

/// First and second moment estimates. `step` counts completed updates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<P> {
    pub step: u64,
    pub m: P,
    pub v: P,
}

impl<P> AdamState<P> {
    pub fn new<F: Real>(params: &P) -> Self
    where
        P: ParamVisit<F> + Clone,
    {
        Self { step: 0, m: zeros_like(params), v: zeros_like(params) }
    }
}

impl AdamW {
    /// One update with the default decay rule (linear weights only).
    pub fn step<F: Real, P: ParamVisit<F>>(
        &self,
        params: &mut P,
        grads: &P,
        state: &mut AdamState<P>,
        lr: f64,
    ) -> Result<()> {
        self.step_with(params, grads, state, lr, decays)
    }

    pub fn step_with<F: Real, P: ParamVisit<F>>(
        &self,
        params: &mut P,
        grads: &P,
        state: &mut AdamState<P>,
        lr: f64,
        decay: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let g = grads.named();
        if let Some((name, _)) = g.iter().find(|(_, m)| m.data.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numeric { step: state.step, what: format!("non-finite gradient in {name}") });
        }
        let t = state.step + 1;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one, eps) = (F::one(), F::of(self.eps));
        let step_size = F::of(lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let shrink = F::of(1.0 - lr * self.weight_decay);
        let m = state.m.named_mut();
        let v = state.v.named_mut();
        for ((((name, p), (_, g)), (_, m)), (_, v)) in params.named_mut().into_iter().zip(g).zip(m).zip(v) {
            let wd = decay(&name);
            for (((p, &g), m), v) in p.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                if wd {
                    *p = *p * shrink;
                }
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p = *p - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        state.step = t;
        Ok(())
    }
}

/// Linear ramp from 0 to `peak` over `warmup` steps, then cosine decay to
/// zero at `total`.
pub fn lr_at(step: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}
