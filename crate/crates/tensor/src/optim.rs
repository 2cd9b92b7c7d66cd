//! AdamW with decoupled weight decay, and a cosine one-cycle schedule.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter multipliers: learning-rate scale and whether decay applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamScale {
    pub lr: f64,
    pub decay: bool,
}

impl Default for ParamScale {
    fn default() -> Self {
        Self { lr: 1.0, decay: true }
    }
}

/// Moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub skipped: u64,
}

impl OptimState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            skipped: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN/inf; nothing was changed except the skip counter.
    SkippedNonFinite,
}

impl AdamW {
    pub fn step(
        &self,
        params: &mut [Tensor],
        grads: &[Tensor],
        state: &mut OptimState,
        lr: f64,
        scales: &[ParamScale],
    ) -> Result<StepOutcome> {
        if lr <= 0.0 || !lr.is_finite() {
            return invalid("adamw", format!("learning rate must be positive, got {lr}"));
        }
        if params.len() != grads.len() || params.len() != state.m.len() || params.len() != scales.len() {
            return invalid("adamw", "parameter, gradient, state and scale counts differ");
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return invalid(
                    "adamw",
                    format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                );
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            state.skipped += 1;
            return Ok(StepOutcome::SkippedNonFinite);
        }

        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let rate = lr * scales[i].lr;
            let decay = if scales[i].decay { self.weight_decay } else { 0.0 };
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gv;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gv * gv;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pv -= rate * (mhat / (vhat.sqrt() + self.eps) + decay * *pv);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// One-cycle schedule: cosine warm-up to `peak`, then cosine decay, both
/// bottoming out at `peak / final_div`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub peak: f64,
    pub total: u64,
    pub warmup_frac: f64,
    pub final_div: f64,
}

impl OneCycle {
    pub fn new(peak: f64, total: u64) -> Self {
        Self {
            peak,
            total,
            warmup_frac: 0.15,
            final_div: 1e4,
        }
    }

    pub fn rate(&self, step: u64) -> f64 {
        let floor = self.peak / self.final_div;
        let total = self.total.max(1) as f64;
        let s = (step.min(self.total)) as f64;
        let warm = self.warmup_frac * total;
        let cosine = |frac: f64| 0.5 * (1.0 - (std::f64::consts::PI * frac).cos());
        if s < warm {
            floor + (self.peak - floor) * cosine(s / warm)
        } else {
            let span = (total - warm).max(f64::MIN_POSITIVE);
            self.peak - (self.peak - floor) * cosine((s - warm) / span)
        }
    }
}

pub fn onecycle_lr(step: u64, total: u64, peak: f64) -> f64 {
    OneCycle::new(peak, total).rate(step)
}
