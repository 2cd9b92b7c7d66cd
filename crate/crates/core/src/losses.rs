//! Training losses, soft winsorization and the adaptive loss balancer.

use geomoe_tensor::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const CORR_EPS: f64 = 1e-8;

/// Component order inside the balancer.
pub const COMPONENTS: [&str; 6] = ["huber", "corr", "cov", "entropy", "balance", "head_reg"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub huber_delta: f64,
    pub lambda_corr: f64,
    pub lambda_cov: f64,
    pub lambda_ent: f64,
    pub lambda_bal: f64,
    pub head_reg: f64,
    pub winsor_theta: f64,
    pub winsor_s: f64,
    pub balancer: BalancerConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            huber_delta: 1.0,
            lambda_corr: 0.1,
            lambda_cov: 0.01,
            lambda_ent: -0.01,
            lambda_bal: 0.01,
            head_reg: 1e-4,
            winsor_theta: 1.5,
            winsor_s: 1.5,
            balancer: BalancerConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.huber_delta > 0.0) {
            return invalid("huber δ must be positive");
        }
        if !(self.winsor_s > 0.0) || !(self.winsor_theta >= 0.0) {
            return invalid("winsorization needs θ ≥ 0 and s > 0");
        }
        if self.lambda_bal < 0.0 {
            return invalid("λ_bal must be nonnegative");
        }
        self.balancer.validate()
    }
}

/// Mean over all entries of the Huber penalty of `ŷ − y`.
pub fn huber_loss<'t>(pred: Var<'t>, target: Var<'t>, delta: f64) -> Result<Var<'t>> {
    let a = pred.sub(target)?.abs();
    // q = min(|e|, δ); huber = q²/2 + δ(|e| − q)
    let q = a.clamp(0.0, delta);
    Ok(q.square().scale(0.5).add(a.sub(q)?.scale(delta))?.mean())
}

/// Per-column Pearson correlation with variances guarded by `CORR_EPS`;
/// a zero-variance column yields 0.
pub fn column_correlations<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let b = pred.shape()[0];
    if b < 2 {
        return invalid(format!("correlation needs at least 2 rows, got {b}"));
    }
    let pc = pred.sub(pred.mean_rows()?)?;
    let tc = target.sub(target.mean_rows()?)?;
    let cov = pc.mul(tc)?.mean_rows()?;
    let vp = pc.square().mean_rows()?.add_scalar(CORR_EPS).sqrt();
    let vt = tc.square().mean_rows()?.add_scalar(CORR_EPS).sqrt();
    Ok(cov.div(vp.mul(vt)?)?)
}

/// `λ_corr (1 − mean_k |ρ_k|)`.
pub fn corr_boost_loss<'t>(pred: Var<'t>, target: Var<'t>, lambda_corr: f64) -> Result<Var<'t>> {
    let rho = column_correlations(pred, target)?;
    Ok(rho.abs().mean().neg().add_scalar(1.0).scale(lambda_corr))
}

/// Unbiased empirical covariance of the columns, `K × K`.
pub fn covariance<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let b = x.shape()[0];
    if b < 2 {
        return invalid(format!("covariance needs at least 2 rows, got {b}"));
    }
    let c = x.sub(x.mean_rows()?)?;
    Ok(c.t()?.matmul(c)?.scale(1.0 / (b as f64 - 1.0)))
}

/// `λ_cov ‖Cov(Ŷ) − Cov(Y)‖²_F`.
pub fn cov_align_loss<'t>(pred: Var<'t>, target: Var<'t>, lambda_cov: f64) -> Result<Var<'t>> {
    let d = covariance(pred)?.sub(covariance(target)?)?;
    Ok(d.square().sum().scale(lambda_cov))
}

/// `coefficient · Σ w²` over the given weight tensors.
pub fn head_regularization<'t>(weights: &[Var<'t>], coefficient: f64) -> Result<Var<'t>> {
    let Some(first) = weights.first() else {
        return invalid("head regularization needs at least one weight tensor");
    };
    let mut acc = first.square().sum();
    for w in &weights[1..] {
        acc = acc.add(w.square().sum())?;
    }
    Ok(acc.scale(coefficient))
}

/// Identity on `[−θ, θ]`, then `sign(x)(θ + s·tanh((|x| − θ)/s))`.
pub fn soft_winsorize(x: f64, theta: f64, s: f64) -> f64 {
    let a = x.abs();
    if a <= theta {
        x
    } else {
        x.signum() * (theta + s * ((a - theta) / s).tanh())
    }
}

/// Derivative of `soft_winsorize`; equals 1 on both sides of `|x| = θ`.
pub fn soft_winsorize_derivative(x: f64, theta: f64, s: f64) -> f64 {
    let a = x.abs();
    if a <= theta {
        1.0
    } else {
        let t = ((a - theta) / s).tanh();
        1.0 - t * t
    }
}

/// Per-target mean and standard deviation used to winsorize in σ-units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TargetStats {
    /// Column statistics of `rows` (each a K-vector); population std,
    /// floored at 1e−12.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(k) = rows.first().map(Vec::len) else {
            return invalid("target statistics need at least one row");
        };
        let n = rows.len() as f64;
        let mut mean = vec![0.0; k];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; k];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.into_iter().map(|v| v.sqrt().max(1e-12)).collect();
        Ok(Self { mean, std })
    }

    /// Standardize, winsorize, de-standardize.
    pub fn winsorize(&self, y: &[f64], theta: f64, s: f64) -> Vec<f64> {
        y.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &sd))| m + sd * soft_winsorize((v - m) / sd, theta, s))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalancerConfig {
    /// EMA decay γ.
    pub gamma: f64,
    /// Mixing weight ω of the learned softmax part.
    pub omega: f64,
    pub eps: f64,
}

impl Default for BalancerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            omega: 0.5,
            eps: 1e-8,
        }
    }
}

impl BalancerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.omega) || !(self.eps > 0.0) {
            return invalid("balancer needs γ ∈ [0,1), ω ∈ [0,1], ε > 0");
        }
        Ok(())
    }
}

/// EMA statistics of each component. The learned logits α live with the
/// model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancerState {
    pub mean: Vec<f64>,
    pub sq_mean: Vec<f64>,
    pub observations: u64,
}

impl BalancerState {
    pub fn new(components: usize) -> Self {
        Self {
            mean: vec![0.0; components],
            sq_mean: vec![0.0; components],
            observations: 0,
        }
    }

    /// EMA of squares minus squared EMA mean, floored at 0.
    pub fn variance(&self) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.sq_mean)
            .map(|(m, s)| (s - m * m).max(0.0))
            .collect()
    }

    /// Inverse-variance weights, or `None` before two observations.
    pub fn adaptive_weights(&self, cfg: &BalancerConfig) -> Option<Vec<f64>> {
        if self.observations < 2 {
            return None;
        }
        let inv: Vec<f64> = self.variance().iter().map(|v| 1.0 / (v + cfg.eps)).collect();
        let z: f64 = inv.iter().sum();
        Some(inv.iter().map(|v| v / z).collect())
    }

    /// `β = ω softmax(α) + (1 − ω) β_adapt`, or `softmax(α)` while the
    /// variance is undefined.
    pub fn weights(&self, alpha: &[f64], cfg: &BalancerConfig) -> Vec<f64> {
        let soft = softmax(alpha);
        match self.adaptive_weights(cfg) {
            Some(ad) => soft
                .iter()
                .zip(&ad)
                .map(|(s, a)| cfg.omega * s + (1.0 - cfg.omega) * a)
                .collect(),
            None => soft,
        }
    }

    /// Folds one step's component values into the EMAs. The first
    /// observation initializes them.
    pub fn update(&mut self, values: &[f64], cfg: &BalancerConfig) -> Result<()> {
        if values.len() != self.mean.len() {
            return invalid(format!(
                "balancer tracks {} components, got {}",
                self.mean.len(),
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("balancer received a non-finite component");
        }
        for (i, &v) in values.iter().enumerate() {
            if self.observations == 0 {
                self.mean[i] = v;
                self.sq_mean[i] = v * v;
            } else {
                self.mean[i] = cfg.gamma * self.mean[i] + (1.0 - cfg.gamma) * v;
                self.sq_mean[i] = cfg.gamma * self.sq_mean[i] + (1.0 - cfg.gamma) * v * v;
            }
        }
        self.observations += 1;
        Ok(())
    }

    /// `Σ β_i ℒ_i`, differentiable in `ℒ_i` and in the logits `alpha`
    /// (`1 × N`); the EMA statistics enter as constants.
    pub fn total<'t>(&self, components: &[Var<'t>], alpha: Var<'t>, cfg: &BalancerConfig) -> Result<Var<'t>> {
        let n = components.len();
        if n == 0 || alpha.shape() != [1, n] || n != self.mean.len() {
            return invalid(format!(
                "balancer: {n} components, logits {:?}, state for {}",
                alpha.shape(),
                self.mean.len()
            ));
        }
        let tape = alpha.tape();
        let soft = alpha.softmax();
        let beta = match self.adaptive_weights(cfg) {
            Some(ad) => soft
                .scale(cfg.omega)
                .add(tape.constant(Tensor::row(&ad).map(|a| (1.0 - cfg.omega) * a)))?,
            None => soft,
        };
        let losses = Var::concat(
            &components.iter().map(|c| c.reshape(vec![1, 1])).collect::<std::result::Result<Vec<_>, _>>()?,
            1,
        )?;
        Ok(beta.mul(losses)?.sum())
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
