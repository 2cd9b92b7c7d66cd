//! Pairwise comparisons to continuous utilities: a multinomial-logit
//! likelihood regularized by the nuclear norm of `L^{1/2} Θ`, solved by
//! proximal gradient with Barzilai–Borwein steps and backtracking.

use std::fmt::Write as _;

use geomoe_tensor::{eig_sym, svd, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{data_err, invalid, Result};

/// Eigenvalues below this (relative to `max(1, λ_max)`) count as zero.
pub const NULL_EIG_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    WinA,
    WinB,
    Tie,
}

impl Outcome {
    /// Observed preference for `a`; a tie is the average of both directions.
    pub fn target_value(self) -> f64 {
        match self {
            Outcome::WinA => 1.0,
            Outcome::WinB => 0.0,
            Outcome::Tie => 0.5,
        }
    }

    fn code(self) -> char {
        match self {
            Outcome::WinA => 'A',
            Outcome::WinB => 'B',
            Outcome::Tie => 'T',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub item_a: usize,
    pub item_b: usize,
    pub target: usize,
    pub outcome: Outcome,
}

impl ComparisonRecord {
    pub fn new(item_a: usize, item_b: usize, target: usize, outcome: Outcome) -> Result<Self> {
        if item_a == item_b {
            return invalid(format!("comparison of item {item_a} with itself"));
        }
        Ok(Self {
            item_a,
            item_b,
            target,
            outcome,
        })
    }
}

fn logistic(d: f64) -> f64 {
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^d)` without overflow.
fn softplus(d: f64) -> f64 {
    if d > 0.0 {
        d + (-d).exp().ln_1p()
    } else {
        d.exp().ln_1p()
    }
}

/// Probability that `a` is preferred over `b`.
pub fn mnl_probability(theta_a: f64, theta_b: f64) -> f64 {
    logistic(theta_a - theta_b)
}

fn check_records(records: &[ComparisonRecord], n: usize, t: usize) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        if r.item_a >= n || r.item_b >= n || r.target >= t {
            return invalid(format!(
                "record {i} ({}, {}, target {}) outside {n} items × {t} targets",
                r.item_a, r.item_b, r.target
            ));
        }
        if r.item_a == r.item_b {
            return invalid(format!("record {i} compares item {} with itself", r.item_a));
        }
    }
    Ok(())
}

/// Normalized log-likelihood `(1/n) Σ y d − log(1 + e^d)` with
/// `d = θ_{a,t} − θ_{b,t}`, and its gradient with respect to `Θ` (`N × T`).
/// A tie (`y = ½`) equals two half-weight records in opposite directions.
pub fn mnl_loglik_and_grad(records: &[ComparisonRecord], theta: &Tensor) -> Result<(f64, Tensor)> {
    if records.is_empty() {
        return invalid("log-likelihood of an empty record set");
    }
    if theta.rank() != 2 {
        return invalid(format!("utilities must be N × T, got {:?}", theta.shape()));
    }
    let (n, t) = (theta.rows(), theta.cols());
    check_records(records, n, t)?;
    let mut grad = Tensor::zeros(vec![n, t]);
    let mut ll = 0.0;
    let th = theta.data();
    let g = grad.data_mut();
    for r in records {
        let (ia, ib) = (r.item_a * t + r.target, r.item_b * t + r.target);
        let d = th[ia] - th[ib];
        let y = r.outcome.target_value();
        ll += y * d - softplus(d);
        let dd = y - logistic(d);
        g[ia] += dd;
        g[ib] -= dd;
    }
    let inv = 1.0 / records.len() as f64;
    grad.scale_in_place(inv);
    Ok((ll * inv, grad))
}

/// Comparison graph pooled over targets.
#[derive(Debug, Clone)]
pub struct ComparisonGraph {
    pub items: usize,
    /// `D − A`, `A_ab` = number of comparisons between `a` and `b`.
    pub laplacian: Tensor,
    /// Component label of each item, numbered by first appearance.
    pub component: Vec<usize>,
    pub components: usize,
}

impl ComparisonGraph {
    pub fn component_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.components];
        for &c in &self.component {
            sizes[c] += 1;
        }
        sizes
    }
}

pub fn graph_laplacian(records: &[ComparisonRecord], n: usize) -> Result<ComparisonGraph> {
    check_records(records, n, usize::MAX)?;
    let mut l = Tensor::zeros(vec![n, n]);
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    {
        let d = l.data_mut();
        for r in records {
            let (a, b) = (r.item_a, r.item_b);
            d[a * n + a] += 1.0;
            d[b * n + b] += 1.0;
            d[a * n + b] -= 1.0;
            d[b * n + a] -= 1.0;
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut component = vec![0; n];
    let mut components = 0;
    for i in 0..n {
        let root = find(&mut parent, i);
        if label[root] == usize::MAX {
            label[root] = components;
            components += 1;
        }
        component[i] = label[root];
    }
    Ok(ComparisonGraph {
        items: n,
        laplacian: l,
        component,
        components,
    })
}

/// Square root, pseudo-inverse square root and null space of a Laplacian.
#[derive(Debug, Clone)]
pub struct LaplacianRoots {
    pub half: Tensor,
    pub pinv_half: Tensor,
    /// Orthonormal columns spanning the kernel.
    pub null_basis: Tensor,
}

pub fn laplacian_half(l: &Tensor) -> Result<LaplacianRoots> {
    let eig = eig_sym(l)?;
    let n = eig.values.len();
    let top = eig.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = NULL_EIG_TOL * top;
    let q = &eig.vectors;
    let mut half = Tensor::zeros(vec![n, n]);
    let mut pinv = Tensor::zeros(vec![n, n]);
    let null: Vec<usize> = (0..n).filter(|&k| eig.values[k] < tol).collect();
    for k in 0..n {
        let lam = eig.values[k];
        if lam < tol {
            continue;
        }
        let (r, ri) = (lam.sqrt(), 1.0 / lam.sqrt());
        for i in 0..n {
            let qi = q.at(i, k);
            for j in 0..n {
                let p = qi * q.at(j, k);
                half.data_mut()[i * n + j] += r * p;
                pinv.data_mut()[i * n + j] += ri * p;
            }
        }
    }
    let mut basis = Tensor::zeros(vec![n, null.len()]);
    for (c, &k) in null.iter().enumerate() {
        for i in 0..n {
            basis.set(i, c, q.at(i, k));
        }
    }
    Ok(LaplacianRoots {
        half,
        pinv_half: pinv,
        null_basis: basis,
    })
}

/// Proximal operator of `threshold · ‖·‖_*`: soft-shrinks singular values.
pub fn svt_prox(m: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(threshold >= 0.0) {
        return invalid(format!("SVT threshold must be ≥ 0, got {threshold}"));
    }
    let mut d = svd(m)?;
    for s in d.sigma.iter_mut() {
        *s = (*s - threshold).max(0.0);
    }
    Ok(d.reconstruct())
}

pub fn nuclear_norm(m: &Tensor) -> Result<f64> {
    Ok(svd(m)?.sigma.iter().sum())
}

/// BB1 step `⟨s,s⟩/⟨s,Δg⟩` clipped to `bounds`; keeps `previous` when the
/// curvature estimate is not positive.
pub fn bb_step(s: &[f64], g_delta: &[f64], previous: f64, bounds: (f64, f64)) -> f64 {
    let ss: f64 = s.iter().map(|v| v * v).sum();
    let sy: f64 = s.iter().zip(g_delta).map(|(a, b)| a * b).sum();
    if !(sy > 0.0) || !(ss > 0.0) {
        return previous;
    }
    (ss / sy).clamp(bounds.0, bounds.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Likelihood scale.
    pub alpha: f64,
    /// Nuclear-norm weight.
    pub lambda: f64,
    pub max_iterations: usize,
    /// Stop when the relative objective change falls below this.
    pub tolerance: f64,
    pub step_bounds: (f64, f64),
    pub initial_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda: 1e-2,
            max_iterations: 5000,
            tolerance: 1e-8,
            step_bounds: (1e-6, 1e6),
            initial_step: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return invalid(format!("lambda must be finite and ≥ 0, got {}", self.lambda));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return invalid(format!("alpha must be positive, got {}", self.alpha));
        }
        let (lo, hi) = self.step_bounds;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return invalid(format!("bad step bounds ({lo}, {hi})"));
        }
        if !(self.tolerance >= 0.0) {
            return invalid("tolerance must be ≥ 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    /// `N × T`, columns mean-zero on every connected component.
    pub theta: Tensor,
    /// Objective after initialization and after each accepted step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Items with no comparisons; their utilities are pinned at 0.
    pub isolated: Vec<usize>,
    /// Items in components of fewer than two items are isolated; larger
    /// components are tracked here for centering.
    pub components: usize,
}

/// Subtracts each column's mean over every component.
pub fn center_columns(theta: &mut Tensor, graph: &ComparisonGraph) {
    let (n, t) = (theta.rows(), theta.cols());
    let sizes = graph.component_sizes();
    let mut sums = vec![0.0; graph.components * t];
    for i in 0..n {
        let c = graph.component[i];
        for j in 0..t {
            sums[c * t + j] += theta.at(i, j);
        }
    }
    for i in 0..n {
        let c = graph.component[i];
        for j in 0..t {
            let v = theta.at(i, j) - sums[c * t + j] / sizes[c] as f64;
            theta.set(i, j, v);
        }
    }
}

struct Problem<'a> {
    records: &'a [ComparisonRecord],
    roots: LaplacianRoots,
    cfg: &'a SolverConfig,
}

impl Problem<'_> {
    fn theta(&self, phi: &Tensor) -> Result<Tensor> {
        Ok(self.roots.pinv_half.matmul(phi)?)
    }

    /// Smooth part `−αℒ` and its gradient in `Φ` coordinates.
    fn smooth(&self, phi: &Tensor) -> Result<(f64, Tensor)> {
        let (ll, g) = mnl_loglik_and_grad(self.records, &self.theta(phi)?)?;
        let mut gphi = self.roots.pinv_half.matmul(&g)?;
        gphi.scale_in_place(-self.cfg.alpha);
        Ok((-self.cfg.alpha * ll, gphi))
    }

    fn objective(&self, smooth: f64, phi: &Tensor) -> Result<f64> {
        Ok(if self.cfg.lambda > 0.0 {
            smooth + self.cfg.lambda * nuclear_norm(phi)?
        } else {
            smooth
        })
    }
}

/// Solves `min −αℒ(Θ) + λ‖L^{1/2}Θ‖_*` in `Φ = L^{1/2}Θ`, which makes the
/// penalty a plain nuclear norm. Every accepted step does not increase
/// the objective; rejected steps halve the step size.
pub fn fit_mnl(records: &[ComparisonRecord], n: usize, t: usize, cfg: &SolverConfig) -> Result<FitReport> {
    fit_mnl_from(records, n, t, cfg, None)
}

/// As [`fit_mnl`], starting from `init` (projected onto the identifiable
/// subspace) instead of zero.
pub fn fit_mnl_from(
    records: &[ComparisonRecord],
    n: usize,
    t: usize,
    cfg: &SolverConfig,
    init: Option<&Tensor>,
) -> Result<FitReport> {
    cfg.validate()?;
    if records.is_empty() {
        return invalid("no comparison records");
    }
    check_records(records, n, t)?;
    let mut per_target = vec![0usize; t];
    for r in records {
        per_target[r.target] += 1;
    }
    if let Some(k) = per_target.iter().position(|&c| c == 0) {
        return invalid(format!("target {k} has no comparisons"));
    }
    let graph = graph_laplacian(records, n)?;
    let sizes = graph.component_sizes();
    let isolated: Vec<usize> = (0..n).filter(|&i| sizes[graph.component[i]] < 2).collect();
    let p = Problem {
        records,
        roots: laplacian_half(&graph.laplacian)?,
        cfg,
    };

    let mut phi = match init {
        Some(th) => {
            if th.shape() != [n, t] {
                return invalid(format!("initial utilities {:?}, expected [{n}, {t}]", th.shape()));
            }
            p.roots.half.matmul(th)?
        }
        None => Tensor::zeros(vec![n, t]),
    };
    let (f0, mut grad) = p.smooth(&phi)?;
    let mut obj = p.objective(f0, &phi)?;
    let mut history = vec![obj];
    let mut step = cfg.initial_step.clamp(cfg.step_bounds.0, cfg.step_bounds.1);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        // backtracking on the proximal step
        let accepted = loop {
            let mut trial = phi.clone();
            for (x, g) in trial.data_mut().iter_mut().zip(grad.data()) {
                *x -= step * g;
            }
            let trial = if cfg.lambda > 0.0 {
                svt_prox(&trial, cfg.lambda * step)?
            } else {
                trial
            };
            let (fs, g) = p.smooth(&trial)?;
            let o = p.objective(fs, &trial)?;
            if o <= obj {
                break Some((trial, g, o));
            }
            step *= 0.5;
            if step < cfg.step_bounds.0 {
                break None;
            }
        };
        let Some((next, g, o)) = accepted else {
            // no descent available at the smallest step
            converged = true;
            break;
        };
        let s: Vec<f64> = next.data().iter().zip(phi.data()).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.data().iter().zip(grad.data()).map(|(a, b)| a - b).collect();
        step = bb_step(&s, &y, step, cfg.step_bounds);
        let rel = (obj - o).abs() / obj.abs().max(1e-12);
        phi = next;
        grad = g;
        obj = o;
        history.push(obj);
        if rel < cfg.tolerance {
            converged = true;
            break;
        }
    }
    let mut theta = p.theta(&phi)?;
    center_columns(&mut theta, &graph);
    for &i in &isolated {
        for j in 0..t {
            theta.set(i, j, 0.0);
        }
    }
    Ok(FitReport {
        theta,
        objective_history: history,
        iterations,
        converged,
        isolated,
        components: graph.components,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaScore {
    pub multiplier: f64,
    pub lambda: f64,
    /// Normalized log-likelihood of the held-out records.
    pub heldout_loglik: f64,
}

/// Grid of multipliers of [`lambda_max`].
pub const LAMBDA_GRID: [f64; 3] = [1e-3, 1e-2, 1e-1];

/// Smallest λ for which `Θ = 0` is optimal: the spectral norm of the
/// smooth gradient at zero in `Φ` coordinates.
pub fn lambda_max(records: &[ComparisonRecord], n: usize, t: usize, alpha: f64) -> Result<f64> {
    check_records(records, n, t)?;
    let graph = graph_laplacian(records, n)?;
    let roots = laplacian_half(&graph.laplacian)?;
    let (_, g) = mnl_loglik_and_grad(records, &Tensor::zeros(vec![n, t]))?;
    let gphi = roots.pinv_half.matmul(&g)?;
    Ok(alpha * svd(&gphi)?.sigma.first().copied().unwrap_or(0.0))
}

/// Picks λ = κ·λ_max over multipliers κ in `grid` by held-out
/// log-likelihood on a `holdout` fraction of the records, then refits on
/// all records with the chosen value. λ_max comes from the training part.
pub fn select_lambda(
    records: &[ComparisonRecord],
    n: usize,
    t: usize,
    cfg: &SolverConfig,
    grid: &[f64],
    holdout: f64,
    seed: u64,
) -> Result<(FitReport, Vec<LambdaScore>, f64)> {
    if grid.is_empty() || !(0.0 < holdout && holdout < 1.0) {
        return invalid("lambda selection needs a nonempty grid and a holdout fraction in (0, 1)");
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((records.len() as f64) * holdout).round() as usize;
    let held: Vec<ComparisonRecord> = idx[..cut].iter().map(|&i| records[i]).collect();
    let train: Vec<ComparisonRecord> = idx[cut..].iter().map(|&i| records[i]).collect();
    if held.is_empty() || train.is_empty() {
        return invalid("holdout split leaves an empty subset");
    }
    let top = lambda_max(&train, n, t, cfg.alpha)?;
    let mut scores = Vec::with_capacity(grid.len());
    for &kappa in grid {
        let lambda = kappa * top;
        let fit = fit_mnl(&train, n, t, &SolverConfig { lambda, ..cfg.clone() })?;
        let (ll, _) = mnl_loglik_and_grad(&held, &fit.theta)?;
        scores.push(LambdaScore {
            multiplier: kappa,
            lambda,
            heldout_loglik: ll,
        });
    }
    let best = scores
        .iter()
        .fold(&scores[0], |b, s| if s.heldout_loglik > b.heldout_loglik { s } else { b })
        .multiplier;
    let lambda = best * lambda_max(records, n, t, cfg.alpha)?;
    let fit = fit_mnl(records, n, t, &SolverConfig { lambda, ..cfg.clone() })?;
    Ok((fit, scores, lambda))
}

/// Rank-`rank` utilities `U V` with Gaussian factors, each column centered
/// and scaled to standard deviation `scale`.
pub fn planted_utilities(n: usize, t: usize, rank: usize, scale: f64, seed: u64) -> Result<Tensor> {
    if n < 2 || t == 0 || rank == 0 {
        return invalid(format!("planted utilities need n ≥ 2, t ≥ 1, rank ≥ 1 (got {n}, {t}, {rank})"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |r: usize, c: usize| {
        let d: Vec<f64> = (0..r * c).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(vec![r, c], d)
    };
    let u = gauss(n, rank)?;
    let v = gauss(rank, t)?;
    let mut theta = u.matmul(&v)?;
    for j in 0..t {
        let mean = (0..n).map(|i| theta.at(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (theta.at(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        let k = if var > 0.0 { scale / var.sqrt() } else { 0.0 };
        for i in 0..n {
            let x = (theta.at(i, j) - mean) * k;
            theta.set(i, j, x);
        }
    }
    Ok(theta)
}

/// Samples outcomes from the logit model over a random connected design:
/// per target, a random path through all items plus uniform random pairs,
/// about `pairs_per_item` comparisons per item.
pub fn simulate_comparisons(theta: &Tensor, pairs_per_item: usize, seed: u64) -> Result<Vec<ComparisonRecord>> {
    if theta.rank() != 2 || theta.rows() < 2 {
        return invalid(format!("simulation needs N ≥ 2 utilities, got {:?}", theta.shape()));
    }
    let (n, t) = (theta.rows(), theta.cols());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_target = (n * pairs_per_item / 2).max(n - 1);
    let mut out = Vec::with_capacity(per_target * t);
    for target in 0..t {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut pairs: Vec<(usize, usize)> = order.windows(2).map(|w| (w[0], w[1])).collect();
        while pairs.len() < per_target {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n - 1);
            pairs.push((a, if b >= a { b + 1 } else { b }));
        }
        for (a, b) in pairs {
            let p = mnl_probability(theta.at(a, target), theta.at(b, target));
            let p = if p.is_nan() { 0.5 } else { p };
            let outcome = if rng.random::<f64>() < p { Outcome::WinA } else { Outcome::WinB };
            out.push(ComparisonRecord::new(a, b, target, outcome)?);
        }
    }
    Ok(out)
}

/// `item_a<TAB>item_b<TAB>target<TAB>{A,B,T}` per line; blank lines and
/// lines starting with `#` are skipped.
pub fn parse_tsv(text: &str) -> Result<Vec<ComparisonRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |msg: &str| data_err(format!("comparisons line {}: {msg}: {line:?}", lineno + 1));
        if f.len() != 4 {
            return bad("expected 4 tab-separated fields");
        }
        let (Ok(a), Ok(b), Ok(t)) = (f[0].trim().parse(), f[1].trim().parse(), f[2].trim().parse()) else {
            return bad("item and target fields must be nonnegative integers");
        };
        let outcome = match f[3].trim() {
            "A" => Outcome::WinA,
            "B" => Outcome::WinB,
            "T" => Outcome::Tie,
            _ => return bad("outcome must be A, B or T"),
        };
        if a == b {
            return bad("an item cannot be compared with itself");
        }
        out.push(ComparisonRecord::new(a, b, t, outcome)?);
    }
    Ok(out)
}

pub fn write_tsv(records: &[ComparisonRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", r.item_a, r.item_b, r.target, r.outcome.code());
    }
    s
}
