//! Training loop: micro-batches with gradient accumulation, AdamW under a
//! one-cycle schedule, the adaptive loss balancer, winsorized targets,
//! early stopping on validation macro Spearman, and exact resume.
//!
//! Every random draw comes from a generator keyed by `(seed, purpose,
//! epoch or step, micro-batch)`, and gradients of the micro-batches of one
//! step are summed in micro-batch order, so a run is reproducible for any
//! thread count and across a save/resume boundary.

use std::path::Path;

use geomoe_tensor::{AdamW, OneCycle, OptimState, StepOutcome, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::data::{target_names, FeatureBundle};
use crate::error::{invalid, Error, Result};
use crate::losses::{BalancerState, LossConfig, TargetStats, COMPONENTS};
use crate::metrics::{macro_report, MetricReport};
use crate::model::{total_loss, Crmf, Diagnostics, ModelConfig};

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "GEOMOE_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub accum: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub patience: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch: 4,
            accum: 8,
            peak_lr: 1e-3,
            weight_decay: 0.01,
            warmup_frac: 0.15,
            patience: 5,
            eval_batch: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.accum == 0 || self.eval_batch == 0 {
            return invalid("train config: epochs, accum and eval_batch must be positive");
        }
        if self.batch < 2 {
            return invalid("train config: batch must be at least 2 (correlation losses need two rows)");
        }
        if !(self.peak_lr > 0.0) || !(0.0..1.0).contains(&self.warmup_frac) || self.weight_decay < 0.0 {
            return invalid("train config: needs peak_lr > 0, warmup_frac ∈ [0, 1), weight_decay ≥ 0");
        }
        Ok(())
    }
}

/// Thread count from [`THREADS_ENV`], if set to a positive integer.
pub fn env_threads() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Generator for one purpose and position of a run.
pub fn derived_rng(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, v) in [seed, purpose, a, b].into_iter().enumerate() {
        key[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

const PURPOSE_SHUFFLE: u64 = 1;
const PURPOSE_DROPOUT: u64 = 2;

/// Batches of one epoch: a seeded permutation cut into `batch`-sized
/// pieces; a single leftover clip joins the last batch.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, PURPOSE_SHUFFLE, epoch as u64, 0));
    let mut out: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(tail);
    }
    out
}

/// Means over the micro-batches of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub components: Vec<f64>,
    pub weights: Vec<f64>,
    pub routing_mean: [f64; 3],
    pub routing_entropy: f64,
    pub tangent_norms: [f64; 3],
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean raw value of each loss component, in [`COMPONENTS`] order.
    pub components: Vec<f64>,
    /// Balancer weights at the end of the epoch.
    pub weights: Vec<f64>,
    pub routing_mean: [f64; 3],
    pub routing_entropy: f64,
    pub tangent_norms: [f64; 3],
    pub skipped_steps: u64,
    pub val_spearman: f64,
    pub val_kendall_tau_b: f64,
    pub val_c_index: f64,
    pub val_mse: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    /// Next batch of the current epoch.
    pub cursor: usize,
    pub best_score: Option<f64>,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
    pub stopped_early: bool,
    pub finished: bool,
    pub history: Vec<EpochLog>,
    /// Step logs of the current, unfinished epoch.
    pub epoch_steps: Vec<StepLog>,
}

impl Progress {
    /// Records a validation score; only a strict improvement resets the
    /// patience counter.
    pub fn observe(&mut self, score: f64) -> bool {
        let improved = self.best_score.is_none_or(|b| score > b);
        if improved {
            self.best_score = Some(score);
            self.best_epoch = Some(self.epoch);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        improved
    }

    /// Moves to the next epoch, finishing on exhausted patience or budget.
    pub fn advance(&mut self, patience: usize, epochs: usize) {
        self.epoch += 1;
        self.cursor = 0;
        if self.bad_epochs >= patience {
            self.stopped_early = true;
            self.finished = true;
        } else if self.epoch >= epochs {
            self.finished = true;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_spearman: Option<f64>,
    pub stopped_early: bool,
    pub history: Vec<EpochLog>,
}

pub struct Trainer<'a> {
    pub model: Crmf,
    pub loss: LossConfig,
    pub cfg: TrainConfig,
    pub optim: OptimState,
    pub balancer: BalancerState,
    pub stats: TargetStats,
    pub progress: Progress,
    pub best_params: Option<Vec<Tensor>>,
    train: &'a [FeatureBundle],
    val: &'a [FeatureBundle],
    targets: Vec<Vec<f64>>,
    batches: Vec<Vec<usize>>,
    pool: rayon::ThreadPool,
}

struct MicroResult {
    grads: Vec<Tensor>,
    total: f64,
    components: Vec<f64>,
    diagnostics: Diagnostics,
}

fn targets_of(bundles: &[FeatureBundle], split: &str) -> Result<Vec<Vec<f64>>> {
    bundles
        .iter()
        .map(|b| match b.targets {
            Some(t) => Ok(t.to_vec()),
            None => invalid(format!("{split} clip {} has no targets", b.clip_id)),
        })
        .collect()
}

/// Evaluation-mode metrics of `model` on `bundles` against raw targets.
pub fn evaluate(model: &Crmf, bundles: &[FeatureBundle], batch: usize) -> Result<(MetricReport, Vec<Vec<f64>>)> {
    let truth = targets_of(bundles, "evaluation")?;
    let (pred, _) = model.predict(bundles, batch)?;
    Ok((macro_report(&pred, &truth, &target_names())?, pred))
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: Crmf,
        loss: LossConfig,
        cfg: TrainConfig,
        train: &'a [FeatureBundle],
        val: &'a [FeatureBundle],
        threads: Option<usize>,
    ) -> Result<Self> {
        loss.validate()?;
        cfg.validate()?;
        if train.len() < 2 || val.len() < 2 {
            return invalid(format!(
                "training needs at least 2 train and 2 validation clips, got {} and {}",
                train.len(),
                val.len()
            ));
        }
        let raw = targets_of(train, "train")?;
        targets_of(val, "validation")?;
        let stats = TargetStats::fit(&raw)?;
        let optim = OptimState::new(&model.params.values);
        let mut t = Self {
            model,
            loss,
            cfg,
            optim,
            balancer: BalancerState::new(COMPONENTS.len()),
            stats,
            progress: Progress::default(),
            best_params: None,
            train,
            val,
            targets: Vec::new(),
            batches: Vec::new(),
            pool: build_pool(threads)?,
        };
        t.targets = t.winsorized(&raw);
        t.batches = epoch_batches(train.len(), t.cfg.batch, t.cfg.seed, 0);
        Ok(t)
    }

    fn winsorized(&self, raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
        raw.iter()
            .map(|y| self.stats.winsorize(y, self.loss.winsor_theta, self.loss.winsor_s))
            .collect()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches.len()
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.batches.len().div_ceil(self.cfg.accum) as u64
    }

    pub fn schedule(&self) -> OneCycle {
        let mut s = OneCycle::new(self.cfg.peak_lr, self.steps_per_epoch() * self.cfg.epochs as u64);
        s.warmup_frac = self.cfg.warmup_frac;
        s
    }

    fn adamw(&self) -> AdamW {
        AdamW {
            weight_decay: self.cfg.weight_decay,
            ..AdamW::default()
        }
    }

    pub fn done(&self) -> bool {
        self.progress.finished
    }

    fn micro(&self, batch: &[usize], step: u64, micro: usize) -> Result<MicroResult> {
        let model = &self.model;
        let tape = Tape::new();
        let vars = model.params.bind(&tape, true);
        let refs: Vec<&FeatureBundle> = batch.iter().map(|&i| &self.train[i]).collect();
        let rows: Vec<Vec<f64>> = batch.iter().map(|&i| self.targets[i].clone()).collect();
        let mut rng = derived_rng(self.cfg.seed, PURPOSE_DROPOUT, step, micro as u64);
        let out = model.forward(&tape, &vars, &refs, Some(&mut rng))?;
        let y = tape.constant(Tensor::from_rows(&rows)?);
        let (total, components) = total_loss(model, &vars, &out, y, &self.loss, &self.balancer)?;
        let value = total.item();
        if !value.is_finite() || components.iter().any(|c| !c.is_finite()) {
            return Err(self.nan_dump(batch, step, value, &components, &out.diagnostics));
        }
        let grads = tape.backward(total)?;
        Ok(MicroResult {
            grads: vars.iter().map(|&v| grads.wrt(v)).collect(),
            total: value,
            components,
            diagnostics: out.diagnostics,
        })
    }

    fn nan_dump(&self, batch: &[usize], step: u64, total: f64, comps: &[f64], d: &Diagnostics) -> Error {
        let norms: Vec<Value> = self
            .model
            .params
            .names
            .iter()
            .zip(&self.model.params.values)
            .map(|(n, t)| json!({"name": n, "norm": t.frobenius_norm(), "finite": t.is_finite()}))
            .collect();
        let dump = json!({
            "error": "non-finite loss",
            "epoch": self.progress.epoch,
            "step": step,
            "clips": batch.iter().map(|&i| self.train[i].clip_id.clone()).collect::<Vec<_>>(),
            "total": total.to_string(),
            "components": COMPONENTS.iter().zip(comps).map(|(n, v)| json!({"name": n, "value": v.to_string()})).collect::<Vec<_>>(),
            "diagnostics": d,
            "balancer": self.balancer,
            "parameter_norms": norms,
        });
        Error::Invalid(format!("training aborted on a non-finite loss; diagnostics: {dump}"))
    }

    /// One optimizer step over the next `accum` micro-batches.
    pub fn step(&mut self) -> Result<StepLog> {
        if self.done() {
            return invalid("training already finished");
        }
        let step = self.optim.step + self.optim.skipped;
        let start = self.progress.cursor;
        let end = (start + self.cfg.accum).min(self.batches.len());
        let work: Vec<(usize, &[usize])> = (start..end).map(|i| (i - start, self.batches[i].as_slice())).collect();
        let results: Vec<Result<MicroResult>> =
            self.pool.install(|| work.par_iter().map(|&(m, b)| self.micro(b, step, m)).collect());
        let results: Vec<MicroResult> = results.into_iter().collect::<Result<_>>()?;

        let k = results.len() as f64;
        let mut grads = results[0].grads.clone();
        for r in &results[1..] {
            for (g, h) in grads.iter_mut().zip(&r.grads) {
                g.add_assign(h);
            }
        }
        grads.iter_mut().for_each(|g| g.scale_in_place(1.0 / k));
        let mut components = vec![0.0; COMPONENTS.len()];
        let mut log = StepLog {
            step,
            lr: self.schedule().rate(self.optim.step),
            loss: 0.0,
            components: Vec::new(),
            weights: Vec::new(),
            routing_mean: [0.0; 3],
            routing_entropy: 0.0,
            tangent_norms: [0.0; 3],
            applied: false,
        };
        for r in &results {
            log.loss += r.total / k;
            for (c, v) in components.iter_mut().zip(&r.components) {
                *c += v / k;
            }
            for j in 0..3 {
                log.routing_mean[j] += r.diagnostics.routing_mean[j] / k;
                log.tangent_norms[j] += r.diagnostics.tangent_norms[j] / k;
            }
            log.routing_entropy += r.diagnostics.routing_entropy / k;
        }
        let scales = self.model.params.scales(&self.model.cfg.group_lr);
        let outcome = self
            .adamw()
            .step(&mut self.model.params.values, &grads, &mut self.optim, log.lr, &scales)?;
        log.applied = outcome == StepOutcome::Applied;
        self.balancer.update(&components, &self.loss.balancer)?;
        log.components = components;
        log.weights = self.balancer_weights();
        self.progress.cursor = end;
        self.progress.epoch_steps.push(log.clone());
        Ok(log)
    }

    pub fn balancer_weights(&self) -> Vec<f64> {
        let alpha = self.model.params.get("balancer.alpha").expect("balancer logits");
        self.balancer.weights(alpha.data(), &self.loss.balancer)
    }

    pub fn epoch_finished(&self) -> bool {
        self.progress.cursor >= self.batches.len()
    }

    /// Validation, early-stopping bookkeeping and the move to the next epoch.
    pub fn end_epoch(&mut self) -> Result<EpochLog> {
        let (report, _) = evaluate(&self.model, self.val, self.cfg.eval_batch)?;
        let score = report.macro_avg.spearman;
        let improved = self.progress.observe(score);
        if improved {
            self.best_params = Some(self.model.params.values.clone());
        }
        let steps = std::mem::take(&mut self.progress.epoch_steps);
        let k = steps.len().max(1) as f64;
        let mean = |f: &dyn Fn(&StepLog) -> f64| steps.iter().map(f).sum::<f64>() / k;
        let log = EpochLog {
            epoch: self.progress.epoch,
            steps: steps.len() as u64,
            lr: steps.last().map_or(0.0, |s| s.lr),
            train_loss: mean(&|s| s.loss),
            components: (0..COMPONENTS.len()).map(|i| mean(&|s| s.components[i])).collect(),
            weights: self.balancer_weights(),
            routing_mean: [0, 1, 2].map(|j| mean(&|s| s.routing_mean[j])),
            routing_entropy: mean(&|s| s.routing_entropy),
            tangent_norms: [0, 1, 2].map(|j| mean(&|s| s.tangent_norms[j])),
            skipped_steps: steps.iter().filter(|s| !s.applied).count() as u64,
            val_spearman: score,
            val_kendall_tau_b: report.macro_avg.kendall_tau_b,
            val_c_index: report.macro_avg.c_index,
            val_mse: report.macro_avg.mse,
            improved,
        };
        self.progress.history.push(log.clone());
        self.progress.advance(self.cfg.patience, self.cfg.epochs);
        if !self.progress.finished {
            self.batches = epoch_batches(self.train.len(), self.cfg.batch, self.cfg.seed, self.progress.epoch);
        }
        Ok(log)
    }

    /// Trains to completion, calling `on_epoch` after every epoch.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Trainer<'a>, &EpochLog) -> Result<()>) -> Result<TrainSummary> {
        while !self.done() {
            while !self.epoch_finished() {
                self.step()?;
            }
            let log = self.end_epoch()?;
            on_epoch(self, &log)?;
        }
        Ok(self.summary())
    }

    pub fn summary(&self) -> TrainSummary {
        TrainSummary {
            model: self.model.cfg.clone(),
            loss: self.loss.clone(),
            train: self.cfg.clone(),
            epochs_run: self.progress.history.len(),
            best_epoch: self.progress.best_epoch,
            best_val_spearman: self.progress.best_score,
            stopped_early: self.progress.stopped_early,
            history: self.progress.history.clone(),
        }
    }

    /// The model with the best validation parameters (the current ones
    /// before any validation).
    pub fn best_model(&self) -> Crmf {
        let mut m = self.model.clone();
        if let Some(p) = &self.best_params {
            m.params.values = p.clone();
        }
        m
    }

    fn meta(&self) -> Value {
        json!({
            "kind": "train-state",
            "model": self.model.cfg,
            "loss": self.loss,
            "train": self.cfg,
            "optimizer": {"step": self.optim.step, "skipped": self.optim.skipped},
            "balancer": self.balancer,
            "target_stats": self.stats,
            "progress": self.progress,
            "train_clips": self.train.len(),
            "val_clips": self.val.len(),
        })
    }

    /// Everything needed to continue this run bit-for-bit.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let names = &self.model.params.names;
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for (n, t) in names.iter().zip(&self.model.params.values) {
            tensors.push((format!("param/{n}"), t));
        }
        for (n, t) in names.iter().zip(&self.optim.m) {
            tensors.push((format!("adam.m/{n}"), t));
        }
        for (n, t) in names.iter().zip(&self.optim.v) {
            tensors.push((format!("adam.v/{n}"), t));
        }
        if let Some(best) = &self.best_params {
            for (n, t) in names.iter().zip(best) {
                tensors.push((format!("best/{n}"), t));
            }
        }
        write_checkpoint(path, &self.meta(), &tensors)
    }

    /// Continues a run saved by [`Trainer::save_state`] on the same data.
    pub fn resume(
        path: &Path,
        train: &'a [FeatureBundle],
        val: &'a [FeatureBundle],
        threads: Option<usize>,
    ) -> Result<Self> {
        let (header, tensors) = read_checkpoint(path)?;
        let meta = header.meta;
        if meta["kind"] != "train-state" {
            return invalid(format!("{} is not a training-state checkpoint", path.display()));
        }
        let model_cfg: ModelConfig = serde_json::from_value(meta["model"].clone())?;
        let loss: LossConfig = serde_json::from_value(meta["loss"].clone())?;
        let cfg: TrainConfig = serde_json::from_value(meta["train"].clone())?;
        if meta["train_clips"].as_u64() != Some(train.len() as u64) || meta["val_clips"].as_u64() != Some(val.len() as u64) {
            return invalid("resume: train/validation sizes differ from the saved run");
        }
        let model = Crmf::new(model_cfg, 0)?;
        let mut t = Trainer::new(model, loss, cfg, train, val, threads)?;
        let mut groups: std::collections::HashMap<&str, Vec<(String, Tensor)>> = Default::default();
        for (name, tensor) in tensors {
            let (group, rest) = name
                .split_once('/')
                .ok_or_else(|| Error::Invalid(format!("checkpoint tensor {name} has no group")))?;
            let group = match group {
                "param" => "param",
                "adam.m" => "adam.m",
                "adam.v" => "adam.v",
                "best" => "best",
                other => return invalid(format!("unknown checkpoint group {other}")),
            };
            groups.entry(group).or_default().push((rest.to_string(), tensor));
        }
        let template = t.model.params.clone();
        let mut take = |g: &str| -> Result<Option<Vec<Tensor>>> {
            let Some(entries) = groups.remove(g) else { return Ok(None) };
            let mut store = template.clone();
            store.load(entries)?;
            Ok(Some(store.values))
        };
        let missing = |g: &str| Error::Invalid(format!("resume: checkpoint lacks the {g} tensors"));
        let params = take("param")?.ok_or_else(|| missing("param"))?;
        let m = take("adam.m")?.ok_or_else(|| missing("adam.m"))?;
        let v = take("adam.v")?.ok_or_else(|| missing("adam.v"))?;
        let best = take("best")?;
        t.model.params.values = params;
        t.optim.m = m;
        t.optim.v = v;
        t.best_params = best;
        t.optim.step = meta["optimizer"]["step"].as_u64().unwrap_or(0);
        t.optim.skipped = meta["optimizer"]["skipped"].as_u64().unwrap_or(0);
        t.balancer = serde_json::from_value(meta["balancer"].clone())?;
        let stats: TargetStats = serde_json::from_value(meta["target_stats"].clone())?;
        if stats != t.stats {
            return invalid("resume: training targets differ from the saved run");
        }
        t.progress = serde_json::from_value(meta["progress"].clone())?;
        t.batches = epoch_batches(train.len(), t.cfg.batch, t.cfg.seed, t.progress.epoch);
        Ok(t)
    }
}

fn build_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads.or_else(env_threads) {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Invalid(format!("thread pool: {e}")))
}

/// Writes eval-ready parameters with the configuration and target
/// statistics.
pub fn save_model(path: &Path, model: &Crmf, extra: Value) -> Result<()> {
    let meta = json!({"kind": "model", "model": model.cfg, "extra": extra});
    let tensors: Vec<(String, &Tensor)> = model
        .params
        .names
        .iter()
        .zip(&model.params.values)
        .map(|(n, t)| (format!("param/{n}"), t))
        .collect();
    write_checkpoint(path, &meta, &tensors)
}

/// Loads the parameters of a model or training-state checkpoint. For the
/// latter, `best` selects the best-validation parameters when present.
pub fn load_model(path: &Path, best: bool) -> Result<(Crmf, Value)> {
    let (header, tensors) = read_checkpoint(path)?;
    let cfg: ModelConfig = serde_json::from_value(header.meta["model"].clone())?;
    let mut model = Crmf::new(cfg, 0)?;
    let has_best = tensors.iter().any(|(n, _)| n.starts_with("best/"));
    let prefix = if best && has_best { "best/" } else { "param/" };
    let chosen: Vec<(String, Tensor)> = tensors
        .into_iter()
        .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t)))
        .collect();
    model.params.load(chosen)?;
    Ok((model, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_counts_non_improving_epochs() {
        let mut p = Progress::default();
        let scores = [0.5, 0.6, 0.6, 0.55, 0.59, 0.6, 0.58];
        for s in scores {
            p.observe(s);
            p.advance(5, 30);
        }
        assert!(p.stopped_early && p.finished);
        assert_eq!((p.best_epoch, p.best_score, p.epoch), (Some(1), Some(0.6), 7));
    }

    #[test]
    fn improvement_resets_patience() {
        let mut p = Progress::default();
        for s in [0.1, 0.0, 0.0, 0.0, 0.0, 0.2, 0.0] {
            p.observe(s);
            p.advance(5, 30);
        }
        assert!(!p.finished);
        assert_eq!(p.bad_epochs, 1);
    }

    #[test]
    fn budget_ends_the_run() {
        let mut p = Progress::default();
        for s in [0.1, 0.2, 0.3] {
            p.observe(s);
            p.advance(5, 3);
        }
        assert!(p.finished && !p.stopped_early);
    }

    #[test]
    fn leftover_singleton_joins_the_last_batch() {
        let b = epoch_batches(9, 4, 3, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert_ne!(epoch_batches(9, 4, 3, 0), epoch_batches(9, 4, 3, 1));
    }
}
