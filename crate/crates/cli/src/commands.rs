use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use geomoe_core::data::{
    grouped_split, load_features, load_metadata, metadata_json, write_features, ClipRecord, FeatureBundle, SplitSpec,
    TARGETS,
};
use geomoe_core::labeling::{fit_mnl, parse_tsv, planted_utilities, select_lambda, simulate_comparisons, write_tsv};
use geomoe_core::losses::TargetStats;
use geomoe_core::metrics::{spearman, MetricReport};
use geomoe_core::model::Crmf;
use geomoe_core::synth::synth_generate;
use geomoe_core::train::{evaluate, load_model, save_model, Trainer};
use geomoe_core::verify::{run_verify, VerifyOptions};
use geomoe_tensor::Tensor;
use serde_json::{json, Value};

use crate::args::*;
use crate::config::RunConfig;

pub const METADATA_FILE: &str = "metadata.json";
pub const FEATURES_DIR: &str = "features";
pub const SPLIT_FILE: &str = "split.json";

fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| (0..t.cols()).map(|j| t.at(i, j)).collect()).collect()
}

fn column(rows: &[Vec<f64>], j: usize) -> Vec<f64> {
    rows.iter().map(|r| r[j]).collect()
}

pub fn simulate(cfg: &RunConfig, out: &Path, a: &SimulateArgs) -> Result<()> {
    let seed = cfg.train.seed;
    let theta = planted_utilities(a.items, a.targets, a.rank, a.scale, seed).context("planting utilities")?;
    let records = simulate_comparisons(&theta, a.pairs_per_item, seed ^ 0x5eed).context("simulating comparisons")?;
    let echo = json!({"run": cfg, "simulation": a});
    let mut tsv = format!("# config {}\n", serde_json::to_string(&echo)?);
    tsv.push_str(&write_tsv(&records));
    fs::create_dir_all(out)?;
    fs::write(out.join("comparisons.tsv"), tsv)?;
    write_json(&out.join("truth.json"), &json!({"config": echo, "theta": rows_of(&theta)}))?;
    eprintln!("wrote {} comparisons over {} items to {}", records.len(), a.items, out.display());
    Ok(())
}

pub fn label(cfg: &RunConfig, out: &Path, a: &LabelArgs) -> Result<()> {
    let text = fs::read_to_string(&a.comparisons).with_context(|| format!("reading {}", a.comparisons.display()))?;
    let records = parse_tsv(&text).context("parsing comparisons")?;
    ensure!(!records.is_empty(), "no comparisons in {}", a.comparisons.display());
    let (fit, selection, lambda) = if cfg.labeling.select_lambda {
        let (fit, scores, lambda) = select_lambda(
            &records,
            a.items,
            a.targets,
            &cfg.solver,
            &cfg.labeling.grid,
            cfg.labeling.holdout,
            cfg.train.seed,
        )
        .context("labeling solver (lambda selection)")?;
        (fit, Some(scores), lambda)
    } else {
        let fit = fit_mnl(&records, a.items, a.targets, &cfg.solver).context("labeling solver")?;
        (fit, None, cfg.solver.lambda)
    };
    let scores = rows_of(&fit.theta);

    let recovery = match &a.truth {
        Some(p) => {
            let truth: Vec<Vec<f64>> =
                serde_json::from_value(read_json(p)?["theta"].clone()).context("truth file needs a theta matrix")?;
            ensure!(
                truth.len() == a.items && truth.iter().all(|r| r.len() == a.targets),
                "truth matrix must be {} x {}",
                a.items,
                a.targets
            );
            let per: Vec<f64> = (0..a.targets)
                .map(|j| spearman(&column(&scores, j), &column(&truth, j)).map(|s| s.value))
                .collect::<std::result::Result<_, _>>()?;
            let min = per.iter().copied().fold(f64::INFINITY, f64::min);
            eprintln!("recovery: per-target spearman {per:?}, min {min:.4}");
            Some(json!({"per_target_spearman": per, "min_spearman": min}))
        }
        None => None,
    };

    let echo = json!({"run": cfg, "label": a});
    let report = json!({
        "config": echo,
        "lambda": lambda,
        "lambda_selection": selection,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "objective_history": fit.objective_history,
        "isolated_items": fit.isolated,
        "components": fit.components,
        "scores": scores,
        "recovery": recovery,
    });
    write_json(&out.join("labels.json"), &report)?;

    if a.targets == TARGETS {
        let mut recs: Vec<ClipRecord> = match &a.metadata {
            Some(p) => load_metadata(p)?,
            None => (0..a.items)
                .map(|i| ClipRecord::new(format!("item-{i:05}"), format!("item-{i:05}"), [0.0; TARGETS]))
                .collect(),
        };
        ensure!(
            recs.len() == a.items,
            "metadata has {} entries but {} items were labeled",
            recs.len(),
            a.items
        );
        for (r, s) in recs.iter_mut().zip(&scores) {
            r.scores.copy_from_slice(s);
        }
        let path = a.metadata_out.clone().unwrap_or_else(|| out.join(METADATA_FILE));
        write_json(&path, &metadata_json(&recs))?;
    } else if a.metadata.is_some() {
        bail!("writing metadata scores needs exactly {TARGETS} targets, got {}", a.targets);
    }
    eprintln!(
        "labeled {} items x {} targets with lambda {lambda:.4e} in {} iterations",
        a.items, a.targets, fit.iterations
    );
    Ok(())
}

/// Metadata plus a split: an explicit file, one stored beside the
/// metadata, or a fresh grouped split.
fn resolve_split(cfg: &RunConfig, records: &[ClipRecord], explicit: Option<&Path>, dir: Option<&Path>) -> Result<SplitSpec> {
    let stored = dir.map(|d| d.join(SPLIT_FILE)).filter(|p| p.exists());
    let split: SplitSpec = match explicit.map(Path::to_path_buf).or(stored) {
        Some(p) => serde_json::from_value(read_json(&p)?).with_context(|| format!("split file {}", p.display()))?,
        None => grouped_split(records, cfg.split.fractions, cfg.split.seed)?,
    };
    let users = records.iter().map(|r| (r.id.clone(), r.user_no.clone())).collect();
    split.check_disjoint(&users)?;
    Ok(split)
}

fn pick<'a, T>(items: &'a [T], id: impl Fn(&T) -> &str, ids: &[String]) -> Vec<&'a T> {
    let keep: HashSet<&str> = ids.iter().map(String::as_str).collect();
    items.iter().filter(|x| keep.contains(id(x))).collect()
}

pub fn winsorize(cfg: &RunConfig, out: &Path, a: &WinsorizeArgs) -> Result<()> {
    let mut records = load_metadata(&a.metadata)?;
    let split = resolve_split(cfg, &records, a.split.as_deref(), a.metadata.parent())?;
    let train: Vec<Vec<f64>> = pick(&records, |r| &r.id, &split.train).iter().map(|r| r.scores.to_vec()).collect();
    ensure!(!train.is_empty(), "the train split is empty");
    let stats = TargetStats::fit(&train)?;
    let (theta, s) = (cfg.loss.winsor_theta, cfg.loss.winsor_s);
    for r in &mut records {
        let w = stats.winsorize(&r.scores, theta, s);
        r.scores.copy_from_slice(&w);
    }
    write_json(&out.join(METADATA_FILE), &metadata_json(&records))?;
    write_json(
        &out.join("winsorization.json"),
        &json!({"config": {"run": cfg, "winsorize": a}, "theta": theta, "s": s, "stats": stats, "train_clips": split.train.len()}),
    )?;
    eprintln!("winsorized {} records with train statistics of {} clips", records.len(), split.train.len());
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: &Path, a: &SynthArgs) -> Result<()> {
    let dir = a.dir.clone().unwrap_or_else(|| out.to_path_buf());
    let data = synth_generate(&cfg.synth)?;
    let split = grouped_split(&data.records, cfg.split.fractions, cfg.split.seed)?;
    let feats = dir.join(FEATURES_DIR);
    fs::create_dir_all(&feats)?;
    for b in &data.bundles {
        write_features(&feats, b)?;
    }
    write_json(&dir.join(METADATA_FILE), &metadata_json(&data.records))?;
    write_json(&dir.join(SPLIT_FILE), &serde_json::to_value(&split)?)?;
    let mut recipe = data.recipe;
    recipe["config"] = json!({"run": cfg});
    write_json(&dir.join("recipe.json"), &recipe)?;
    eprintln!("wrote {} synthetic clips to {}", data.records.len(), dir.display());
    Ok(())
}

struct Dataset {
    bundles: Vec<FeatureBundle>,
    split: SplitSpec,
    source: Value,
}

impl Dataset {
    fn part(&self, ids: &[String]) -> Vec<FeatureBundle> {
        pick(&self.bundles, |b| &b.clip_id, ids).into_iter().cloned().collect()
    }
}

fn load_dataset(cfg: &RunConfig, d_model: usize, src: &DataArgs) -> Result<Dataset> {
    let (meta, feats, dir) = match (&src.data, &src.metadata, &src.features) {
        (Some(d), None, None) => (d.join(METADATA_FILE), d.join(FEATURES_DIR), Some(d.as_path())),
        (None, Some(m), Some(f)) => (m.clone(), f.clone(), m.parent()),
        (None, None, None) => {
            let data = synth_generate(&cfg.synth)?;
            let split = grouped_split(&data.records, cfg.split.fractions, cfg.split.seed)?;
            ensure!(
                cfg.synth.d_model == d_model,
                "synthetic d_model {} does not match the model's {d_model}",
                cfg.synth.d_model
            );
            return Ok(Dataset {
                bundles: data.bundles,
                split,
                source: json!({"synthetic": cfg.synth}),
            });
        }
        _ => bail!("give either --data or both --metadata and --features"),
    };
    let records = load_metadata(&meta)?;
    let split = resolve_split(cfg, &records, src.split.as_deref(), dir)?;
    let bundles = load_features(&feats, &records, d_model).context("loading feature containers")?;
    Ok(Dataset {
        bundles,
        split,
        source: json!({"metadata": meta, "features": feats}),
    })
}

pub fn train(cfg: &RunConfig, out: &Path, a: &TrainArgs) -> Result<()> {
    let ds = load_dataset(cfg, cfg.model.d_model, &a.data)?;
    let (tr, va) = (ds.part(&ds.split.train), ds.part(&ds.split.val));
    let echo = json!({"run": cfg, "train": a, "data": ds.source});
    fs::create_dir_all(out)?;
    let state = out.join("state.gmck");
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(p, &tr, &va, None).with_context(|| format!("resuming from {}", p.display()))?,
        None => {
            let model = Crmf::new(cfg.model.clone(), cfg.train.seed)?;
            Trainer::new(model, cfg.loss.clone(), cfg.train.clone(), &tr, &va, None)?
        }
    };
    eprintln!(
        "training on {} clips, validating on {}, {} optimizer steps per epoch",
        tr.len(),
        va.len(),
        trainer.steps_per_epoch()
    );
    let summary = trainer
        .run(|t, e| {
            eprintln!(
                "epoch {:>2}  loss {:.5}  val rho {:.4}  tau-b {:.4}  c-index {:.4}  routing [{:.3} {:.3} {:.3}]{}",
                e.epoch,
                e.train_loss,
                e.val_spearman,
                e.val_kendall_tau_b,
                e.val_c_index,
                e.routing_mean[0],
                e.routing_mean[1],
                e.routing_mean[2],
                if e.improved { "  *" } else { "" }
            );
            t.save_state(&state)?;
            Ok(())
        })
        .context("training")?;
    let best = trainer.best_model();
    let stats = serde_json::to_value(&trainer.stats)?;
    save_model(&out.join("model.gmck"), &best, json!({"config": echo, "target_stats": stats}))?;
    let (val, _) = evaluate(&best, &va, cfg.train.eval_batch)?;
    write_json(
        &out.join("report.json"),
        &json!({"config": echo, "summary": summary, "best_validation": val}),
    )?;
    eprintln!(
        "best validation macro rho {:.4} at epoch {:?}",
        summary.best_val_spearman.unwrap_or(f64::NAN),
        summary.best_epoch
    );
    Ok(())
}

/// Fixed-width rendering of a report; every number has four decimals.
pub fn report_table(r: &MetricReport) -> String {
    let mut s = format!(
        "{:<22} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "target", "rho", "tau-b", "c-index", "r", "mse"
    );
    let mut row = |name: &str, v: [f64; 5]| {
        let _ = writeln!(
            s,
            "{name:<22} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            v[0], v[1], v[2], v[3], v[4]
        );
    };
    for t in &r.per_target {
        row(&t.target, [t.spearman, t.kendall_tau_b, t.c_index, t.pearson, t.mse]);
    }
    let m = &r.macro_avg;
    row("macro", [m.spearman, m.kendall_tau_b, m.c_index, m.pearson, m.mse]);
    s
}

pub fn eval(cfg: &RunConfig, out: &Path, overrides: &Overrides, a: &EvalArgs) -> Result<()> {
    let (mut model, meta) = load_model(&a.checkpoint, true).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    if let Some(g) = overrides.geometry {
        model.cfg.geometry = g;
    }
    if let Some(r) = overrides.routing {
        model.cfg.routing = r;
    }
    let ds = load_dataset(cfg, model.cfg.d_model, &a.data)?;
    let ids: Vec<String> = match a.part {
        Part::Train => ds.split.train.clone(),
        Part::Val => ds.split.val.clone(),
        Part::Test => ds.split.test.clone(),
        Part::All => ds.bundles.iter().map(|b| b.clip_id.clone()).collect(),
    };
    let bundles = ds.part(&ids);
    ensure!(bundles.len() >= 2, "the {:?} part has {} clips; at least 2 are needed", a.part, bundles.len());
    let (report, _) = evaluate(&model, &bundles, cfg.train.eval_batch).context("evaluation")?;
    let table = report_table(&report);
    let doc = json!({
        "config": {"run": cfg, "eval": a, "data": ds.source, "model": model.cfg, "checkpoint_meta": meta},
        "part": a.part,
        "clips": bundles.len(),
        "report": report,
        "table": table.lines().collect::<Vec<_>>(),
    });
    let path = a.report.clone().unwrap_or_else(|| out.join("eval.json"));
    write_json(&path, &doc)?;
    print!("{table}");
    Ok(())
}

pub fn verify(out: &Path, a: &VerifyArgs) -> Result<bool> {
    let opts = VerifyOptions {
        seed: a.seed,
        fault: a.inject_fault,
        ..VerifyOptions::default()
    };
    let report = run_verify(&opts);
    for c in &report.checks {
        let value = c.value.map_or("error".to_string(), |v| format!("{v:.3e}"));
        println!(
            "{}  {:<14} {:<48} value {:>10}  tol {:.1e}  {:.2}s{}",
            if c.passed { "PASS" } else { "FAIL" },
            c.suite,
            c.name,
            value,
            c.tolerance,
            c.seconds,
            if c.passed || c.detail.is_empty() { String::new() } else { format!("  ({})", c.detail) }
        );
    }
    println!(
        "{} of {} checks passed in {:.1}s",
        report.checks.len() - report.failed.len(),
        report.checks.len(),
        report.seconds
    );
    write_json(&out.join("verify.json"), &serde_json::to_value(&report)?)?;
    Ok(report.passed)
}

pub fn default_out() -> PathBuf {
    PathBuf::from("out")
}
