use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use geomoe_core::model::GeometryMode;
use geomoe_core::routing::RoutingMode;
use geomoe_core::verify::Fault;
use serde::Serialize;

use crate::config::{Preset, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "geomoe", version, about = "Multi-geometry mixture-of-experts regression on multimodal clips")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags layered over the resolved configuration file.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct Overrides {
    /// JSON configuration; missing keys take the preset's defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model size preset, overriding the file's.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Seed for model initialization, shuffling, dropout and simulation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Clips per micro-batch.
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    /// Micro-batches per optimizer step.
    #[arg(long, global = true)]
    pub accum: Option<usize>,
    /// all, hyperbolic, spherical or euclidean.
    #[arg(long, global = true)]
    pub geometry: Option<GeometryMode>,
    /// learned, uniform or hard.
    #[arg(long, global = true)]
    pub routing: Option<RoutingMode>,
    /// Absolute nuclear-norm weight for labeling; disables λ selection.
    #[arg(long, global = true)]
    pub lambda_nuc: Option<f64>,
    /// Likelihood scale for labeling.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
}

impl Overrides {
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::resolve(self.config.as_deref())?;
        if let Some(p) = self.preset {
            let keep = cfg.clone();
            cfg.model = p.model();
            cfg.model.geometry = keep.model.geometry;
            cfg.model.routing = keep.model.routing;
            cfg.synth.d_model = cfg.model.d_model;
            cfg.preset = p;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(b) = self.batch {
            cfg.train.batch = b;
        }
        if let Some(a) = self.accum {
            cfg.train.accum = a;
        }
        if let Some(g) = self.geometry {
            cfg.model.geometry = g;
        }
        if let Some(r) = self.routing {
            cfg.model.routing = r;
        }
        if let Some(l) = self.lambda_nuc {
            cfg.solver.lambda = l;
            cfg.labeling.select_lambda = false;
        }
        if let Some(a) = self.alpha {
            cfg.solver.alpha = a;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plant low-rank utilities and sample pairwise comparisons from them.
    SimulateComparisons(SimulateArgs),
    /// Fit latent scores to pairwise comparisons.
    Label(LabelArgs),
    /// Soft-clip metadata scores with statistics of the train split.
    Winsorize(WinsorizeArgs),
    /// Write the synthetic benchmark: metadata, feature containers, split.
    Synth(SynthArgs),
    /// Train a model and save the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one part of a dataset.
    Eval(EvalArgs),
    /// Run the invariant suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 60)]
    pub items: usize,
    #[arg(long, default_value_t = 3)]
    pub targets: usize,
    #[arg(long, default_value_t = 2)]
    pub rank: usize,
    /// Standard deviation of each utility column.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 40)]
    pub pairs_per_item: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct LabelArgs {
    /// Tab-separated comparisons: item_a, item_b, target, outcome.
    #[arg(long)]
    pub comparisons: PathBuf,
    #[arg(long)]
    pub items: usize,
    #[arg(long)]
    pub targets: usize,
    /// Planted utilities to score the recovery against.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Metadata whose entries, in item order, receive the fitted scores.
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    /// Where to write the scored metadata.
    #[arg(long)]
    pub metadata_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct WinsorizeArgs {
    #[arg(long)]
    pub metadata: PathBuf,
    /// Split file; by default one beside the metadata, else a fresh split.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Dataset directory; defaults to the output directory.
    #[arg(long)]
    pub dir: Option<PathBuf>,
}

/// Where clips come from. With no flags, the configured synthetic
/// benchmark is generated in memory.
#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Directory holding metadata.json, features/ and optionally split.json.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    /// Directory of feature containers.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Continue from a training-state checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = Part::Test)]
    pub part: Part,
    /// Report path; defaults to eval.json in the output directory.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Deliberately break one invariant to confirm the suite catches it.
    #[arg(long)]
    pub inject_fault: Option<Fault>,
}
