//! Run configuration: a preset, deep-merged with an optional JSON file,
//! then with command-line flags. The resolved value is echoed into every
//! output artifact.

use std::path::Path;

use anyhow::{bail, Context, Result};
use geomoe_core::labeling::{SolverConfig, LAMBDA_GRID};
use geomoe_core::losses::LossConfig;
use geomoe_core::model::ModelConfig;
use geomoe_core::synth::SynthSpec;
use geomoe_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// d_model 768, d_e 128.
    Full,
    /// d_model 64, d_e 32: fits a single CPU core.
    Desk,
    /// d_model 16, d_e 8: for smoke tests.
    Tiny,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Full => ModelConfig::default(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Tiny => ModelConfig::tiny(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: [0.7, 0.15, 0.15],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingConfig {
    /// Choose λ by held-out likelihood; otherwise `solver.lambda` is used
    /// as given.
    pub select_lambda: bool,
    /// Multipliers of the smallest λ that zeroes the solution.
    pub grid: Vec<f64>,
    pub holdout: f64,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            select_lambda: true,
            grid: LAMBDA_GRID.to_vec(),
            holdout: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub solver: SolverConfig,
    pub labeling: LabelingConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub split: SplitConfig,
}

impl RunConfig {
    fn base(preset: Preset) -> Self {
        let model = preset.model();
        Self {
            preset,
            synth: SynthSpec {
                d_model: model.d_model,
                ..SynthSpec::default()
            },
            model,
            loss: LossConfig::default(),
            solver: SolverConfig::default(),
            labeling: LabelingConfig::default(),
            train: TrainConfig::default(),
            split: SplitConfig::default(),
        }
    }

    /// Defaults of the file's preset (desk when absent), overlaid with the
    /// file's values key by key.
    pub fn resolve(file: Option<&Path>) -> Result<Self> {
        let user = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str::<Value>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Value::Object(Map::new()),
        };
        if !user.is_object() {
            bail!("config must be a JSON object");
        }
        let preset = match user.get("preset") {
            Some(v) => serde_json::from_value(v.clone()).context("config preset")?,
            None => Preset::Desk,
        };
        let mut merged = serde_json::to_value(Self::base(preset))?;
        merge(&mut merged, &user, "")?;
        let cfg: Self = serde_json::from_value(merged).context("config does not match the expected schema")?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.solver.validate()?;
        self.train.validate()?;
        let l = &self.labeling;
        if l.grid.is_empty() || !l.grid.iter().all(|g| *g > 0.0 && g.is_finite()) || !(0.0 < l.holdout && l.holdout < 1.0) {
            bail!("labeling needs a nonempty positive grid and a holdout fraction in (0, 1)");
        }
        Ok(())
    }
}

/// Recursive overlay; unknown keys are rejected so typos do not pass
/// silently.
fn merge(base: &mut Value, over: &Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    // free-form maps such as per-group learning rates
                    Some(slot @ Value::Object(_)) if here == "model.group_lr" => *slot = v.clone(),
                    Some(slot) => merge(slot, v, &here)?,
                    None => bail!("unknown config key {here}"),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_overrides_keep_preset_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"model": {"refiner_hidden": 32}, "train": {"epochs": 3}}"#).unwrap();
        let c = RunConfig::resolve(Some(&p)).unwrap();
        assert_eq!(c.model.refiner_hidden, 32);
        assert_eq!(c.model.d_model, ModelConfig::desk().d_model);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.accum, 8);
    }

    #[test]
    fn presets_and_typos() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"preset": "tiny"}"#).unwrap();
        let c = RunConfig::resolve(Some(&p)).unwrap();
        assert_eq!((c.model.d_model, c.synth.d_model), (16, 16));
        std::fs::write(&p, r#"{"train": {"epoch": 3}}"#).unwrap();
        assert!(RunConfig::resolve(Some(&p)).is_err());
        assert_eq!(RunConfig::resolve(None).unwrap().preset, Preset::Desk);
    }
}
