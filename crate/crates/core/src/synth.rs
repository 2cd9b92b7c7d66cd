//! Seeded synthetic benchmark with planted signal families.
//!
//! Each clip carries three latent signals, one per modality stream:
//! a leaf of a cluster tree in the text tokens, a unit direction with a
//! random magnitude in the audio tokens, and a Gaussian vector in the video
//! frames. Every generated value is rounded to `f32`, so bundles survive a
//! container round trip unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{ClipRecord, FeatureBundle, TARGETS};
use crate::error::{invalid, Result};
use crate::metrics::pearson;
use geomoe_tensor::Tensor;

/// Scores drawn from each family before mixing into targets.
pub const SCORES_PER_FAMILY: usize = 2;

/// Relative weight of each family in the targets; 0 removes it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyWeights {
    pub hierarchical: f64,
    pub directional: f64,
    pub linear: f64,
}

impl Default for FamilyWeights {
    fn default() -> Self {
        Self {
            hierarchical: 1.0,
            directional: 1.0,
            linear: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub users: usize,
    pub clips_per_user: usize,
    pub d_model: usize,
    pub text_tokens: usize,
    pub audio_tokens: usize,
    pub frames: usize,
    pub tree_depth: usize,
    pub branching: usize,
    pub direction_dim: usize,
    pub linear_dim: usize,
    /// Standard deviation of the log-magnitude nuisance on the direction.
    pub magnitude_spread: f64,
    pub families: FamilyWeights,
    /// Target noise, in units of each target's signal standard deviation.
    pub noise: f64,
    /// Feature noise relative to the unit-scale planted signals.
    pub feature_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 17,
            users: 200,
            clips_per_user: 10,
            d_model: 64,
            text_tokens: 4,
            audio_tokens: 4,
            frames: 6,
            tree_depth: 3,
            branching: 3,
            direction_dim: 8,
            linear_dim: 8,
            magnitude_spread: 0.5,
            families: FamilyWeights::default(),
            noise: 0.2,
            feature_noise: 0.1,
        }
    }
}

impl SynthSpec {
    pub fn clips(&self) -> usize {
        self.users * self.clips_per_user
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("users", self.users),
            ("clips_per_user", self.clips_per_user),
            ("d_model", self.d_model),
            ("text_tokens", self.text_tokens),
            ("audio_tokens", self.audio_tokens),
            ("frames", self.frames),
            ("tree_depth", self.tree_depth),
            ("branching", self.branching),
            ("direction_dim", self.direction_dim),
            ("linear_dim", self.linear_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return invalid(format!("synthetic spec: {name} must be positive"));
            }
        }
        if self.clips() < 2 {
            return invalid("synthetic spec: needs at least 2 clips");
        }
        if self.direction_dim < 2 {
            return invalid("synthetic spec: direction_dim must be at least 2");
        }
        let f = self.families;
        let scalars = [
            ("magnitude_spread", self.magnitude_spread),
            ("noise", self.noise),
            ("feature_noise", self.feature_noise),
            ("families.hierarchical", f.hierarchical),
            ("families.directional", f.directional),
            ("families.linear", f.linear),
        ];
        for (name, v) in scalars {
            if !v.is_finite() || v < 0.0 {
                return invalid(format!("synthetic spec: {name} must be finite and non-negative"));
            }
        }
        if f.hierarchical + f.directional + f.linear == 0.0 {
            return invalid("synthetic spec: at least one family needs positive weight");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub records: Vec<ClipRecord>,
    pub bundles: Vec<FeatureBundle>,
    /// Generative recipe: the spec, planted parameters and per-clip latents.
    pub recipe: Value,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| scale * normal(rng)).collect()).collect()
}

fn round32(x: f64) -> f64 {
    x as f32 as f64
}

/// `Σ_i coef_i · rows_i`.
fn combine(coef: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for (c, r) in coef.iter().zip(rows) {
        for (o, v) in out.iter_mut().zip(r) {
            *o += c * v;
        }
    }
    out
}

fn standardize(col: &mut [f64]) {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

fn tokens(rng: &mut ChaCha8Rng, count: usize, base: impl Fn(usize) -> Vec<f64>, noise: f64) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..count)
        .map(|i| base(i).into_iter().map(|v| round32(v + noise * normal(rng))).collect())
        .collect();
    Tensor::from_rows(&rows).expect("equal token widths")
}

/// Generates the benchmark. Identical specs give bit-identical output.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d_model;
    let n = spec.clips();

    // cluster tree: children of level-l nodes shrink by 2^-l in both
    // embedding and score contribution
    let mut levels: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = Vec::new();
    let mut width = 1;
    for l in 0..spec.tree_depth {
        width *= spec.branching;
        let scale = 0.5f64.powi(l as i32);
        let emb = normal_matrix(&mut rng, width, d, scale / (d as f64).sqrt() * 2.0);
        let val = normal_matrix(&mut rng, width, SCORES_PER_FAMILY, scale);
        levels.push((emb, val));
    }
    let dir_map = normal_matrix(&mut rng, spec.direction_dim, d, 2.0 / (spec.direction_dim as f64).sqrt());
    let dir_proto = normal_matrix(&mut rng, SCORES_PER_FAMILY, spec.direction_dim, 1.0);
    let lin_map = normal_matrix(&mut rng, spec.linear_dim, d, 1.0 / (spec.linear_dim as f64).sqrt());
    let lin_drift = normal_matrix(&mut rng, spec.linear_dim, d, 0.3 / (spec.linear_dim as f64).sqrt());
    let lin_coef = normal_matrix(&mut rng, SCORES_PER_FAMILY, spec.linear_dim, 1.0);
    let families = 3 * SCORES_PER_FAMILY;
    let mix = normal_matrix(&mut rng, families, TARGETS, 1.0);

    let mut scores = vec![vec![0.0; n]; families];
    let mut latent: Vec<Value> = Vec::with_capacity(n);
    let mut bundles = Vec::with_capacity(n);
    for c in 0..n {
        let leaf = rng.random_range(0..width);
        let mut path = Vec::with_capacity(spec.tree_depth);
        let mut emb = vec![0.0; d];
        let mut node = leaf;
        for (emb_l, val_l) in levels.iter().rev() {
            path.push(node);
            for (e, v) in emb.iter_mut().zip(&emb_l[node]) {
                *e += v;
            }
            for j in 0..SCORES_PER_FAMILY {
                scores[j][c] += val_l[node][j];
            }
            node /= spec.branching;
        }
        path.reverse();

        let mut u: Vec<f64> = (0..spec.direction_dim).map(|_| normal(&mut rng)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        u.iter_mut().for_each(|v| *v /= norm);
        let magnitude = (spec.magnitude_spread * normal(&mut rng)).exp();
        for j in 0..SCORES_PER_FAMILY {
            scores[SCORES_PER_FAMILY + j][c] = dir_proto[j].iter().zip(&u).map(|(a, b)| a * b).sum();
        }
        let dir_feat = combine(&u, &dir_map);

        let v: Vec<f64> = (0..spec.linear_dim).map(|_| normal(&mut rng)).collect();
        for j in 0..SCORES_PER_FAMILY {
            scores[2 * SCORES_PER_FAMILY + j][c] =
                lin_coef[j].iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / (spec.linear_dim as f64).sqrt();
        }
        let lin_base = combine(&v, &lin_map);
        let lin_move = combine(&v, &lin_drift);

        let fnoise = spec.feature_noise;
        let text = tokens(&mut rng, spec.text_tokens, |_| emb.clone(), fnoise);
        let audio = tokens(&mut rng, spec.audio_tokens, |_| dir_feat.iter().map(|x| magnitude * x).collect(), fnoise);
        let video = tokens(
            &mut rng,
            spec.frames,
            |t| {
                let phase = (t as f64).sin();
                lin_base.iter().zip(&lin_move).map(|(a, b)| a + phase * b).collect()
            },
            fnoise,
        );
        bundles.push(FeatureBundle {
            clip_id: format!("syn-{c:05}"),
            text,
            audio,
            video,
            targets: None,
        });
        latent.push(json!({ "leaf_path": path, "direction": u, "magnitude": magnitude, "linear": v }));
    }

    for col in scores.iter_mut() {
        standardize(col);
    }
    let weights = [spec.families.hierarchical, spec.families.directional, spec.families.linear];
    let mut targets = vec![vec![0.0; n]; TARGETS];
    for (k, col) in targets.iter_mut().enumerate() {
        for (f, s) in scores.iter().enumerate() {
            let w = weights[f / SCORES_PER_FAMILY].sqrt() * mix[f][k];
            for (t, v) in col.iter_mut().zip(s) {
                *t += w * v;
            }
        }
        standardize(col);
        for t in col.iter_mut() {
            *t += spec.noise * normal(&mut rng);
        }
        standardize(col);
        col.iter_mut().for_each(|v| *v = round32(*v));
    }

    let mut records = Vec::with_capacity(n);
    for (c, b) in bundles.iter_mut().enumerate() {
        let mut y = [0.0; TARGETS];
        for (k, v) in y.iter_mut().enumerate() {
            *v = targets[k][c];
        }
        b.targets = Some(y);
        let mut r = ClipRecord::new(&b.clip_id, &format!("user-{:04}", c / spec.clips_per_user), y);
        r.video_id = format!("synthetic-{c:05}");
        r.question_id = format!("q{}", c % 5);
        records.push(r);
    }

    let signal_corr: Vec<f64> = (0..TARGETS)
        .map(|k| {
            let s = combine(&mix.iter().map(|m| m[k]).collect::<Vec<_>>(), &scores);
            pearson(&s, &targets[k]).map(|p| p.value).unwrap_or(0.0)
        })
        .collect();
    let recipe = json!({
        "spec": spec,
        "score_families": ["hierarchical", "hierarchical", "directional", "directional", "linear", "linear"],
        "mixing": mix,
        "family_weights": weights,
        "tree_values": levels.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>(),
        "direction_prototypes": dir_proto,
        "linear_coefficients": lin_coef,
        "signal_target_correlation": signal_corr,
        "clips": latent,
    });
    Ok(SynthDataset {
        records,
        bundles,
        recipe,
    })
}
