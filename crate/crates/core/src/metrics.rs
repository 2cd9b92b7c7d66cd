//! Rank and pointwise evaluation metrics with macro averaging.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A metric value; `degenerate` marks a zero-variance or all-tied input
/// for which the value is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub value: f64,
    pub degenerate: bool,
}

impl Stat {
    fn ok(value: f64) -> Self {
        Self { value, degenerate: false }
    }

    fn degenerate() -> Self {
        Self {
            value: 0.0,
            degenerate: true,
        }
    }
}

fn check_pair(op: &str, x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return invalid(format!("{op}: lengths {} and {} differ", x.len(), y.len()));
    }
    if x.len() < 2 {
        return invalid(format!("{op}: needs at least 2 values, got {}", x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return invalid(format!("{op}: non-finite input"));
    }
    Ok(())
}

/// 1-based ranks with ties sharing their average rank.
pub fn mid_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        // positions i..=j hold ranks i+1..=j+1
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Stat> {
    check_pair("pearson", x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Stat::degenerate());
    }
    Ok(Stat::ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

/// Pearson correlation of mid-ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Stat> {
    check_pair("spearman", x, y)?;
    pearson(&mid_ranks(x), &mid_ranks(y))
}

/// Pair counts over all `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PairCounts {
    pub concordant: u64,
    pub discordant: u64,
    /// Tied in `x` only.
    pub ties_x: u64,
    /// Tied in `y` only.
    pub ties_y: u64,
    pub ties_both: u64,
}

pub fn pair_counts(x: &[f64], y: &[f64]) -> PairCounts {
    let mut c = PairCounts::default();
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            match (dx == 0.0, dy == 0.0) {
                (true, true) => c.ties_both += 1,
                (true, false) => c.ties_x += 1,
                (false, true) => c.ties_y += 1,
                (false, false) => {
                    if (dx > 0.0) == (dy > 0.0) {
                        c.concordant += 1
                    } else {
                        c.discordant += 1
                    }
                }
            }
        }
    }
    c
}

/// `(C − D)/√((C + D + T_x)(C + D + T_y))`, by pair enumeration.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<Stat> {
    check_pair("kendall_tau_b", x, y)?;
    let p = pair_counts(x, y);
    let cd = (p.concordant + p.discordant) as f64;
    let denom = ((cd + p.ties_x as f64) * (cd + p.ties_y as f64)).sqrt();
    if denom == 0.0 {
        return Ok(Stat::degenerate());
    }
    let num = p.concordant as f64 - p.discordant as f64;
    Ok(Stat::ok((num / denom).clamp(-1.0, 1.0)))
}

/// Over pairs with distinct truth: 1 per concordant pair, ½ per tied
/// prediction, divided by the number of such pairs.
pub fn c_index(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair("c_index", pred, truth)?;
    let p = pair_counts(pred, truth);
    let comparable = p.concordant + p.discordant + p.ties_x;
    if comparable == 0 {
        return invalid("c_index: no pairs with distinct truth values");
    }
    Ok((p.concordant as f64 + 0.5 * p.ties_x as f64) / comparable as f64)
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return invalid(format!("mse: lengths {} and {}", x.len(), y.len()));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub target: String,
    pub spearman: f64,
    pub kendall_tau_b: f64,
    pub c_index: f64,
    pub pearson: f64,
    pub mse: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub spearman: f64,
    pub kendall_tau_b: f64,
    pub c_index: f64,
    pub pearson: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub per_target: Vec<TargetMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
}

/// Per-column metrics of `pred` against `truth` (rows are samples) and
/// their unweighted means. A column without distinct truth values gets
/// c-index ½ and a flag.
pub fn macro_report(pred: &[Vec<f64>], truth: &[Vec<f64>], names: &[String]) -> Result<MetricReport> {
    if pred.len() != truth.len() || pred.len() < 2 {
        return invalid(format!(
            "macro_report: needs matching row counts ≥ 2, got {} and {}",
            pred.len(),
            truth.len()
        ));
    }
    let k = names.len();
    if pred.iter().chain(truth).any(|r| r.len() != k) {
        return invalid(format!("macro_report: every row must have {k} targets"));
    }
    let mut per = Vec::with_capacity(k);
    for (j, name) in names.iter().enumerate() {
        let p: Vec<f64> = pred.iter().map(|r| r[j]).collect();
        let t: Vec<f64> = truth.iter().map(|r| r[j]).collect();
        let mut flags = Vec::new();
        let mut take = |label: &str, s: Stat| {
            if s.degenerate {
                flags.push(format!("{label}: zero variance"));
            }
            s.value
        };
        let spearman = take("spearman", spearman(&p, &t)?);
        let kendall_tau_b = take("kendall_tau_b", kendall_tau_b(&p, &t)?);
        let pearson = take("pearson", pearson(&p, &t)?);
        let c_index = match c_index(&p, &t) {
            Ok(v) => v,
            Err(_) => {
                flags.push("c_index: no comparable pairs".into());
                0.5
            }
        };
        per.push(TargetMetrics {
            target: name.clone(),
            spearman,
            kendall_tau_b,
            c_index,
            pearson,
            mse: mse(&p, &t)?,
            flags,
        });
    }
    let mean = |f: fn(&TargetMetrics) -> f64| per.iter().map(f).sum::<f64>() / k as f64;
    let macro_avg = MacroMetrics {
        spearman: mean(|m| m.spearman),
        kendall_tau_b: mean(|m| m.kendall_tau_b),
        c_index: mean(|m| m.c_index),
        pearson: mean(|m| m.pearson),
        mse: mean(|m| m.mse),
    };
    Ok(MetricReport {
        samples: pred.len(),
        per_target: per,
        macro_avg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        let x = [1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 2.0];
        assert_eq!(spearman(&x, &y).unwrap().value, 0.5);
        assert_eq!(kendall_tau_b(&x, &y).unwrap().value, 1.0 / 3.0);
        assert_eq!(c_index(&x, &y).unwrap(), 2.0 / 3.0);
        let tied = [1.0, 1.0, 2.0];
        assert!((kendall_tau_b(&x, &tied).unwrap().value - 2.0 / 6f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn identity_and_reversal() {
        let x = [0.3, -1.0, 2.5, 0.7];
        let r: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(spearman(&x, &x).unwrap().value, 1.0);
        assert_eq!(spearman(&x, &r).unwrap().value, -1.0);
        assert_eq!(kendall_tau_b(&x, &x).unwrap().value, 1.0);
        assert_eq!(c_index(&x, &x).unwrap(), 1.0);
        assert_eq!(c_index(&[2.0; 4], &x).unwrap(), 0.5);
    }

    #[test]
    fn pointwise_metrics() {
        let x = [0.0, 1.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson(&x, &y).unwrap().value - 1.0).abs() < 1e-15);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 1.0], &[0.0, 2.0]).unwrap(), 0.5);
    }

    #[test]
    fn degenerate_inputs_are_flagged() {
        let c = [1.0; 4];
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&c, &x).unwrap(), Stat::degenerate());
        assert_eq!(kendall_tau_b(&x, &c).unwrap(), Stat::degenerate());
        assert_eq!(pearson(&c, &x).unwrap(), Stat::degenerate());
        assert!(c_index(&x, &c).is_err());
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn mid_ranks_average_ties() {
        assert_eq!(mid_ranks(&[10.0, 20.0, 10.0, 30.0, 20.0]), vec![1.5, 3.5, 1.5, 5.0, 3.5]);
    }

    #[test]
    fn perfect_report() {
        let names: Vec<String> = (0..3).map(|i| format!("t{i}")).collect();
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64, -(i as f64)]).collect();
        let r = macro_report(&rows, &rows, &names).unwrap();
        assert_eq!(r.macro_avg.spearman, 1.0);
        assert_eq!(r.macro_avg.kendall_tau_b, 1.0);
        assert_eq!(r.macro_avg.c_index, 1.0);
        assert_eq!(r.macro_avg.mse, 0.0);
        assert!((r.macro_avg.pearson - 1.0).abs() < 1e-15);
    }
}
