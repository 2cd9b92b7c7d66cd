use geomoe_core::metrics::{c_index, kendall_tau_b, macro_report, spearman};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mid-rank by counting: 1 + #{less} + (#{equal} − 1)/2.
fn counting_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let eq = x.iter().filter(|&&u| u == v).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

fn pearson_ref(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
    }
}

fn sign(v: f64) -> i32 {
    (v > 0.0) as i32 - (v < 0.0) as i32
}

fn tau_b_ref(x: &[f64], y: &[f64]) -> f64 {
    let (mut s, mut n0x, mut n0y) = (0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i == j {
                continue;
            }
            let (sx, sy) = (sign(x[i] - x[j]), sign(y[i] - y[j]));
            s += (sx * sy) as i64;
            n0x += (sx != 0) as i64;
            n0y += (sy != 0) as i64;
        }
    }
    // ordered pairs double every count, which cancels
    if n0x == 0 || n0y == 0 {
        0.0
    } else {
        (s as f64 / 2.0 / ((n0x as f64 / 2.0) * (n0y as f64 / 2.0)).sqrt()).clamp(-1.0, 1.0)
    }
}

fn c_index_ref(p: &[f64], t: &[f64]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..p.len() {
        for j in 0..p.len() {
            if t[i] > t[j] {
                den += 1.0;
                if p[i] > p[j] {
                    num += 1.0;
                } else if p[i] == p[j] {
                    num += 0.5;
                }
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

fn tied_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let levels = rng.random_range(2..=n.max(2));
    (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.25 - 1.0).collect()
}

#[test]
fn exact_agreement_with_pairwise_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let n = rng.random_range(2..40);
        let x = tied_vector(&mut rng, n);
        let y = tied_vector(&mut rng, n);
        let rho = pearson_ref(&counting_ranks(&x), &counting_ranks(&y));
        assert_eq!(spearman(&x, &y).unwrap().value, rho);
        assert_eq!(kendall_tau_b(&x, &y).unwrap().value, tau_b_ref(&x, &y));
        let c_ref = c_index_ref(&x, &y);
        assert_eq!(c_index(&x, &y).ok(), c_ref);
    }
}

#[test]
fn macro_report_matches_oracles_on_200_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let names: Vec<String> = (0..12).map(|i| format!("t{i}")).collect();
    let pred: Vec<Vec<f64>> = (0..200).map(|_| (0..12).map(|_| rng.random_range(0..30) as f64).collect()).collect();
    let truth: Vec<Vec<f64>> = (0..200).map(|_| (0..12).map(|_| rng.random_range(0..30) as f64).collect()).collect();
    let r = macro_report(&pred, &truth, &names).unwrap();
    let mut mean_rho = 0.0;
    for j in 0..12 {
        let p: Vec<f64> = pred.iter().map(|r| r[j]).collect();
        let t: Vec<f64> = truth.iter().map(|r| r[j]).collect();
        let m = &r.per_target[j];
        assert_eq!(m.spearman, pearson_ref(&counting_ranks(&p), &counting_ranks(&t)));
        assert_eq!(m.kendall_tau_b, tau_b_ref(&p, &t));
        assert_eq!(Some(m.c_index), c_index_ref(&p, &t));
        mean_rho += m.spearman;
    }
    assert!((r.macro_avg.spearman - mean_rho / 12.0).abs() < 1e-15);
}

#[test]
fn column_permutation_permutes_entries() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let names: Vec<String> = (0..12).map(|i| format!("t{i}")).collect();
    let pred: Vec<Vec<f64>> = (0..30).map(|_| (0..12).map(|_| rng.random::<f64>()).collect()).collect();
    let truth: Vec<Vec<f64>> = (0..30).map(|_| (0..12).map(|_| rng.random::<f64>()).collect()).collect();
    let perm: Vec<usize> = (0..12).rev().collect();
    let permute = |m: &[Vec<f64>]| -> Vec<Vec<f64>> { m.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect() };
    let pnames: Vec<String> = perm.iter().map(|&j| names[j].clone()).collect();
    let a = macro_report(&pred, &truth, &names).unwrap();
    let b = macro_report(&permute(&pred), &permute(&truth), &pnames).unwrap();
    for (k, &j) in perm.iter().enumerate() {
        assert_eq!(b.per_target[k], a.per_target[j]);
    }
    assert!((a.macro_avg.spearman - b.macro_avg.spearman).abs() < 1e-14);
    assert!((a.macro_avg.mse - b.macro_avg.mse).abs() < 1e-14);
}

#[test]
fn report_serializes_with_macro_block() {
    let names = vec!["a".to_string(), "b".to_string()];
    let rows = vec![vec![1.0, 2.0], vec![2.0, 1.0], vec![3.0, 0.0]];
    let json = serde_json::to_value(macro_report(&rows, &rows, &names).unwrap()).unwrap();
    assert_eq!(json["macro"]["spearman"], 1.0);
    assert_eq!(json["per_target"][1]["target"], "b");
}

proptest! {
    #[test]
    fn rank_metrics_invariant_under_monotone_maps(
        pairs in prop::collection::vec((-50i32..50, -50i32..50), 2..40)
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let fx: Vec<f64> = x.iter().map(|v| (v / 10.0).exp() * 3.0 - 1.0).collect();
        let gy: Vec<f64> = y.iter().map(|v| v * v * v + 2.0 * v).collect();
        prop_assert_eq!(spearman(&x, &y).unwrap().value, spearman(&fx, &gy).unwrap().value);
        prop_assert_eq!(kendall_tau_b(&x, &y).unwrap().value, kendall_tau_b(&fx, &gy).unwrap().value);
        prop_assert_eq!(c_index(&x, &y).ok(), c_index(&fx, &gy).ok());
    }

    #[test]
    fn c_index_is_affine_in_tau_without_ties(seed in any::<u64>(), n in 2usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let tau = kendall_tau_b(&x, &y).unwrap().value;
        prop_assert!((c_index(&x, &y).unwrap() - (tau + 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn metric_ranges(seed in any::<u64>(), n in 2usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = tied_vector(&mut rng, n);
        let y = tied_vector(&mut rng, n);
        for v in [spearman(&x, &y).unwrap().value, kendall_tau_b(&x, &y).unwrap().value] {
            prop_assert!((-1.0..=1.0).contains(&v));
        }
        if let Ok(c) = c_index(&x, &y) {
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }
}
