//! Router over the three geometries, its regularizers, tangent-space
//! fusion and the refinement network.

use geomoe_tensor::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{linear, LN_EPS};

pub const EXPERTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingMode {
    Learned,
    Uniform,
    /// Argmax one-hot forward, softmax gradient backward.
    Hard,
}

impl std::str::FromStr for RoutingMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "learned" => Ok(RoutingMode::Learned),
            "uniform" => Ok(RoutingMode::Uniform),
            "hard" => Ok(RoutingMode::Hard),
            other => Err(format!("unknown routing mode {other:?}")),
        }
    }
}

/// Simplex-valued routing weights for one clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingWeights(pub [f64; 3]);

impl RoutingWeights {
    pub fn uniform() -> Self {
        Self([1.0 / 3.0; 3])
    }

    /// Checks `r_i ≥ 0` and `|Σ r_i − 1| ≤ 1e−9`.
    pub fn new(r: [f64; 3]) -> Result<Self> {
        let s: f64 = r.iter().sum();
        if r.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return invalid(format!("routing weights {r:?} are not on the simplex"));
        }
        Ok(Self(r))
    }

    pub fn entropy(&self) -> f64 {
        -self.0.iter().map(|&p| xlogx(p)).sum::<f64>()
    }
}

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

#[derive(Clone, Copy)]
pub struct RouterVars<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

/// `softmax(W2 gelu(W1 z + b1) + b2)` per row of `z`.
pub fn route<'t>(z: Var<'t>, p: &RouterVars<'t>) -> Result<Var<'t>> {
    let h = linear(z, p.w1, Some(p.b1))?.gelu();
    Ok(linear(h, p.w2, Some(p.b2))?.softmax())
}

/// Straight-through one-hot of the row argmax: forward value is the
/// one-hot, gradient is that of `r`.
pub fn hard_route<'t>(r: Var<'t>) -> Result<Var<'t>> {
    let rv = r.tensor();
    let mut onehot = Tensor::zeros(rv.shape().to_vec());
    let k = rv.cols();
    for (i, row) in rv.data().chunks(k).enumerate() {
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        onehot.data_mut()[i * k + best] = 1.0;
    }
    let tape = r.tape();
    let delta = tape.constant(onehot).sub(r.detach())?;
    Ok(r.add(delta)?)
}

/// Batch mean of `−λ_ent Σ r log r`. Weights must be strictly positive
/// where they carry gradient; exact zeros contribute 0.
pub fn routing_entropy_loss<'t>(r: Var<'t>, lambda_ent: f64) -> Result<Var<'t>> {
    let tape = r.tape();
    let rv = r.tensor();
    // 0·log 0 = 0: the log argument is shifted to 1 wherever r is exactly 0.
    let safe = tape.constant(rv.map(|v| if v > 0.0 { 0.0 } else { 1.0 }));
    let logr = r.add(safe)?.ln();
    let rlogr = r.mul(logr)?.sum_last();
    Ok(rlogr.mean().scale(-lambda_ent))
}

/// `λ_bal · Var(mean_b r_b)` with population variance over the experts.
pub fn load_balance_loss<'t>(r: Var<'t>, lambda_bal: f64) -> Result<Var<'t>> {
    let m = r.mean_rows()?;
    let c = m.sub(m.mean_last())?;
    Ok(c.square().mean().scale(lambda_bal))
}

/// `r_h v_h + r_s v_s + r_e v_e` row-wise; tangent images are `B × d_e`,
/// `r` is `B × 3`.
pub fn tangent_fuse<'t>(tangents: [Var<'t>; 3], r: Var<'t>) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for (i, v) in tangents.into_iter().enumerate() {
        let term = v.mul(r.slice(1, i, 1)?)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("three tangents"))
}

#[derive(Clone, Copy)]
pub struct RefinerVars<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

/// `z + W2 gelu(LN(W1 z + b1)) + b2`.
pub fn refine<'t>(z: Var<'t>, p: &RefinerVars<'t>) -> Result<Var<'t>> {
    let h = linear(z, p.w1, Some(p.b1))?.layer_norm(LN_EPS).gelu();
    Ok(z.add(linear(h, p.w2, Some(p.b2))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{all_coordinates, check_gradients_many};
    use geomoe_tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-s..s)).collect()).unwrap()
    }

    fn router<'t>(tape: &'t Tape, rng: &mut ChaCha8Rng, d: usize, s: f64) -> RouterVars<'t> {
        RouterVars {
            w1: tape.constant(rand_t(rng, 6, d, s)),
            b1: tape.constant(rand_t(rng, 1, 6, s)),
            w2: tape.constant(rand_t(rng, 3, 6, s)),
            b2: tape.constant(rand_t(rng, 1, 3, s)),
        }
    }

    #[test]
    fn zero_router_is_uniform() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let zero = |r, c| tape.constant(Tensor::zeros(vec![r, c]));
        let p = RouterVars {
            w1: zero(6, 4),
            b1: zero(1, 6),
            w2: zero(3, 6),
            b2: zero(1, 3),
        };
        let r = route(tape.constant(rand_t(&mut rng, 2, 4, 1.0)), &p).unwrap().tensor();
        assert!(r.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-16));
    }

    #[test]
    fn softmax_arithmetic_on_logits() {
        let tape = Tape::new();
        let r = tape.constant(Tensor::row(&[2f64.ln(), 0.0, 0.0])).softmax().tensor();
        let expect = [0.5, 0.25, 0.25];
        for (a, b) in r.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn routes_are_on_the_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let p = router(&tape, &mut rng, 5, 3.0);
        let r = route(tape.constant(rand_t(&mut rng, 10_000, 5, 10.0)), &p).unwrap().tensor();
        for row in r.data().chunks(3) {
            RoutingWeights::new([row[0], row[1], row[2]]).unwrap();
        }
    }

    #[test]
    fn entropy_loss_values() {
        let tape = Tape::new();
        let u = tape.constant(Tensor::row(&[1.0 / 3.0; 3]));
        let l = routing_entropy_loss(u, -0.01).unwrap().item();
        assert!((l - (-0.01 * 3f64.ln())).abs() < 1e-15);
        let one = tape.constant(Tensor::row(&[1.0, 0.0, 0.0]));
        assert_eq!(routing_entropy_loss(one, -0.01).unwrap().item(), 0.0);
        assert_eq!(routing_entropy_loss(u, 0.0).unwrap().item(), 0.0);
        assert!(routing_entropy_loss(u, -0.01).unwrap().item() < routing_entropy_loss(one, -0.01).unwrap().item());
    }

    #[test]
    fn balance_loss_values() {
        let tape = Tape::new();
        let rows = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap());
        let l = load_balance_loss(rows, 0.5).unwrap().item();
        assert!((l - 0.5 * 2.0 / 9.0).abs() < 1e-16);
        let u = tape.constant(Tensor::full(vec![4, 3], 1.0 / 3.0));
        assert!(load_balance_loss(u, 1.0).unwrap().item().abs() < 1e-32);
        let a = Tensor::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3], vec![0.1, 0.1, 0.8]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.1, 0.1, 0.8], vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3]]).unwrap();
        let la = load_balance_loss(tape.constant(a), 1.0).unwrap().item();
        let lb = load_balance_loss(tape.constant(b), 1.0).unwrap().item();
        assert!((la - lb).abs() < 1e-16);
    }

    #[test]
    fn fuse_matches_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let vs = [0, 1, 2].map(|_| rand_t(&mut rng, 4, 5, 1.0));
        let r = tape.constant(rand_t(&mut rng, 4, 3, 5.0)).softmax();
        let rv = r.tensor();
        let fused = tangent_fuse(vs.clone().map(|v| tape.constant(v)), r).unwrap().tensor();
        for i in 0..4 {
            for j in 0..5 {
                let brute: f64 = (0..3).map(|k| rv.at(i, k) * vs[k].at(i, j)).sum();
                assert!((fused.at(i, j) - brute).abs() <= 1e-12);
            }
        }
        let one = tape.constant(Tensor::from_rows(&vec![vec![1.0, 0.0, 0.0]; 4]).unwrap());
        let f = tangent_fuse(vs.clone().map(|v| tape.constant(v)), one).unwrap().tensor();
        assert_eq!(f, vs[0]);
        let same = [0, 1, 2].map(|_| tape.constant(vs[1].clone()));
        let f = tangent_fuse(same, r).unwrap().tensor();
        assert!(f.max_abs_diff(&vs[1]) < 1e-15);
    }

    #[test]
    fn hard_routing_is_one_hot_with_soft_gradient() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::from_rows(&[vec![0.1, 0.9, 0.3], vec![2.0, -1.0, 0.0]]).unwrap());
        let r = logits.softmax();
        let h = hard_route(r).unwrap();
        assert_eq!(h.tensor().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let w = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0]]).unwrap());
        let g_hard = tape.backward(h.mul(w).unwrap().sum()).unwrap().wrt(logits);
        let g_soft = tape.backward(r.mul(w).unwrap().sum()).unwrap().wrt(logits);
        assert_eq!(g_hard, g_soft);
    }

    #[test]
    fn zero_refiner_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let z = rand_t(&mut rng, 3, 4, 1.0);
        let zero = |r, c| tape.constant(Tensor::zeros(vec![r, c]));
        let p = RefinerVars {
            w1: zero(4, 4),
            b1: zero(1, 4),
            w2: zero(4, 4),
            b2: zero(1, 4),
        };
        let out = refine(tape.constant(z.clone()), &p).unwrap();
        assert_eq!(out.tensor(), z);
    }

    #[test]
    fn gradients_of_routing_components() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let inputs = vec![
                rand_t(&mut rng, 3, 4, 1.0),
                rand_t(&mut rng, 6, 4, 0.8),
                rand_t(&mut rng, 1, 6, 0.5),
                rand_t(&mut rng, 3, 6, 0.8),
                rand_t(&mut rng, 1, 3, 0.5),
                rand_t(&mut rng, 4, 4, 0.8),
                rand_t(&mut rng, 1, 4, 0.5),
                rand_t(&mut rng, 4, 4, 0.8),
                rand_t(&mut rng, 1, 4, 0.5),
            ];
            let vs = [0, 1, 2].map(|_| rand_t(&mut rng, 3, 4, 1.0));
            let probe = rand_t(&mut rng, 3, 4, 1.0);
            let report = check_gradients_many(
                |tape, v| {
                    let r = route(v[0], &RouterVars { w1: v[1], b1: v[2], w2: v[3], b2: v[4] })?;
                    let fused = tangent_fuse(vs.clone().map(|t| tape.constant(t).mul(v[0]).unwrap()), r)?;
                    let z = refine(fused, &RefinerVars { w1: v[5], b1: v[6], w2: v[7], b2: v[8] })?;
                    let main = z.mul(tape.constant(probe.clone()))?.sum();
                    let ent = routing_entropy_loss(r, -0.5)?;
                    let bal = load_balance_loss(r, 2.0)?;
                    Ok(main.add(ent)?.add(bal)?)
                },
                &inputs,
                &all_coordinates,
            )
            .unwrap();
            assert!(report.max_error < 1e-4, "seed {seed}: {report:?}");
        }
    }
}
