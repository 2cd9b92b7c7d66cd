//! Self-contained invariant suite: manifold closure, gyrogroup identities
//! and round trips, gradient checks, metric oracles, winsorization, SVT
//! optimality and a planted labeling-recovery experiment.
//!
//! Each check reports its measured value against a tolerance; a check that
//! errors counts as failed and carries the error text.

use std::time::Instant;

use geomoe_tensor::{svd, Tape, Tensor, Unary, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::FeatureBundle;
use crate::error::{Error, Result};
use crate::experts::{
    euclidean_expert, hyperbolic_expert, intra_manifold_attention, spherical_expert, AttentionConfig,
    Geometry, LayerVars, ManifoldCtx,
};
use crate::gradcheck::{all_coordinates, check_gradients_floor, check_gradients_many, sampled_coordinates};
use crate::labeling::{planted_utilities, select_lambda, simulate_comparisons, svt_prox, SolverConfig, LAMBDA_GRID};
use crate::losses::{
    corr_boost_loss, cov_align_loss, head_regularization, huber_loss, soft_winsorize, BalancerState, LossConfig,
    COMPONENTS,
};
use crate::manifolds::{Curvature, PoincareBall, Sphere, BALL_MARGIN};
use crate::metrics::{c_index, kendall_tau_b, spearman};
use crate::model::{total_loss, Crmf, ModelConfig};
use crate::nn::{layer_norm_affine, linear, multi_head_attention, Activation, AttentionVars, Dropout};
use crate::routing::{load_balance_loss, refine, route, routing_entropy_loss, tangent_fuse, RefinerVars, RouterVars};

/// Deliberate defects for negative-control runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Ball projections ignore the boundary margin.
    BallMargin,
}

impl std::str::FromStr for Fault {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ball-margin" => Ok(Fault::BallMargin),
            other => Err(format!("unknown fault {other:?} (known: ball-margin)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random inputs per manifold operation and curvature.
    pub samples: usize,
    pub grad_seeds: u64,
    pub metric_vectors: usize,
    pub svt_matrices: usize,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 10_000,
            grad_seeds: 10,
            metric_vectors: 1000,
            svt_matrices: 100,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    /// Measured worst case; `null` when the check errored.
    pub value: Option<f64>,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub options: VerifyOptions,
    pub passed: bool,
    pub failed: Vec<String>,
    pub seconds: f64,
    pub checks: Vec<Check>,
}

/// Checks whose value must not exceed the tolerance.
fn at_most(suite: &str, name: &str, tol: f64, f: impl FnOnce() -> Result<(f64, String)>) -> Check {
    let start = Instant::now();
    let out = f();
    let seconds = start.elapsed().as_secs_f64();
    match out {
        Ok((v, detail)) => Check {
            suite: suite.into(),
            name: name.into(),
            passed: v <= tol,
            value: Some(v),
            tolerance: tol,
            detail,
            seconds,
        },
        Err(e) => Check {
            suite: suite.into(),
            name: name.into(),
            passed: false,
            value: None,
            tolerance: tol,
            detail: format!("error: {e}"),
            seconds,
        },
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Rows with uniformly random directions and norms uniform in `[lo, hi]`.
fn radial_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, lo: f64, hi: f64) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        let r = rng.random_range(lo..=hi);
        data.extend(v.iter().map(|x| x * r / norm));
    }
    Tensor::new(vec![n, d], data).expect("n × d")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    t.data()
        .chunks(t.cols().max(1))
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn max_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Worst row-wise `‖a − b‖ / ‖b‖`.
fn max_relative(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .chunks(a.cols())
        .zip(b.data().chunks(b.cols()))
        .map(|(x, y)| {
            let diff = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            let base = y.iter().map(|q| q * q).sum::<f64>().sqrt();
            diff / base.max(1e-300)
        })
        .fold(0.0, f64::max)
}

const CURVATURES: [f64; 3] = [0.5, 1.0, 2.0];
const MANIFOLD_DIM: usize = 8;

fn suite_ball(c: f64, fault: Option<Fault>) -> PoincareBall {
    let mut ball = PoincareBall::new(Curvature::new(c).expect("positive curvature"));
    if fault == Some(Fault::BallMargin) {
        ball.margin = 0.0;
    }
    ball
}

/// Largest `√c‖x‖` over the outputs of every ball operation, for inputs
/// ranging from the origin to far outside the ball.
fn ball_closure(opts: &VerifyOptions) -> Result<(f64, String)> {
    let mut worst: f64 = 0.0;
    let n = opts.samples;
    for (k, &c) in CURVATURES.iter().enumerate() {
        let ball = suite_ball(c, opts.fault);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (0xB0 + k as u64));
        let tape = Tape::new();
        let far = tape.constant(radial_rows(&mut rng, n, MANIFOLD_DIM, 0.0, 1e3));
        let tangent = tape.constant(radial_rows(&mut rng, n, MANIFOLD_DIM, 0.0, 50.0));
        let x = ball.exp0(tangent)?;
        let y = ball.project(far)?;
        let m = tape.constant(uniform(&mut rng, &[MANIFOLD_DIM, MANIFOLD_DIM], -3.0, 3.0));
        let outs = [
            y,
            x,
            ball.mobius_add(x, y)?,
            ball.mobius_matvec(m, x)?,
            ball.mobius_nonlinearity(x, |v| Ok(v.scale(5.0)))?,
        ];
        for o in outs {
            let r = row_norms(&o.value()).into_iter().fold(0.0, f64::max) * c.sqrt();
            worst = worst.max(r);
        }
    }
    // report how far beyond the allowed radius the worst point lies
    Ok((worst - (1.0 - BALL_MARGIN), format!("max √c‖x‖ = {worst:.12}; bound 1 − {BALL_MARGIN:e}")))
}

fn sphere_unit_norm(opts: &VerifyOptions) -> Result<(f64, String)> {
    let n = opts.samples;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5F);
    let tape = Tape::new();
    let raw = tape.constant(radial_rows(&mut rng, n, MANIFOLD_DIM, 1e-3, 1e3));
    let s = Sphere.project(raw)?;
    let base = Sphere.project(tape.constant(radial_rows(&mut rng, n, MANIFOLD_DIM, 0.5, 2.0)))?;
    let v = Sphere.to_tangent(base, tape.constant(radial_rows(&mut rng, n, MANIFOLD_DIM, 0.0, 20.0)))?;
    let e = Sphere.exp(base, v)?;
    let worst = [s, e]
        .iter()
        .flat_map(|o| row_norms(&o.value()))
        .fold(0.0, |m: f64, r| m.max((r - 1.0).abs()));
    Ok((worst, "max |‖x‖ − 1| over projections and exp maps".into()))
}

fn gyro_checks(opts: &VerifyOptions) -> Result<[(f64, String); 2]> {
    let (mut identity, mut inverse): (f64, f64) = (0.0, 0.0);
    for (k, &c) in CURVATURES.iter().enumerate() {
        let ball = suite_ball(c, opts.fault);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (0x9E + k as u64));
        let tape = Tape::new();
        let x = ball.exp0(tape.constant(radial_rows(&mut rng, opts.samples, MANIFOLD_DIM, 0.0, 3.0)))?;
        let zero = tape.constant(Tensor::zeros(vec![opts.samples, MANIFOLD_DIM]));
        let left = ball.mobius_add(zero, x)?;
        identity = identity.max(max_abs(&left.sub(x)?.value()));
        let inv = ball.mobius_add(x.neg(), x)?;
        inverse = inverse.max(max_abs(&inv.value()));
    }
    Ok([
        (identity, "max |0 ⊕ x − x|".into()),
        (inverse, "max |(−x) ⊕ x|".into()),
    ])
}

fn round_trips(opts: &VerifyOptions) -> Result<[(f64, String); 4]> {
    let n = opts.samples;
    let (mut b1, mut b2): (f64, f64) = (0.0, 0.0);
    for (k, &c) in CURVATURES.iter().enumerate() {
        let ball = suite_ball(c, opts.fault);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (0x7A + k as u64));
        let tape = Tape::new();
        let v = tape.constant(radial_rows(&mut rng, n, MANIFOLD_DIM, 0.05, 3.0 / c.sqrt()));
        b1 = b1.max(max_relative(&ball.log0(ball.exp0(v)?)?.value(), &v.value()));
        let x = tape.constant(radial_rows(&mut rng, n, MANIFOLD_DIM, 0.05, 0.99 / c.sqrt()));
        b2 = b2.max(max_relative(&ball.exp0(ball.log0(x)?)?.value(), &x.value()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7F);
    let tape = Tape::new();
    let p = Sphere.project(tape.constant(radial_rows(&mut rng, n, MANIFOLD_DIM, 1.0, 1.0)))?;
    let v = radial_rows(&mut rng, n, MANIFOLD_DIM, 1.0, 1.0);
    let v = Sphere.to_tangent(p, tape.constant(v))?;
    // rescale the tangents to norms in [0.05, 3]
    let mut lens = Tensor::zeros(vec![n, 1]);
    for (i, r) in row_norms(&v.value()).into_iter().enumerate() {
        lens.set(i, 0, rng.random_range(0.05..3.0) / r);
    }
    let v = v.mul(tape.constant(lens))?;
    let s1 = max_relative(&Sphere.log(p, Sphere.exp(p, v)?)?.value(), &v.value());
    let x = Sphere.exp(p, v)?;
    let s2 = max_relative(&Sphere.exp(p, Sphere.log(p, x)?)?.value(), &x.value());
    Ok([
        (b1, "ball log0(exp0(v)) = v, ‖v‖√c ∈ [0.05√c, 3]".into()),
        (b2, "ball exp0(log0(x)) = x, √c‖x‖ ≤ 0.99".into()),
        (s1, "sphere log_p(exp_p(v)) = v, ‖v‖ ∈ [0.05, 3]".into()),
        (s2, "sphere exp_p(log_p(x)) = x".into()),
    ])
}

pub fn manifold_checks(opts: &VerifyOptions) -> Vec<Check> {
    let suite = "manifold";
    let mut out = vec![
        at_most(suite, "ball margin", 0.0, || ball_closure(opts)),
        at_most(suite, "sphere unit norm", 1e-9, || sphere_unit_norm(opts)),
    ];
    match gyro_checks(opts) {
        Ok([a, b]) => {
            out.push(at_most(suite, "gyrogroup left identity", 1e-10, || Ok(a)));
            out.push(at_most(suite, "gyrogroup left inverse", 1e-10, || Ok(b)));
        }
        Err(e) => out.push(at_most(suite, "gyrogroup identities", 1e-10, || Err(e))),
    }
    match round_trips(opts) {
        Ok(trips) => {
            let names = ["ball exp/log round trip", "ball log/exp round trip", "sphere exp/log round trip", "sphere log/exp round trip"];
            for (name, r) in names.into_iter().zip(trips) {
                out.push(at_most(suite, name, 1e-9, || Ok(r)));
            }
        }
        Err(e) => out.push(at_most(suite, "round trips", 1e-9, || Err(e))),
    }
    out
}

/// Gradient checks need every output entry to matter.
fn project<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, &y.shape(), -1.0, 1.0);
    Ok(y.mul(tape.constant(w))?.sum())
}

type Objective = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

struct GradCase {
    name: &'static str,
    inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>,
    f: Objective,
}

fn case(
    name: &'static str,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + 'static,
) -> GradCase {
    GradCase {
        name,
        inputs: Box::new(inputs),
        f: Box::new(f),
    }
}

fn unary_cases() -> Vec<GradCase> {
    let specs: [(&'static str, Unary, f64, f64); 19] = [
        ("exp", Unary::Exp, -2.0, 2.0),
        ("ln", Unary::Ln, 0.2, 3.0),
        ("sqrt", Unary::Sqrt, 0.2, 3.0),
        ("square", Unary::Square, -2.0, 2.0),
        ("recip", Unary::Recip, 0.3, 2.0),
        ("tanh", Unary::Tanh, -3.0, 3.0),
        ("sigmoid", Unary::Sigmoid, -4.0, 4.0),
        ("gelu", Unary::Gelu, -3.0, 3.0),
        ("cos", Unary::Cos, -3.0, 3.0),
        ("sinc", Unary::Sinc, -3.0, 3.0),
        ("tanh ratio", Unary::TanhRatio(0.7), 0.0, 3.0),
        ("atanh ratio", Unary::AtanhRatio(1.0), 0.0, 0.95),
        ("stable arctanh", Unary::StableAtanh, -0.95, 0.95),
        ("acos ratio", Unary::AcosRatio, -0.9, 0.999),
        ("radius clip", Unary::RadiusClip(0.8), 0.1, 2.0),
        // kinked maps: inputs stay at least 0.1 away from every kink
        ("relu", Unary::Relu, 0.1, 2.0),
        ("abs", Unary::Abs, 0.1, 2.0),
        ("clamp", Unary::Clamp(-1.0, 1.0), 0.1, 0.9),
        ("scale", Unary::Scale(-1.7), -2.0, 2.0),
    ];
    specs
        .into_iter()
        .map(|(name, u, lo, hi)| {
            let kinked = matches!(u, Unary::Relu | Unary::Abs | Unary::Clamp(..));
            case(
                name,
                move |rng| {
                    let mut x = uniform(rng, &[3, 4], lo, hi);
                    if kinked {
                        for (i, v) in x.data_mut().iter_mut().enumerate() {
                            if i % 2 == 0 {
                                *v = -*v;
                            }
                        }
                    }
                    vec![x]
                },
                move |t, v| project(t, v[0].unary(u), 1),
            )
        })
        .collect()
}

fn structural_cases() -> Vec<GradCase> {
    let four = |rng: &mut ChaCha8Rng| {
        vec![
            uniform(rng, &[3, 4], -1.0, 1.0),
            uniform(rng, &[4, 2], -1.0, 1.0),
            uniform(rng, &[1, 4], 0.5, 1.5),
            uniform(rng, &[3, 1], 0.5, 1.5),
        ]
    };
    vec![
        case("matmul", four, |t, v| project(t, v[0].matmul(v[1])?, 2)),
        case("matmul_t", four, |t, v| project(t, v[0].matmul_t(v[1].t()?)?, 3)),
        case("broadcast add/sub", four, |t, v| project(t, v[0].add(v[2])?.sub(v[3])?, 4)),
        case("broadcast mul/div", four, |t, v| project(t, v[0].mul(v[2])?.div(v[3])?, 5)),
        case("softmax", four, |t, v| project(t, v[0].softmax(), 6)),
        case("layer norm", four, |t, v| project(t, v[0].layer_norm(1e-5), 7)),
        case("row and column reductions", four, |t, v| {
            let a = v[0].sum_last().add(v[0].mean_last())?;
            project(t, v[0].mean_rows()?.add(v[0].sum_rows()?)?.sum().add(a.sum())?, 8)
        }),
        case("norm", four, |t, v| project(t, v[0].norm_last(), 9)),
        case("transpose and reshape", four, |t, v| project(t, v[0].t()?.reshape(vec![2, 6])?, 10)),
        case("concat and slice", four, |t, v| {
            let c = Var::concat(&[v[0], v[1].t()?], 0)?;
            let c2 = Var::concat(&[v[0], v[3]], 1)?;
            project(t, c.slice(0, 1, 3)?.slice(1, 1, 3)?.add(c2.slice(1, 2, 3)?)?, 11)
        }),
        case("gather rows", four, |t, v| project(t, v[0].gather_rows(&[2, 0, 2, 1])?, 12)),
    ]
}

fn manifold_cases() -> Vec<GradCase> {
    let ball = PoincareBall::new(Curvature::new(0.8).expect("positive"));
    let tangents = |rng: &mut ChaCha8Rng| {
        vec![
            uniform(rng, &[3, 4], -0.7, 0.7),
            uniform(rng, &[3, 4], -0.7, 0.7),
            uniform(rng, &[4, 4], -0.8, 0.8),
        ]
    };
    let sphere_inputs = |rng: &mut ChaCha8Rng| {
        let mut x = uniform(rng, &[3, 4], -1.0, 1.0);
        for r in 0..3 {
            x.set(r, 3, 1.0 + rng.random_range(0.0..0.5));
        }
        vec![x, uniform(rng, &[3, 4], -0.8, 0.8)]
    };
    vec![
        case("exp0 and log0", tangents, move |t, v| {
            let x = ball.exp0(v[0])?;
            project(t, x.add(ball.log0(x.scale(0.9))?)?, 20)
        }),
        case("mobius addition", tangents, move |t, v| {
            project(t, ball.mobius_add(ball.exp0(v[0])?, ball.exp0(v[1])?)?, 21)
        }),
        case("mobius matvec", tangents, move |t, v| project(t, ball.mobius_matvec(v[2], ball.exp0(v[0])?)?, 22)),
        case("mobius nonlinearity", tangents, move |t, v| {
            project(t, ball.mobius_nonlinearity(ball.exp0(v[0])?, |u| Ok(u.tanh()))?, 23)
        }),
        case("sphere projection, log and exp", sphere_inputs, |t, v| {
            let pole = t.constant(Sphere::north_pole(4));
            let s = Sphere.project(v[0])?;
            let w = Sphere.to_tangent(pole, v[1])?;
            project(t, Sphere.log(pole, s)?.add(Sphere.exp(pole, w)?)?, 24)
        }),
    ]
}

/// (weight, bias) input positions of the two expert layers.
const EXPERT_LAYERS: [(usize, usize); 2] = [(1, 2), (3, 4)];

fn module_cases() -> Vec<GradCase> {
    let ball = PoincareBall::default();
    let layer_inputs = |rng: &mut ChaCha8Rng| {
        vec![
            uniform(rng, &[3, 8], -0.6, 0.6),
            uniform(rng, &[8, 8], -0.4, 0.4),
            uniform(rng, &[1, 8], -0.2, 0.2),
            uniform(rng, &[8, 8], -0.4, 0.4),
            uniform(rng, &[1, 8], -0.2, 0.2),
        ]
    };
    let attn = AttentionConfig {
        heads: 2,
        temperature: 0.7,
        tokens: 2,
    };
    vec![
        case("linear and affine layer norm", layer_inputs, |t, v| {
            let h = linear(v[0], v[1], Some(v[2]))?;
            project(t, layer_norm_affine(h, v[2].add_scalar(1.0), v[4])?, 30)
        }),
        case(
            "multi-head attention with mask",
            |rng| {
                let mut x = vec![uniform(rng, &[5, 4], -1.0, 1.0)];
                x.extend((0..4).map(|_| uniform(rng, &[4, 4], -0.7, 0.7)));
                x.extend((0..3).map(|_| uniform(rng, &[1, 4], -0.3, 0.3)));
                x
            },
            |t, v| {
                let seg = [0, 0, 0, 1, 1];
                let mask = crate::nn::block_mask(&seg).map(|m| t.constant(m));
                let w = AttentionVars {
                    wq: v[1],
                    wk: v[2],
                    wv: v[3],
                    bq: Some(v[5]),
                    bk: None,
                    bv: Some(v[6]),
                    out: Some((v[4], v[7])),
                };
                project(t, multi_head_attention(v[0], &w, 2, 0.8, mask)?, 31)
            },
        ),
        case("hyperbolic expert", layer_inputs, move |t, v| {
            let ls: Vec<LayerVars> = EXPERT_LAYERS.iter().map(|&(w, b)| LayerVars { w: v[w], b: v[b] }).collect();
            let x = ball.exp0(v[0])?;
            project(t, hyperbolic_expert(&ball, x, &ls, Activation::Tanh, &mut Dropout::off())?, 32)
        }),
        case("spherical expert", layer_inputs, |t, v| {
            let ls: Vec<LayerVars> = EXPERT_LAYERS.iter().map(|&(w, b)| LayerVars { w: v[w], b: v[b] }).collect();
            let pole = t.constant(Sphere::north_pole(8));
            let x = Sphere.project(v[0].add(pole.scale(2.0))?)?;
            project(t, spherical_expert(pole, x, &ls, Activation::Tanh, &mut Dropout::off())?, 33)
        }),
        case("euclidean expert", layer_inputs, |t, v| {
            let ls: Vec<LayerVars> = EXPERT_LAYERS.iter().map(|&(w, b)| LayerVars { w: v[w], b: v[b] }).collect();
            project(t, euclidean_expert(v[0], &ls, Activation::Tanh, &mut Dropout::off())?, 34)
        }),
        case(
            "intra-manifold attention",
            |rng| {
                let mut x = vec![uniform(rng, &[3, 8], -0.5, 0.5)];
                x.extend((0..3).map(|_| uniform(rng, &[4, 4], -0.6, 0.6)));
                x
            },
            move |t, v| {
                let ctx = ManifoldCtx::new(t, ball, 8);
                let mut acc = t.scalar(0.0);
                for g in [Geometry::Hyperbolic, Geometry::Spherical, Geometry::Euclidean] {
                    let x = ctx.from_tangent(g, v[0])?;
                    let y = intra_manifold_attention(t, g, &ctx, x, [v[1], v[2], v[3]], &attn)?;
                    acc = acc.add(project(t, ctx.to_tangent(g, y)?, 35 + g.index() as u64)?)?;
                }
                Ok(acc)
            },
        ),
        case(
            "router, fusion and refiner",
            |rng| {
                vec![
                    uniform(rng, &[4, 6], -1.0, 1.0),
                    uniform(rng, &[5, 6], -0.5, 0.5),
                    uniform(rng, &[1, 5], -0.2, 0.2),
                    uniform(rng, &[3, 5], -0.5, 0.5),
                    uniform(rng, &[1, 3], -0.2, 0.2),
                    uniform(rng, &[6, 6], -0.5, 0.5),
                    uniform(rng, &[1, 6], -0.2, 0.2),
                ]
            },
            |t, v| {
                let r = route(
                    v[0],
                    &RouterVars {
                        w1: v[1],
                        b1: v[2],
                        w2: v[3],
                        b2: v[4],
                    },
                )?;
                let fused = tangent_fuse([v[0], v[0].tanh(), v[0].scale(0.5)], r)?;
                let z = refine(
                    fused,
                    &RefinerVars {
                        w1: v[5],
                        b1: v[6],
                        w2: v[5].t()?,
                        b2: v[6],
                    },
                )?;
                let reg = routing_entropy_loss(r, -0.01)?.add(load_balance_loss(r, 0.1)?)?;
                Ok(project(t, z, 38)?.add(reg)?)
            },
        ),
        case(
            "loss components and balancer",
            |rng| {
                vec![
                    uniform(rng, &[5, 3], -2.0, 2.0),
                    uniform(rng, &[5, 3], -2.0, 2.0),
                    uniform(rng, &[1, 6], -0.5, 0.5),
                ]
            },
            |_, v| {
                let cfg = LossConfig::default();
                let mut state = BalancerState::new(COMPONENTS.len());
                for s in 0..4 {
                    let vals: Vec<f64> = (0..COMPONENTS.len()).map(|i| 0.2 + 0.1 * i as f64 + 0.05 * s as f64).collect();
                    state.update(&vals, &cfg.balancer)?;
                }
                let y = v[1];
                let comps = [
                    huber_loss(v[0], y, 0.7)?,
                    corr_boost_loss(v[0], y, 0.3)?,
                    cov_align_loss(v[0], y, 0.1)?,
                    v[0].square().mean().scale(0.2),
                    v[0].tanh().mean().scale(0.1),
                    head_regularization(&[v[0], v[1]], 0.01)?,
                ];
                state.total(&comps, v[2], &cfg.balancer)
            },
        ),
    ]
}

/// Rows with lengths 1–4, as in real clips.
fn tiny_batch(seed: u64, d: usize, n: usize) -> Vec<FeatureBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let lens = [rng.random_range(1..5), rng.random_range(1..4), rng.random_range(1..5)];
            let mut targets = [0.0; crate::data::TARGETS];
            targets.iter_mut().for_each(|t| *t = rng.random_range(-1.0..1.0));
            FeatureBundle {
                clip_id: format!("v{i}"),
                text: uniform(&mut rng, &[lens[0], d], -1.0, 1.0),
                audio: uniform(&mut rng, &[lens[1], d], -1.0, 1.0),
                video: uniform(&mut rng, &[lens[2], d], -1.0, 1.0),
                targets: Some(targets),
            }
        })
        .collect()
}

/// Relative errors use a 1e-6 denominator floor here: some temporal
/// attention gradients are ≈ 1e-9, where finite-difference roundoff alone
/// exceeds 1e-4 of a smaller floor.
pub const MODEL_GRAD_FLOOR: f64 = 1e-6;

/// Total balanced loss of the tiny model against central differences on
/// three sampled coordinates of every parameter tensor.
pub fn model_gradient_error(seed: u64) -> Result<(f64, String)> {
    let cfg = LossConfig::default();
    let model = Crmf::new(ModelConfig::tiny(), seed)?;
    let data = tiny_batch(1000 + seed, model.cfg.d_model, 4);
    let target = Tensor::from_rows(&data.iter().map(|b| b.targets.expect("targets").to_vec()).collect::<Vec<_>>())?;
    let mut balancer = BalancerState::new(COMPONENTS.len());
    if seed % 2 == 1 {
        for s in 0..6 {
            let v: Vec<f64> = (0..COMPONENTS.len()).map(|i| 0.1 * (i + 1) as f64 + 0.03 * (s * i) as f64).collect();
            balancer.update(&v, &cfg.balancer)?;
        }
    }
    let refs: Vec<&FeatureBundle> = data.iter().collect();
    let report = check_gradients_floor(
        |tape, vars| {
            let out = model.forward(tape, vars, &refs, None)?;
            let y = tape.constant(target.clone());
            Ok(total_loss(&model, vars, &out, y, &cfg, &balancer)?.0)
        },
        &model.params.values,
        &sampled_coordinates(seed, 3),
        MODEL_GRAD_FLOOR,
    )?;
    let worst = report.worst.map_or("-", |(i, _)| model.params.names[i].as_str());
    Ok((
        report.max_error,
        format!("{} coordinates, worst at {worst}", report.coordinates_checked),
    ))
}

pub fn gradient_checks(opts: &VerifyOptions) -> Vec<Check> {
    let mut out = Vec::new();
    let cases = unary_cases()
        .into_iter()
        .chain(structural_cases())
        .chain(manifold_cases())
        .chain(module_cases());
    for c in cases {
        out.push(at_most("gradient", c.name, 1e-4, || {
            let mut worst: f64 = 0.0;
            for s in 0..opts.grad_seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(31) ^ (s + 1));
                let xs = (c.inputs)(&mut rng);
                let r = check_gradients_many(|t, v| (c.f)(t, v), &xs, &all_coordinates)?;
                worst = worst.max(r.max_error);
            }
            Ok((worst, format!("{} seeds, all coordinates", opts.grad_seeds)))
        }));
    }
    out.push(at_most("gradient", "full model loss (tiny config)", 1e-4, || {
        let mut worst: f64 = 0.0;
        let mut detail = String::new();
        for s in 0..opts.grad_seeds {
            let (e, d) = model_gradient_error(opts.seed + s)?;
            if e >= worst {
                worst = e;
                detail = format!("{} seeds; worst seed {}: {d}", opts.grad_seeds, opts.seed + s);
            }
        }
        Ok((worst, detail))
    }));
    out
}

/// Mid-rank by counting: `1 + #{less} + (#{equal} − 1)/2`.
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
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
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

fn sign(v: f64) -> i64 {
    (v > 0.0) as i64 - (v < 0.0) as i64
}

/// Over ordered pairs, which doubles every count; the ratio is unchanged.
fn tau_b_ref(x: &[f64], y: &[f64]) -> f64 {
    let (mut s, mut nx, mut ny) = (0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                let (a, b) = (sign(x[i] - x[j]), sign(y[i] - y[j]));
                s += a * b;
                nx += (a != 0) as i64;
                ny += (b != 0) as i64;
            }
        }
    }
    if nx == 0 || ny == 0 {
        0.0
    } else {
        (s as f64 / 2.0 / ((nx as f64 / 2.0) * (ny as f64 / 2.0)).sqrt()).clamp(-1.0, 1.0)
    }
}

fn c_index_ref(p: &[f64], t: &[f64]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..p.len() {
        for j in 0..p.len() {
            if t[i] > t[j] {
                den += 1.0;
                num += if p[i] > p[j] {
                    1.0
                } else if p[i] == p[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Vectors on a coarse grid, so ties are common.
pub fn tied_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let levels = rng.random_range(2..=n.max(2));
    (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.25 - 1.0).collect()
}

fn metric_oracles(opts: &VerifyOptions) -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x3E);
    let mut mismatches = 0usize;
    for _ in 0..opts.metric_vectors {
        let n = rng.random_range(2..40);
        let (x, y) = (tied_vector(&mut rng, n), tied_vector(&mut rng, n));
        let rho_ok = spearman(&x, &y)?.value == pearson_ref(&counting_ranks(&x), &counting_ranks(&y));
        let tau_ok = kendall_tau_b(&x, &y)?.value == tau_b_ref(&x, &y);
        let c_ok = c_index(&x, &y).ok() == c_index_ref(&x, &y);
        mismatches += (!rho_ok) as usize + (!tau_ok) as usize + (!c_ok) as usize;
    }
    Ok((
        mismatches as f64,
        format!("{} tie-containing vector pairs, bitwise comparison", opts.metric_vectors),
    ))
}

fn metric_hand_cases() -> Result<(f64, String)> {
    let (x, y) = ([1.0, 2.0, 3.0], [1.0, 3.0, 2.0]);
    let got = [spearman(&x, &y)?.value, kendall_tau_b(&x, &y)?.value, c_index(&x, &y)?];
    let want = [0.5, 1.0 / 3.0, 2.0 / 3.0];
    let worst = got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    Ok((worst, format!("x = (1,2,3), y = (1,3,2): ρ, τ-b, C = {got:?}")))
}

pub fn metric_checks(opts: &VerifyOptions) -> Vec<Check> {
    vec![
        at_most("metrics", "pairwise oracle agreement", 0.0, || metric_oracles(opts)),
        at_most("metrics", "hand cases", 0.0, metric_hand_cases),
    ]
}

pub fn winsorization_checks() -> Vec<Check> {
    let cfg = LossConfig::default();
    let (theta, s) = (cfg.winsor_theta, cfg.winsor_s);
    let clip = move |x: f64| soft_winsorize(x, theta, s);
    let oracle = theta + s * 1f64.tanh();
    vec![
        at_most("winsorization", "identity inside the threshold", 0.0, || {
            Ok(((clip(1.0) - 1.0).abs(), format!("clip(1.0) = {}", clip(1.0))))
        }),
        at_most("winsorization", "value at 3.0", 1e-6, || {
            Ok(((clip(3.0) - oracle).abs(), format!("clip(3.0) = {:.10}; θ + s·tanh(1) = {oracle:.10}", clip(3.0))))
        }),
        at_most("winsorization", "asymptote", 1e-6, || {
            Ok(((clip(1e6) - (theta + s)).abs(), format!("clip(1e6) = {}", clip(1e6))))
        }),
        at_most("winsorization", "strict monotonicity", 0.0, || {
            let grid: Vec<f64> = (0..10_000).map(|i| -10.0 + 20.0 * i as f64 / 9_999.0).collect();
            let violations = grid.windows(2).filter(|w| !(clip(w[1]) > clip(w[0]))).count();
            Ok((violations as f64, "10⁴-point grid on [−10, 10]".into()))
        }),
    ]
}

fn prox_objective(x: &Tensor, m: &Tensor, t: f64) -> Result<f64> {
    let diff: f64 = x.data().iter().zip(m.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(svd(x)?.sigma.iter().sum::<f64>() + diff / (2.0 * t))
}

pub fn svt_checks(opts: &VerifyOptions) -> Vec<Check> {
    vec![
        at_most("svt", "diagonal shrinkage", 1e-12, || {
            let m = Tensor::diag(&[3.0, 1.0, 0.2]);
            let p = svt_prox(&m, 0.5)?;
            let want = Tensor::diag(&[2.5, 0.5, 0.0]);
            Ok((p.max_abs_diff(&want), "diag(3, 1, 0.2) at threshold 0.5".into()))
        }),
        at_most("svt", "proximal optimality", 0.0, || {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x57);
            let mut violations = 0usize;
            for _ in 0..opts.svt_matrices {
                let (r, c) = (rng.random_range(1..7), rng.random_range(1..7));
                let m = uniform(&mut rng, &[r, c], -2.0, 2.0);
                let t = rng.random_range(0.05..1.0);
                let p = svt_prox(&m, t)?;
                let best = prox_objective(&p, &m, t)?;
                for _ in 0..50 {
                    let mut cand = p.clone();
                    let scale = rng.random_range(1e-3..0.5);
                    cand.data_mut().iter_mut().for_each(|v| *v += scale * rng.random_range(-1.0..1.0));
                    violations += (best > prox_objective(&cand, &m, t)? + 1e-12) as usize;
                }
            }
            Ok((violations as f64, format!("{} matrices × 50 candidates", opts.svt_matrices)))
        }),
    ]
}

/// Per-target Spearman of the recovered utilities, plus the solver report.
pub fn recovery_experiment(seed: u64) -> Result<(Vec<f64>, crate::labeling::FitReport)> {
    let (n, t) = (60, 3);
    let truth = planted_utilities(n, t, 2, 1.5, seed)?;
    let records = simulate_comparisons(&truth, 40, seed + 1000)?;
    let (fit, _, _) = select_lambda(&records, n, t, &SolverConfig::default(), &LAMBDA_GRID, 0.2, seed)?;
    let col = |m: &Tensor, j: usize| (0..n).map(|i| m.at(i, j)).collect::<Vec<f64>>();
    let rho = (0..t)
        .map(|j| spearman(&col(&fit.theta, j), &col(&truth, j)).map(|s| s.value))
        .collect::<Result<Vec<_>>>()?;
    Ok((rho, fit))
}

pub fn recovery_checks(opts: &VerifyOptions) -> Vec<Check> {
    let suite = "labeling";
    let run = recovery_experiment(opts.seed + 7);
    let (rho, fit) = match run {
        Ok(r) => r,
        Err(e) => {
            let msg = e.to_string();
            return vec![at_most(suite, "planted recovery", 0.1, || Err(Error::Invalid(msg)))];
        }
    };
    let increases = fit.objective_history.windows(2).filter(|w| w[1] > w[0]).count();
    let centering = (0..fit.theta.cols())
        .map(|j| (0..fit.theta.rows()).map(|i| fit.theta.at(i, j)).sum::<f64>().abs())
        .fold(0.0, f64::max);
    let min_rho = rho.iter().copied().fold(f64::INFINITY, f64::min);
    vec![
        // reported as 1 − min ρ so that "at most 0.1" reads as ρ ≥ 0.9
        at_most(suite, "planted recovery (1 − min ρ)", 0.1, || {
            Ok((1.0 - min_rho, format!("per-target ρ = {rho:?}; N = 60, T = 3, 40 comparisons per item")))
        }),
        at_most(suite, "objective non-increasing", 0.0, || {
            Ok((increases as f64, format!("{} accepted iterations", fit.objective_history.len() - 1)))
        }),
        at_most(suite, "columns centered", 1e-10, || Ok((centering, "max |Σ_i θ_ij|".into()))),
    ]
}

/// Runs every suite.
pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    let start = Instant::now();
    let mut checks = manifold_checks(opts);
    checks.extend(gradient_checks(opts));
    checks.extend(metric_checks(opts));
    checks.extend(winsorization_checks());
    checks.extend(svt_checks(opts));
    checks.extend(recovery_checks(opts));
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}: {}", c.suite, c.name))
        .collect();
    VerifyReport {
        options: opts.clone(),
        passed: failed.is_empty(),
        failed,
        seconds: start.elapsed().as_secs_f64(),
        checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(fault: Option<Fault>) -> VerifyOptions {
        VerifyOptions {
            samples: 500,
            grad_seeds: 2,
            metric_vectors: 50,
            svt_matrices: 5,
            fault,
            ..VerifyOptions::default()
        }
    }

    #[test]
    fn manifold_suite_passes_and_catches_the_margin_fault() {
        assert!(manifold_checks(&quick(None)).iter().all(|c| c.passed));
        let faulty = manifold_checks(&quick(Some(Fault::BallMargin)));
        let margin = faulty.iter().find(|c| c.name == "ball margin").unwrap();
        assert!(!margin.passed, "{margin:?}");
    }

    #[test]
    fn small_checks_pass() {
        let o = quick(None);
        for c in metric_checks(&o).into_iter().chain(winsorization_checks()).chain(svt_checks(&o)) {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn primitive_gradient_cases_pass() {
        for c in unary_cases().into_iter().chain(structural_cases()).chain(manifold_cases()).chain(module_cases()) {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let xs = (c.inputs)(&mut rng);
            let r = check_gradients_many(|t, v| (c.f)(t, v), &xs, &all_coordinates).unwrap();
            assert!(r.max_error < 1e-4, "{}: {r:?}", c.name);
        }
    }

    #[test]
    fn faults_parse() {
        assert_eq!("ball-margin".parse::<Fault>().unwrap(), Fault::BallMargin);
        assert!("other".parse::<Fault>().is_err());
    }
}
