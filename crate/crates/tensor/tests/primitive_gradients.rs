use geomoe_tensor::{check_gradients, check_gradients_many, Tape, Tensor, Unary, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Contract a tensor against fixed weights so every output entry matters.
fn project<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> geomoe_tensor::Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, &y.shape(), -1.0, 1.0);
    Ok(y.mul(tape.constant(w))?.sum())
}

const TOL: f64 = 1e-4;

#[test]
fn unary_primitives_match_central_differences() {
    let cases: Vec<(Unary, f64, f64)> = vec![
        (Unary::Exp, -2.0, 2.0),
        (Unary::Ln, 0.2, 3.0),
        (Unary::Sqrt, 0.2, 3.0),
        (Unary::Square, -2.0, 2.0),
        (Unary::Recip, 0.3, 2.0),
        (Unary::Tanh, -3.0, 3.0),
        (Unary::Sigmoid, -4.0, 4.0),
        (Unary::Gelu, -3.0, 3.0),
        (Unary::Cos, -3.0, 3.0),
        (Unary::Sinc, -3.0, 3.0),
        (Unary::TanhRatio(1.0), 0.0, 3.0),
        (Unary::TanhRatio(0.5), 0.0, 3.0),
        (Unary::AtanhRatio(1.0), 0.0, 0.95),
        (Unary::StableAtanh, -0.95, 0.95),
        (Unary::AcosRatio, -0.9, 0.999),
        (Unary::RadiusClip(0.8), 0.1, 2.0),
    ];
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (u, lo, hi) in &cases {
            let x = random(&mut rng, &[3, 4], *lo, *hi);
            let err = check_gradients(|tape, x| project(tape, x.unary(*u), seed), &x).unwrap();
            assert!(err < TOL, "{u:?} seed {seed}: {err}");
        }
    }
}

#[test]
fn kinked_primitives_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // |x| ≥ 0.1 keeps relu/abs/clamp perturbations on one side
    let mut x = random(&mut rng, &[4, 5], 0.1, 2.0);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    for u in [Unary::Relu, Unary::Abs, Unary::Clamp(-1.0, 1.0)] {
        let err = check_gradients(|tape, x| project(tape, x.unary(u), 3), &x).unwrap();
        assert!(err < TOL, "{u:?}: {err}");
    }
}

#[test]
fn structural_primitives_match_central_differences() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = random(&mut rng, &[3, 4], -1.0, 1.0);
        let b = random(&mut rng, &[4, 2], -1.0, 1.0);
        let row = random(&mut rng, &[1, 4], 0.5, 1.5);
        let col = random(&mut rng, &[3, 1], 0.5, 1.5);
        let all = |_, n| (0..n).collect::<Vec<_>>();

        let checks: Vec<(&str, Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> geomoe_tensor::Result<Var<'t>>>)> = vec![
            ("matmul", Box::new(|t, v| project(t, v[0].matmul(v[1])?, 1))),
            ("matmul_t", Box::new(|t, v| project(t, v[0].matmul_t(v[1].t()?)?, 1))),
            ("add-broadcast", Box::new(|t, v| project(t, v[0].add(v[2])?.add(v[3])?, 2))),
            ("sub-broadcast", Box::new(|t, v| project(t, v[0].sub(v[2])?.sub(v[3])?, 3))),
            ("mul-broadcast", Box::new(|t, v| project(t, v[0].mul(v[2])?.mul(v[3])?, 4))),
            ("div-broadcast", Box::new(|t, v| project(t, v[0].div(v[2])?.div(v[3])?, 5))),
            ("softmax", Box::new(|t, v| project(t, v[0].softmax(), 6))),
            ("layer_norm", Box::new(|t, v| project(t, v[0].layer_norm(1e-5), 7))),
            ("sum_last", Box::new(|t, v| project(t, v[0].sum_last(), 8))),
            ("mean_rows", Box::new(|t, v| project(t, v[0].mean_rows()?, 9))),
            ("norm_last", Box::new(|t, v| project(t, v[0].norm_last(), 10))),
            ("transpose-reshape", Box::new(|t, v| project(t, v[0].t()?.reshape(vec![2, 6])?, 11))),
            (
                "concat-slice",
                Box::new(|t, v| {
                    let c = Var::concat(&[v[0], v[1].t()?], 0)?;
                    let s = c.slice(0, 1, 3)?.slice(1, 1, 3)?;
                    let c2 = Var::concat(&[v[0], v[3]], 1)?;
                    project(t, s.add(c2.slice(1, 2, 3)?)?, 12)
                }),
            ),
            ("gather_rows", Box::new(|t, v| project(t, v[0].gather_rows(&[2, 0, 2, 1])?, 13))),
            ("mean", Box::new(|_, v| Ok(v[0].square().mean()))),
        ];
        let inputs = [a.clone(), b.clone(), row.clone(), col.clone()];
        for (name, f) in &checks {
            let r = check_gradients_many(|t, v| f(t, v), &inputs, &all).unwrap();
            assert!(r.max_error < TOL, "{name} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn tape_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let tape = Tape::new();
        let a = tape.leaf(random(&mut rng, &[8, 8], -1.0, 1.0));
        let b = tape.leaf(random(&mut rng, &[8, 3], -1.0, 1.0));
        let y = a.matmul(b).unwrap().gelu().softmax().layer_norm(1e-5).square().sum();
        let g = tape.backward(y).unwrap();
        (y.item(), g.wrt(a))
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}
