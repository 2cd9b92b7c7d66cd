use geomoe_core::data::FeatureBundle;
use geomoe_core::gradcheck::{check_gradients_floor, sampled_coordinates};
use geomoe_core::losses::{BalancerState, LossConfig, COMPONENTS};
use geomoe_core::model::{attention_pool, total_loss, Crmf, GeometryMode, ModelConfig};
use geomoe_core::routing::RoutingMode;
use geomoe_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn bundle(rng: &mut ChaCha8Rng, d: usize, lens: [usize; 3], id: usize) -> FeatureBundle {
    let mut targets = [0.0; 12];
    for t in targets.iter_mut() {
        *t = rng.random::<f64>() * 2.0 - 1.0;
    }
    FeatureBundle {
        clip_id: format!("c{id}"),
        text: gaussian(rng, lens[0], d, 1.0),
        audio: gaussian(rng, lens[1], d, 1.0),
        video: gaussian(rng, lens[2], d, 1.0),
        targets: Some(targets),
    }
}

fn batch(seed: u64, d: usize, n: usize) -> Vec<FeatureBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let lens = [1 + rng.random_range(0..4), 1 + rng.random_range(0..3), 1 + rng.random_range(0..4)];
            bundle(&mut rng, d, lens, i)
        })
        .collect()
}

fn target_tensor(b: &[FeatureBundle]) -> Tensor {
    Tensor::from_rows(&b.iter().map(|x| x.targets.unwrap().to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn shapes_for_mixed_lengths_and_modes() {
    for (geometry, routing) in [
        (GeometryMode::All, RoutingMode::Learned),
        (GeometryMode::All, RoutingMode::Uniform),
        (GeometryMode::All, RoutingMode::Hard),
        (GeometryMode::Hyperbolic, RoutingMode::Learned),
        (GeometryMode::Spherical, RoutingMode::Learned),
        (GeometryMode::Euclidean, RoutingMode::Learned),
    ] {
        let cfg = ModelConfig {
            geometry,
            routing,
            ..ModelConfig::tiny()
        };
        let model = Crmf::new(cfg, 3).unwrap();
        let data = batch(11, 16, 5);
        let refs: Vec<&FeatureBundle> = data.iter().collect();
        let tape = Tape::new();
        let vars = model.params.bind(&tape, false);
        let f = model.forward(&tape, &vars, &refs, None).unwrap();
        assert_eq!(f.pred.shape(), [5, 12]);
        assert_eq!(f.routing.shape(), [5, 3]);
        assert!(f.pred.tensor().is_finite());
        let d = &f.diagnostics;
        assert!((0.0..=3f64.ln() + 1e-12).contains(&d.routing_entropy));
        let r = f.routing.tensor();
        for i in 0..5 {
            let row = r.row_slice(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            match geometry.single() {
                Some(g) => {
                    assert_eq!(row[g.index()], 1.0);
                    for (j, &n) in d.tangent_norms.iter().enumerate() {
                        assert_eq!(n == 0.0, j != g.index());
                    }
                }
                None if routing == RoutingMode::Uniform => assert!(row.iter().all(|&v| v == 1.0 / 3.0)),
                None if routing == RoutingMode::Hard => assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1),
                None => assert!(row.iter().all(|&v| v > 0.0)),
            }
        }
    }
}

#[test]
fn eval_mode_is_bit_identical() {
    let model = Crmf::new(ModelConfig::tiny(), 9).unwrap();
    let data = batch(4, 16, 6);
    let (p1, r1) = model.predict(&data, 4).unwrap();
    let (p2, r2) = model.predict(&data, 4).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(r1, r2);
    let again = Crmf::new(ModelConfig::tiny(), 9).unwrap();
    assert_eq!(again.predict(&data, 4).unwrap().0, p1);
}

#[test]
fn desk_config_forward() {
    let model = Crmf::new(ModelConfig::desk(), 1).unwrap();
    let data = batch(2, 64, 4);
    let (p, r) = model.predict(&data, 4).unwrap();
    assert_eq!(p.len(), 4);
    assert!(p.iter().flatten().all(|v| v.is_finite()));
    assert!(r.iter().all(|w| (w.iter().sum::<f64>() - 1.0).abs() < 1e-12));
}

#[test]
fn temporal_zero_parameters_give_zero_output() {
    let mut model = Crmf::new(ModelConfig::tiny(), 5).unwrap();
    for v in model.params.values.iter_mut() {
        v.scale_in_place(0.0);
    }
    let zeros = Tensor::zeros(vec![4, 16]);
    let one = gaussian(&mut ChaCha8Rng::seed_from_u64(1), 1, 16, 1.0);
    let tape = Tape::new();
    let vars = model.params.bind(&tape, false);
    let h = model.temporal(&tape, &vars, &[&zeros, &one]).unwrap();
    assert_eq!(h.shape(), [5, 16]);
    assert!(h.tensor().data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_frame_temporal_shape() {
    let model = Crmf::new(ModelConfig::tiny(), 5).unwrap();
    let one = gaussian(&mut ChaCha8Rng::seed_from_u64(2), 1, 16, 1.0);
    let tape = Tape::new();
    let vars = model.params.bind(&tape, false);
    assert_eq!(model.temporal(&tape, &vars, &[&one]).unwrap().shape(), [1, 16]);
}

#[test]
fn pooling_cases() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let row = gaussian(&mut rng, 1, 6, 1.0);
    let same = Tensor::from_rows(&vec![row.data().to_vec(); 4]).unwrap();
    let w = tape.constant(gaussian(&mut rng, 1, 6, 3.0));
    let z = attention_pool(&tape, tape.constant(same.clone()), w, &[0; 4], 1).unwrap().tensor();
    assert!(z.max_abs_diff(&row) < 1e-12);

    let x = gaussian(&mut rng, 5, 6, 1.0);
    let seg = [0, 0, 1, 1, 1];
    let zero = tape.constant(Tensor::zeros(vec![1, 6]));
    let z = attention_pool(&tape, tape.constant(x.clone()), zero, &seg, 2).unwrap().tensor();
    for (s, rows) in [(0, 0..2), (1, 2..5)] {
        let k = rows.len() as f64;
        for c in 0..6 {
            let mean: f64 = rows.clone().map(|r| x.at(r, c)).sum::<f64>() / k;
            assert!((z.at(s, c) - mean).abs() < 1e-12);
        }
    }
    let single = attention_pool(&tape, tape.constant(row.clone()), w, &[0], 1).unwrap().tensor();
    assert!(single.max_abs_diff(&row) < 1e-15);
}

#[test]
fn zero_adapters_return_bias() {
    let mut model = Crmf::new(ModelConfig::tiny(), 2).unwrap();
    *model.params.get_mut("adapt.w1").unwrap() = Tensor::zeros(vec![48, 16]);
    *model.params.get_mut("adapt.b1").unwrap() = Tensor::zeros(vec![1, 48]);
    *model.params.get_mut("adapt.w2").unwrap() = Tensor::zeros(vec![1, 48]);
    let b: Vec<f64> = (0..12).map(|i| i as f64 * 0.25 - 1.0).collect();
    *model.params.get_mut("adapt.b").unwrap() = Tensor::row(&b);
    let (p, _) = model.predict(&batch(6, 16, 3), 3).unwrap();
    for row in p {
        assert_eq!(row, b);
    }
}

#[test]
fn learning_rate_groups_and_decay_flags() {
    let mut cfg = ModelConfig::tiny();
    cfg.group_lr.insert("router".into(), 0.5);
    let model = Crmf::new(cfg.clone(), 0).unwrap();
    let scales = model.params.scales(&cfg.group_lr);
    for (i, name) in model.params.names.iter().enumerate() {
        let expect = if name.starts_with("router.") { 0.5 } else { 1.0 };
        assert_eq!(scales[i].lr, expect, "{name}");
        let last = name.rsplit('.').next().unwrap();
        let no_decay = last.starts_with('b') || last == "g" || name == "balancer.alpha";
        assert_eq!(scales[i].decay, !no_decay, "{name}");
    }
    assert_eq!(model.params.get("balancer.alpha").unwrap().shape(), [1, COMPONENTS.len()]);
}

/// Entries of a full-model gradient reach 1e-9, where central-difference
/// roundoff (≈ 1e-12) would dominate a 1e-8 floor.
const GRAD_FLOOR: f64 = 1e-6;

/// Total balanced loss through every stage against central differences,
/// over a random subset of coordinates of every parameter tensor.
#[test]
fn end_to_end_gradient_check_tiny() {
    let loss_cfg = LossConfig::default();
    let mut warm = BalancerState::new(COMPONENTS.len());
    for s in 0..6 {
        let v: Vec<f64> = (0..COMPONENTS.len()).map(|i| 0.1 * (i + 1) as f64 + 0.03 * s as f64 * i as f64).collect();
        warm.update(&v, &loss_cfg.balancer).unwrap();
    }
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..10u64 {
        let model = Crmf::new(ModelConfig::tiny(), seed).unwrap();
        let data = batch(100 + seed, 16, 4);
        let target = target_tensor(&data);
        let balancer = if seed % 2 == 0 { BalancerState::new(COMPONENTS.len()) } else { warm.clone() };
        let refs: Vec<&FeatureBundle> = data.iter().collect();
        let report = check_gradients_floor(
            |tape, vars| {
                let out = model.forward(tape, vars, &refs, None)?;
                let y = tape.constant(target.clone());
                Ok(total_loss(&model, vars, &out, y, &loss_cfg, &balancer)?.0)
            },
            &model.params.values,
            &sampled_coordinates(seed, 3),
            GRAD_FLOOR,
        )
        .unwrap();
        assert!(
            report.max_error <= 1e-4,
            "seed {seed}: error {} at {:?} ({})",
            report.max_error,
            report.worst,
            report.worst.map(|(i, _)| model.params.names[i].as_str()).unwrap_or("?")
        );
        worst = worst.max(report.max_error);
        checked += report.coordinates_checked;
    }
    println!("end-to-end gradient check: max relative error {worst:.2e} over {checked} coordinates");
}
