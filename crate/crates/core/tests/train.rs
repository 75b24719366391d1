use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vesselnet::layers::ConvParams;
use vesselnet::nets::{build_i2i3d, MultiScaleOutputs, NetworkParams, NetworkSpec, PathGroup, Variant};
use vesselnet::tensor::{grad_check, Shape, Tape, Tensor};
use vesselnet::train::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_acts(seed: u64, shape: Shape, scale: f64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-scale..scale))
}

fn random_labels(seed: u64, shape: Shape, p: f64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| if r.random_bool(p) { 1.0 } else { 0.0 })
}

/// −log Pr(y) for one voxel, written directly from the probabilities.
fn voxel_loss(a: f64, y: f64) -> f64 {
    let p = 1.0 / (1.0 + (-a).exp());
    if y == 1.0 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn loss_value(acts: &Tensor<f64>, labels: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let a = tape.param(acts.clone());
    let l = output_loss(&mut tape, a, labels, false).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn output_loss_matches_per_voxel_oracle() {
    for seed in 0..10 {
        let shape = Shape::volume(4, 4, 4);
        let acts = random_acts(seed, shape, 6.0);
        let labels = random_labels(seed + 100, shape, 0.3);
        let oracle: f64 = acts
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&a, &y)| voxel_loss(a, y))
            .sum();
        let got = loss_value(&acts, &labels);
        assert!((got - oracle).abs() <= 1e-6 * oracle, "{got} vs {oracle}");
    }
}

#[test]
fn output_loss_gradient_is_sigmoid_minus_label() {
    let shape = Shape::volume(3, 4, 5);
    let acts = random_acts(7, shape, 3.0);
    let labels = random_labels(8, shape, 0.5);
    let mut tape = Tape::new();
    let a = tape.param(acts.clone());
    let l = output_loss(&mut tape, a, &labels, false).unwrap();
    let g = tape.backward(l).unwrap().wrt(a);
    for ((&gv, &av), &y) in g.data().iter().zip(acts.data()).zip(labels.data()) {
        let expected = 1.0 / (1.0 + (-av).exp()) - y;
        assert!((gv - expected).abs() <= 1e-12);
    }
    let lab = labels.clone();
    let err = grad_check(
        move |t, v| output_loss(t, v[0], &lab, false),
        &[acts],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn output_loss_rejects_mismatched_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(Tensor::zeros(Shape::volume(2, 2, 2)));
    let err = output_loss(&mut tape, a, &Tensor::zeros(Shape::volume(2, 2, 4)), false).unwrap_err();
    assert!(err.to_string().contains("2x2x4") || err.to_string().contains("1x1x2x2x4"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_loss_nonnegative_and_tight(seed in 0u64..1_000, scale in 0.0f64..60.0) {
        let shape = Shape::volume(2, 3, 4);
        let labels = random_labels(seed, shape, 0.5);
        let acts = random_acts(seed ^ 1, shape, 1.0)
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&n, &y)| (2.0 * y - 1.0) * scale + n)
            .collect::<Vec<_>>();
        let acts = Tensor::new(shape, acts).unwrap();
        let loss = loss_value(&acts, &labels);
        prop_assert!(loss >= 0.0);
        if loss <= 1e-8 {
            for (&a, &y) in acts.data().iter().zip(labels.data()) {
                let p = 1.0 / (1.0 + (-a).exp());
                prop_assert!((p - y).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn pyramid_matches_blockwise_any(seed in 0u64..10_000, p in 0.0f64..0.2) {
        let labels = random_labels(seed, Shape::volume(8, 16, 8), p);
        let pyr = build_label_pyramid(&labels, 4).unwrap();
        prop_assert_eq!(pyr.levels.len(), 4);
        prop_assert_eq!(&pyr.levels[3], &labels);
        for m in 1..=4 {
            let f = 1usize << (4 - m);
            let lvl = &pyr.levels[m - 1];
            prop_assert_eq!(lvl.shape(), Shape::volume(8 / f, 16 / f, 8 / f));
            for z in 0..8 / f {
                for y in 0..16 / f {
                    for x in 0..8 / f {
                        let mut any = false;
                        for dz in 0..f {
                            for dy in 0..f {
                                for dx in 0..f {
                                    any |= labels.get([0, 0, z * f + dz, y * f + dy, x * f + dx]) == 1.0;
                                }
                            }
                        }
                        prop_assert_eq!(lvl.get([0, 0, z, y, x]), if any { 1.0 } else { 0.0 });
                    }
                }
            }
        }
    }
}

#[test]
fn pyramid_examples() {
    let zeros = Tensor::<f64>::zeros(Shape::volume(8, 8, 8));
    let pyr = build_label_pyramid(&zeros, 4).unwrap();
    assert!(pyr.levels.iter().all(|l| l.sum() == 0.0));
    let mut one = zeros.clone();
    one.set([0, 0, 5, 2, 7], 1.0);
    let pyr = build_label_pyramid(&one, 4).unwrap();
    assert!(pyr.levels.iter().all(|l| l.sum() == 1.0));
    assert!(build_label_pyramid(&Tensor::<f64>::zeros(Shape::volume(8, 8, 12)), 4).is_err());
}

/// Free-standing multi-scale outputs at the four pyramid resolutions.
fn outputs_on(tape: &mut Tape<f64>, acts: &[Tensor<f64>]) -> MultiScaleOutputs {
    let activations: Vec<_> = acts.iter().map(|a| tape.param(a.clone())).collect();
    let probabilities = activations.iter().map(|&a| tape.sigmoid(a).unwrap()).collect::<Vec<_>>();
    let top = *probabilities.last().unwrap();
    MultiScaleOutputs {
        activations,
        probabilities,
        upsampled: None,
        fused: None,
        fused_probability: None,
        top,
    }
}

fn pyramid_shapes() -> Vec<Shape> {
    (1..=4).map(|m| {
        let e = 2usize << (m - 1);
        Shape::volume(e, e, e)
    }).collect()
}

#[test]
fn multiscale_loss_is_sum_of_output_losses() {
    for seed in 0..5 {
        let labels = random_labels(seed, Shape::volume(16, 16, 16), 0.05);
        let pyr = build_label_pyramid(&labels, 4).unwrap();
        let acts: Vec<_> = pyramid_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, s)| random_acts(seed * 10 + i as u64, s, 4.0))
            .collect();
        let mut tape = Tape::new();
        let outs = outputs_on(&mut tape, &acts);
        let (var, report) =
            multiscale_loss(&mut tape, &outs, &pyr, &Supervision::all(4), LossOptions::default()).unwrap();
        let oracle: f64 = (0..4).map(|m| loss_value(&acts[m], &pyr.levels[m])).sum();
        assert!((report.total - oracle).abs() <= 1e-9 * oracle);
        assert!((tape.value(var).data()[0] - oracle).abs() <= 1e-9 * oracle);
        let parts: f64 = report.per_output.iter().map(|v| v.unwrap()).sum();
        assert!((report.total - parts).abs() <= 1e-9 * parts);

        let (_, top) =
            multiscale_loss(&mut tape, &outs, &pyr, &Supervision::top_only(4), LossOptions::default()).unwrap();
        assert_eq!(top.per_output[..3], [None, None, None]);
        assert!((top.total - loss_value(&acts[3], &pyr.levels[3])).abs() <= 1e-12 * top.total);
    }
}

#[test]
fn identical_outputs_give_m_times_single_loss() {
    let shape = Shape::volume(4, 4, 4);
    let labels = random_labels(3, shape, 0.4);
    let acts = random_acts(4, shape, 2.0);
    let pyr = LabelPyramid { levels: vec![labels.clone(); 4] };
    let mut tape = Tape::new();
    let outs = outputs_on(&mut tape, &vec![acts.clone(); 4]);
    let (_, r) = multiscale_loss(&mut tape, &outs, &pyr, &Supervision::all(4), LossOptions::default()).unwrap();
    let single = loss_value(&acts, &labels);
    assert!((r.total - 4.0 * single).abs() <= 1e-12 * r.total);
}

#[test]
fn multiscale_loss_rejects_resolution_mismatch() {
    let labels = random_labels(0, Shape::volume(16, 16, 16), 0.1);
    let pyr = build_label_pyramid(&labels, 4).unwrap();
    let mut shapes = pyramid_shapes();
    shapes.swap(0, 1);
    let acts: Vec<_> = shapes.into_iter().map(|s| Tensor::zeros(s)).collect();
    let mut tape = Tape::new();
    let outs = outputs_on(&mut tape, &acts);
    assert!(multiscale_loss(&mut tape, &outs, &pyr, &Supervision::all(4), LossOptions::default()).is_err());
}

fn scalar_params(value: f64) -> NetworkParams<f64> {
    let t = |v| Tensor::full(Shape::new(1, 1, 1, 1, 1), v);
    let mut layers = BTreeMap::new();
    layers.insert("p".to_string(), ConvParams::new(t(value), t(0.0)).unwrap());
    NetworkParams { layers }
}

#[test]
fn sgd_single_step_to_zero() {
    let mut p = scalar_params(3.5);
    let g = p.clone();
    Sgd::new(0.0).step_by(&mut p, &g, 1.0, |_| Ok(1.0)).unwrap();
    assert_eq!(p.layers["p"].weight.data()[0], 0.0);
}

#[test]
fn sgd_matches_quadratic_bowl_recurrence() {
    // f(p) = p²/2 with lr 0.1, μ 0.9: p_{t+1} = 1.8 p_t − 0.9 p_{t−1}.
    let mut p = scalar_params(1.0);
    let mut sgd = Sgd::new(0.9);
    let (mut prev, mut cur) = (1.0f64, 1.0f64);
    for t in 0..200 {
        let g = p.clone();
        sgd.step_by(&mut p, &g, 0.1, |_| Ok(1.0)).unwrap();
        let next = if t == 0 { 0.9 } else { 1.8 * cur - 0.9 * prev };
        prev = cur;
        cur = next;
        let got = p.layers["p"].weight.data()[0];
        assert!((got - cur).abs() <= 1e-12, "step {t}: {got} vs {cur}");
    }
}

#[test]
fn sgd_rejects_misaligned_gradients() {
    let mut p = scalar_params(1.0);
    let mut g = scalar_params(1.0);
    g.layers.insert("q".into(), g.layers["p"].clone());
    assert!(Sgd::new(0.9).step_by(&mut p, &g, 0.1, |_| Ok(1.0)).is_err());
    let g = NetworkParams {
        layers: BTreeMap::from([("q".to_string(), scalar_params(1.0).layers["p"].clone())]),
    };
    assert!(Sgd::new(0.9).step_by(&mut p, &g, 0.1, |_| Ok(1.0)).is_err());
}

#[test]
fn lr_schedule_examples() {
    assert_eq!(lr_schedule(0, 1e-7, 30_000), 1e-7);
    assert!((lr_schedule(30_000, 1e-7, 30_000) - 1e-8).abs() <= 1e-20);
    assert!((lr_schedule(90_001, 1e-7, 30_000) - 1e-10).abs() <= 1e-22);
}

fn tiny_sample(seed: u64) -> TrainingSample<f32> {
    let shape = Shape::volume(8, 8, 8);
    let mut r = rng(seed);
    let vessel = Tensor::from_fn(shape, |[_, _, z, y, _]| {
        if (3..6).contains(&z) && (3..6).contains(&y) { 1.0 } else { 0.0 }
    });
    let wall = Tensor::from_fn(shape, |[_, _, z, y, _]| {
        if (z == 3 || z == 5) && (3..6).contains(&y) || (y == 3 || y == 5) && (3..6).contains(&z) {
            1.0
        } else {
            0.0
        }
    });
    let x = Tensor::from_fn(shape, |i| vessel.get(i) + 0.1 * r.random_range(-1.0..1.0f32));
    TrainingSample::new(x, wall, vessel).unwrap()
}

fn tiny_net() -> (vesselnet::nets::Network, NetworkParams<f32>) {
    build_i2i3d::<f32>(&NetworkSpec::new(Variant::I2i3d, 1.0 / 16.0), 5).unwrap()
}

#[test]
fn sgd_freeze_is_bit_exact_over_100_steps() {
    let (net, params) = tiny_net();
    let before = params.clone();
    let phase = CurriculumPhase {
        name: "C".into(),
        iterations: 100,
        base_lr: 1e-2,
        multipliers: PathMultipliers { fine_to_coarse: 0.0, coarse_to_fine: 1.0 },
        supervision: Supervision::top_only(4),
        target: LabelTarget::Wall,
        stop_on_plateau: false,
    };
    let samples = [tiny_sample(1), tiny_sample(2)];
    let mut trainer = Trainer::new(&net, params, TrainConfig::default(), 9).unwrap();
    trainer.run_phase(&samples, &phase, |_| {}).unwrap();
    let mut changed = 0;
    for l in net.layers() {
        let (a, b) = (&before.layers[&l.name], &trainer.params.layers[&l.name]);
        let same = a.weight.data() == b.weight.data() && a.bias.data() == b.bias.data();
        match l.group {
            PathGroup::FineToCoarse => assert!(same, "{} moved", l.name),
            PathGroup::CoarseToFine => changed += usize::from(!same),
        }
    }
    assert!(changed > 0);
}

#[test]
fn frozen_phase_has_constant_loss() {
    let (net, params) = tiny_net();
    let phase = CurriculumPhase {
        name: "frozen".into(),
        iterations: 12,
        base_lr: 1.0,
        multipliers: PathMultipliers { fine_to_coarse: 0.0, coarse_to_fine: 0.0 },
        supervision: Supervision::all(4),
        target: LabelTarget::Vessel,
        stop_on_plateau: false,
    };
    let (_, hist) =
        run_curriculum(&net, params, &[tiny_sample(3)], &[phase], TrainConfig::default(), 1).unwrap();
    assert_eq!(hist.len(), 12);
    assert!(hist.iter().all(|r| r.report.total == hist[0].report.total));
}

#[test]
fn curriculum_is_deterministic_and_numbers_iterations() {
    let (net, params) = tiny_net();
    let phases = default_phases(Variant::I2i3d, 4, 1e-3, [4, 5, 3]);
    let samples = [tiny_sample(1), tiny_sample(2), tiny_sample(3)];
    let run = || run_curriculum(&net, params.clone(), &samples, &phases, TrainConfig::default(), 42).unwrap();
    let (pa, ha) = run();
    let (pb, hb) = run();
    assert_eq!(ha, hb);
    assert_eq!(pa, pb);
    assert_eq!(ha.iter().map(|r| r.iteration).collect::<Vec<_>>(), (0..12).collect::<Vec<_>>());
    assert_eq!(ha.iter().filter(|r| r.phase == "B").count(), 5);
    // Every sample is drawn once per epoch.
    let mut first: Vec<_> = ha[..3].iter().map(|r| r.sample).collect();
    first.sort();
    assert_eq!(first, vec![0, 1, 2]);
    let (_, hc) = run_curriculum(&net, params, &samples, &phases, TrainConfig::default(), 43).unwrap();
    assert_ne!(ha, hc);
}

#[test]
fn curriculum_rejects_bad_phases() {
    let (net, params) = tiny_net();
    let mut phase = default_phases(Variant::I2i3d, 4, 1e-3, [1, 1, 1]).remove(2);
    phase.supervision = Supervision { outputs: vec![4], fused: true };
    let err = run_curriculum(&net, params.clone(), &[tiny_sample(0)], &[phase], TrainConfig::default(), 0);
    assert!(err.unwrap_err().to_string().contains("fused"));
    assert!(run_curriculum(&net, params.clone(), &[tiny_sample(0)], &[], TrainConfig::default(), 0).is_err());
    let phases = default_phases(Variant::I2i3d, 4, 1e-3, [1, 1, 1]);
    assert!(run_curriculum(&net, params, &[], &phases, TrainConfig::default(), 0).is_err());
}

#[test]
fn loss_csv_layout() {
    let (net, params) = tiny_net();
    let phases = default_phases(Variant::I2i3d, 4, 1e-3, [0, 2, 1]);
    let (_, hist) = run_curriculum(&net, params, &[tiny_sample(0)], &phases, TrainConfig::default(), 0).unwrap();
    let mut buf = Vec::new();
    write_loss_csv(&mut buf, &hist, 4, false).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "iteration,phase,lr,total,l1,l2,l3,l4");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,B,"));
    let last: Vec<_> = lines[3].split(',').collect();
    assert_eq!(&last[..2], &["2", "C"]);
    assert_eq!(&last[4..7], &["", "", ""]);
    assert!(!last[7].is_empty());
}
