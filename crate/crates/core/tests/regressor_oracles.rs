use facecap::io::{from_json, to_json};
use facecap::regressor::{
    hinge_loss, squared_loss, train_stage1, train_stage2, train_stage3, Architecture, GroundTruth, Hyper, Mlp,
    PoseNormalization, RegressorBundle, TrainSample,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn loss_of(mlp: &Mlp, x: &DMatrix<f64>, t: &DMatrix<f64>) -> f64 {
    squared_loss(&mlp.forward(x).unwrap().output, t).0
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn backprop_matches_central_differences() {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..5 {
        let mut mlp = Mlp::new(&[4, 7, 5, 3], &mut rng).unwrap();
        for b in &mut mlp.biases {
            b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let x = random_matrix(4, 6, &mut rng);
        let t = random_matrix(3, 6, &mut rng).map(|v| 0.5 + 0.4 * v);
        let cache = mlp.forward(&x).unwrap();
        let (_, d_out) = squared_loss(&cache.output, &t);
        let (grads, d_in) = mlp.backward(&cache, &d_out);
        for l in 0..mlp.weights.len() {
            for k in 0..mlp.weights[l].len() {
                let mut plus = mlp.clone();
                plus.weights[l][k] += h;
                let mut minus = mlp.clone();
                minus.weights[l][k] -= h;
                let fd = (loss_of(&plus, &x, &t) - loss_of(&minus, &x, &t)) / (2.0 * h);
                assert!(rel_err(grads.weights[l][k], fd) < 1e-4, "trial {trial} layer {l} weight {k}");
            }
            for k in 0..mlp.biases[l].len() {
                let mut plus = mlp.clone();
                plus.biases[l][k] += h;
                let mut minus = mlp.clone();
                minus.biases[l][k] -= h;
                let fd = (loss_of(&plus, &x, &t) - loss_of(&minus, &x, &t)) / (2.0 * h);
                assert!(rel_err(grads.biases[l][k], fd) < 1e-4, "trial {trial} layer {l} bias {k}");
            }
        }
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (loss_of(&mlp, &xp, &t) - loss_of(&mlp, &xm, &t)) / (2.0 * h);
            assert!(rel_err(d_in[k], fd) < 1e-4, "trial {trial} input {k}");
        }
    }
}

#[test]
fn hinge_gradient_matches_central_differences_outside_dead_zone() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pred = DMatrix::from_fn(8, 3, |_, _| rng.random_range(0.0..1.0));
    let target = DMatrix::from_fn(8, 3, |_, _| rng.random_range(0.0..1.0));
    let (_, grad) = hinge_loss(&pred, &target, 0.01);
    let h = 1e-6;
    for k in 0..pred.len() {
        let mut p = pred.clone();
        p[k] += h;
        let mut m = pred.clone();
        m[k] -= h;
        let fd = (hinge_loss(&p, &target, 0.01).0 - hinge_loss(&m, &target, 0.01).0) / (2.0 * h);
        assert!(rel_err(grad[k], fd) < 1e-4, "entry {k}");
    }
}

fn toy_samples(n: usize, latent: usize, seed: u64) -> Vec<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| TrainSample {
            e: (0..latent).map(|_| rng.random_range(-1.0..1.0)).collect(),
            truth: Some(GroundTruth {
                pitch: rng.random_range(-10.0..10.0),
                yaw: rng.random_range(-80.0..80.0),
                w: (0..4).map(|_| rng.random()).collect(),
            }),
            landmarks: (0..136).map(|_| rng.random()).collect(),
        })
        .collect()
}

fn small_bundle(seed: u64) -> RegressorBundle {
    let mut arch = Architecture::new(6, vec![0], vec![1, 2, 3]);
    arch.hidden = vec![16, 16];
    arch.landmark_hidden = vec![12];
    RegressorBundle::new(arch, PoseNormalization::default(), seed).unwrap()
}

fn quick_hyper() -> Hyper {
    Hyper {
        epochs: 3,
        batch_size: 8,
        ..Hyper::default()
    }
}

#[test]
fn stage_two_touches_only_the_landmark_network() {
    let samples = toy_samples(20, 6, 1);
    let mut bundle = small_bundle(4);
    train_stage1(&mut bundle, &samples, &quick_hyper()).unwrap();
    let before = bundle.clone();
    train_stage2(&mut bundle, &samples, &quick_hyper()).unwrap();
    assert_eq!(bundle.p, before.p);
    assert_eq!(bundle.j, before.j);
    assert_eq!(bundle.w, before.w);
    assert_ne!(bundle.l, before.l);
}

#[test]
fn stage_three_leaves_the_landmark_network_bit_identical() {
    let samples = toy_samples(20, 6, 1);
    let mut real = toy_samples(10, 6, 2);
    real.iter_mut().for_each(|s| s.truth = None);
    let mut bundle = small_bundle(4);
    train_stage2(&mut bundle, &samples, &quick_hyper()).unwrap();
    let before = bundle.clone();
    train_stage3(&mut bundle, &samples, &real, &quick_hyper()).unwrap();
    assert_eq!(bundle.l, before.l);
    assert_ne!(bundle.p, before.p);
}

#[test]
fn training_is_deterministic() {
    let samples = toy_samples(20, 6, 1);
    let run = || {
        let mut b = small_bundle(4);
        let log = train_stage1(&mut b, &samples, &quick_hyper()).unwrap();
        (b, log)
    };
    assert_eq!(run(), run());
}

#[test]
fn single_sample_is_memorized() {
    let samples = toy_samples(1, 6, 5);
    let mut bundle = small_bundle(2);
    let hyper = Hyper {
        epochs: 1000,
        batch_size: 1,
        learning_rate: 0.02,
        decay: 1.0,
        ..Hyper::default()
    };
    let log = train_stage1(&mut bundle, &samples, &hyper).unwrap();
    assert!(*log.epoch_loss.last().unwrap() < 1e-3, "{:?}", log.epoch_loss.last());
}

#[test]
fn bundle_json_round_trip_is_exact() {
    let bundle = small_bundle(8);
    let text = to_json("regressor", &bundle).unwrap();
    let back: RegressorBundle = from_json("regressor", &text).unwrap();
    assert_eq!(back, bundle);
}

#[test]
fn untrained_zero_bundle_predicts_range_midpoint() {
    let mut bundle = small_bundle(1);
    for m in [&mut bundle.p, &mut bundle.j, &mut bundle.w] {
        *m = Mlp::zeros(&m.sizes);
    }
    let p = bundle.predict(&[0.3; 6]).unwrap();
    assert_eq!((p.pitch, p.yaw), (0.0, 0.0));
    assert_eq!(p.w, vec![0.5; 4]);
}

proptest! {
    #[test]
    fn hinge_is_zero_inside_delta(
        offsets in proptest::collection::vec((0.0..0.0099f64, 0.0..std::f64::consts::TAU), 1..20),
    ) {
        let n = offsets.len();
        let target = DMatrix::from_fn(2 * n, 1, |r, _| 0.3 + 0.01 * r as f64);
        let mut pred = target.clone();
        for (k, (r, a)) in offsets.iter().enumerate() {
            pred[(2 * k, 0)] += r * a.cos();
            pred[(2 * k + 1, 0)] += r * a.sin();
        }
        let (loss, grad) = hinge_loss(&pred, &target, 0.01);
        prop_assert_eq!(loss, 0.0);
        prop_assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn pose_normalization_round_trips(p in -10.0..10.0f64, y in -80.0..80.0f64) {
        let n = PoseNormalization::default();
        let (p2, y2) = n.denormalize(&n.normalize(p, y));
        prop_assert!((p - p2).abs() < 1e-10 && (y - y2).abs() < 1e-10);
    }
}
