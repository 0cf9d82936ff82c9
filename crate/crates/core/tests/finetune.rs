use inflens_core::eval::evaluate;
use inflens_core::finetune::{
    apply_step, fit, halving_learning_rate, history_csv, loss, loss_and_grad, FitError,
    TrainConfig,
};
use inflens_core::head::decompose;
use inflens_core::influence::build_influence_map;
use inflens_core::planted::{generate_planted, PlantedSpec};
use inflens_core::{DecomposedHead, LabeledSet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_problem(rng: &mut ChaCha8Rng) -> (DecomposedHead, LabeledSet) {
    let c = rng.random_range(2..=5);
    let m = rng.random_range(8..=16);
    let k = rng.random_range(1..=8);
    let parts = (0..c)
        .map(|_| {
            let mut idx: Vec<usize> = (0..m).collect();
            idx.shuffle(rng);
            idx.truncate(k);
            let w = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            (idx, w)
        })
        .collect();
    let bias = Some((0..c).map(|_| rng.random_range(-0.5..0.5)).collect());
    let d = DecomposedHead::from_parts(m, parts, bias).unwrap();
    let n = rng.random_range(1..=6);
    let rows = (0..n).map(|_| (0..m).map(|_| rng.random::<f64>() * 2.0).collect()).collect();
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    (d, LabeledSet::new(m, rows, labels).unwrap())
}

/// Central differences over every weight and bias, compared with the
/// analytic gradient as ‖a − n‖ / max(‖a‖, ‖n‖).
fn gradient_error(d: &DecomposedHead, data: &LabeledSet, l2: f64) -> f64 {
    let h = 1e-5;
    let (_, g) = loss_and_grad(d, data, l2).unwrap();
    let mut analytic = g.weights.concat();
    analytic.extend(g.bias.clone().unwrap_or_default());
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..d.classes() {
        for t in 0..d.subspace(i).len() {
            let probe = |delta: f64| {
                let mut p = d.clone();
                p.subspace_mut(i).weights_mut()[t] += delta;
                loss(&p, data, l2).unwrap()
            };
            numeric.push((probe(h) - probe(-h)) / (2.0 * h));
        }
    }
    for i in 0..d.bias().map_or(0, |b| b.len()) {
        let probe = |delta: f64| {
            let mut p = d.clone();
            p.bias_mut().unwrap()[i] += delta;
            loss(&p, data, l2).unwrap()
        };
        numeric.push((probe(h) - probe(-h)) / (2.0 * h));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(&analytic).max(norm(&numeric)).max(f64::MIN_POSITIVE)
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for trial in 0..50 {
        let (d, data) = random_problem(&mut rng);
        let l2 = if trial % 2 == 0 { 0.0 } else { 0.1 };
        let err = gradient_error(&d, &data, l2);
        assert!(err < 1e-6, "trial {trial}: {err}");
    }
}

#[test]
fn zero_head_loss_is_log_c() {
    for c in 2..6 {
        let parts = (0..c).map(|_| (vec![0, 1], vec![0.0, 0.0])).collect();
        let d = DecomposedHead::from_parts(3, parts, Some(vec![0.0; c])).unwrap();
        let data = LabeledSet::new(3, vec![vec![1.0, 2.0, 3.0]; c], (0..c).collect()).unwrap();
        assert!((loss(&d, &data, 0.0).unwrap() - (c as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn stationary_point_does_not_move() {
    // two classes with identical inputs and balanced labels: zero weights and
    // bias already minimize the loss
    let parts = vec![(vec![0], vec![0.0]), (vec![1], vec![0.0])];
    let d = DecomposedHead::from_parts(2, parts, Some(vec![0.0, 0.0])).unwrap();
    let data = LabeledSet::new(2, vec![vec![1.0, 1.0]; 2], vec![0, 1]).unwrap();
    let (_, g) = loss_and_grad(&d, &data, 0.0).unwrap();
    assert_eq!(g.norm_squared(), 0.0);
    let mut moved = d.clone();
    apply_step(&mut moved, &g, 0.5);
    assert_eq!(moved, d);
}

fn planted_problem() -> (DecomposedHead, LabeledSet, LabeledSet) {
    let data = generate_planted(&PlantedSpec::default()).unwrap();
    let imap = build_influence_map(&data.train.importance_by_class(), 3, 3).unwrap();
    let d = decompose(&data.head, &imap).unwrap();
    (d, data.train.labeled(), data.sample(100, 1).labeled())
}

#[test]
fn zero_epochs_return_input() {
    let (d, train, _) = planted_problem();
    let out = fit(&d, &train, &TrainConfig { epochs: 0, ..Default::default() }, None).unwrap();
    assert_eq!(out.head, d);
    assert!(out.history.is_empty());
}

#[test]
fn full_batch_loss_is_non_increasing() {
    let (d, train, holdout) = planted_problem();
    for lr in [1e-2, halving_learning_rate(&d, &train, 0.0, 1.0).unwrap()] {
        let config = TrainConfig {
            learning_rate: lr,
            epochs: 20,
            ..Default::default()
        };
        let out = fit(&d, &train, &config, Some(&holdout)).unwrap();
        let start = loss(&d, &train, 0.0).unwrap();
        let mut prev = start;
        for r in &out.history {
            assert!(r.loss <= prev, "lr {lr}: {} after {prev}", r.loss);
            prev = r.loss;
        }
        assert!(prev < start);
        for (a, b) in out.head.subspaces().iter().zip(d.subspaces()) {
            assert_eq!(a.indices(), b.indices());
        }
        assert_eq!(history_csv(&out.history).lines().count(), 21);
    }
}

#[test]
fn fitting_does_not_hurt_accuracy() {
    let data = generate_planted(&PlantedSpec::default()).unwrap();
    let imap = build_influence_map(&data.train.importance_by_class(), 3, 3).unwrap();
    let d = decompose(&data.head, &imap).unwrap();
    let train = data.train.labeled();
    let test = data.sample(200, 1).labeled();
    let before = evaluate(&test, &data.head, &d).unwrap().decomposed_accuracy;
    let lr = halving_learning_rate(&d, &train, 0.0, 1.0).unwrap();
    let config = TrainConfig { learning_rate: lr, epochs: 20, ..Default::default() };
    let fitted = fit(&d, &train, &config, None).unwrap().head;
    let after = evaluate(&test, &data.head, &fitted).unwrap().decomposed_accuracy;
    assert!(after >= before, "{after} < {before}");
}

#[test]
fn mini_batches_are_seeded() {
    let (d, train, _) = planted_problem();
    let config = TrainConfig { batch_size: 64, epochs: 3, learning_rate: 0.01, ..Default::default() };
    let a = fit(&d, &train, &config, None).unwrap();
    let b = fit(&d, &train, &config, None).unwrap();
    assert_eq!(a.head, b.head);
    let c = fit(&d, &train, &TrainConfig { seed: 1, ..config }, None).unwrap();
    assert_ne!(a.head, c.head);
}

#[test]
fn divergence_returns_last_finite_state() {
    let parts = vec![(vec![0], vec![0.0]), (vec![0], vec![0.0])];
    let d = DecomposedHead::from_parts(1, parts, None).unwrap();
    // an imbalanced label split gives a nonzero gradient, and the huge step
    // overflows the logits
    let data = LabeledSet::new(1, vec![vec![1e300]; 3], vec![0, 0, 1]).unwrap();
    let config = TrainConfig { learning_rate: 1e300, epochs: 5, ..Default::default() };
    match fit(&d, &data, &config, None) {
        Err(FitError::DivergenceDetected { epoch, last_finite, .. }) => {
            assert_eq!(epoch, 1);
            assert_eq!(*last_finite, d);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn bad_configs() {
    let (d, train, _) = planted_problem();
    for config in [
        TrainConfig { learning_rate: 0.0, ..Default::default() },
        TrainConfig { l2_penalty: -1.0, ..Default::default() },
    ] {
        assert!(matches!(fit(&d, &train, &config, None), Err(FitError::BadConfig(_))));
    }
}
