use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retina_ensemble::losses::{focal_term, BinaryWeight, ClassWeights, FocalConfig, LossKind};
use retina_ensemble::metrics::auroc;
use retina_ensemble::training::{
    evaluate_loss, fit_reference_model, FeatureSpec, ScheduleDriver, Split, StopDecision, TrainingConfig,
};

fn quick_config() -> TrainingConfig {
    TrainingConfig {
        phase1_epochs: 2,
        max_phase2_epochs: 30,
        iterations_per_epoch: 40,
        phase2_lr_start: 1e-2,
        lr_floor: 1e-4,
        early_stop_active_after: 10,
        early_stop_patience: 6,
        plateau_patience: 3,
        ..Default::default()
    }
}

/// Two Gaussian-free blobs separated along a random direction.
fn separable(n: usize, d: usize, seed: u64) -> (Array2<f64>, Array2<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut x = Array2::zeros((n, d));
    let mut y = Array2::zeros((n, 1));
    for i in 0..n {
        let label = u8::from(i % 2 == 0);
        let sign = if label == 1 { 1.0 } else { -1.0 };
        for j in 0..d {
            x[[i, j]] = sign * dir[j] + rng.gen_range(-0.3..0.3);
        }
        y[[i, 0]] = label;
    }
    (x, y)
}

fn classes() -> Vec<String> {
    vec!["A".into()]
}

#[test]
fn separable_data_reaches_high_auroc() {
    let (x, y) = separable(200, 6, 1);
    let (xt, xv) = x.view().split_at(Axis(0), 150);
    let (yt, yv) = y.view().split_at(Axis(0), 150);
    let weights = ClassWeights::from_targets(yt, &classes()).unwrap();
    let out = fit_reference_model(
        Split { x: xt, y: yt },
        Split { x: xv, y: yv },
        &classes(),
        &weights,
        FeatureSpec::Embedding { len: 6 },
        &quick_config(),
    )
    .unwrap();
    let p = out.model.predict_proba(xv).unwrap();
    let a = auroc(&p.column(0).to_vec(), &yv.column(0).to_vec()).unwrap();
    assert!(a > 0.99, "AUROC {a}");
}

#[test]
fn zero_features_give_the_constant_predictor() {
    let n = 60;
    let x = Array2::<f64>::zeros((n, 3));
    let y = Array2::from_shape_fn((n, 1), |(i, _)| u8::from(i % 3 == 0));
    let weights = ClassWeights::uniform(&classes());
    let cfg = TrainingConfig {
        loss: LossKind::Bce,
        ..quick_config()
    };
    let out = fit_reference_model(
        Split { x: x.view(), y: y.view() },
        Split { x: x.view(), y: y.view() },
        &classes(),
        &weights,
        FeatureSpec::Embedding { len: 3 },
        &cfg,
    )
    .unwrap();
    assert!(out.model.weights.iter().all(|&w| w == 0.0));
    let p = out.model.predict_proba(x.view()).unwrap();
    let q = p[[0, 0]];
    assert!(p.iter().all(|&v| v == q));
    let w = BinaryWeight { pos: 1.0, neg: 1.0 };
    let focal = FocalConfig::cross_entropy();
    let analytic = (n as f64 / 3.0 * focal_term(q, 1, w, &focal) + 2.0 * n as f64 / 3.0 * focal_term(q, 0, w, &focal))
        / n as f64;
    assert!((out.checkpoint.val_loss - analytic).abs() < 1e-12);
}

#[test]
fn training_is_deterministic_and_restores_the_best_epoch() {
    let (x, y) = separable(120, 4, 7);
    let (xt, xv) = x.view().split_at(Axis(0), 80);
    let (yt, yv) = y.view().split_at(Axis(0), 80);
    let weights = ClassWeights::from_targets(yt, &classes()).unwrap();
    let run = || {
        fit_reference_model(
            Split { x: xt, y: yt },
            Split { x: xv, y: yv },
            &classes(),
            &weights,
            FeatureSpec::Embedding { len: 4 },
            &quick_config(),
        )
        .unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
    assert_eq!(a.history.to_csv_bytes().unwrap(), b.history.to_csv_bytes().unwrap());

    let restored = evaluate_loss(&a.model, Split { x: xv, y: yv }, &weights, LossKind::default()).unwrap();
    let min = a.history.min_val_loss().unwrap();
    assert!((restored - min).abs() < 1e-9, "{restored} vs {min}");
    let best = a.history.epochs.iter().find(|e| e.val_loss == min).unwrap();
    assert_eq!(best.epoch, a.checkpoint.epoch);

    // the rate never rises during fine-tuning and never drops below the floor
    let cfg = quick_config();
    let phase2: Vec<f64> = a.history.epochs.iter().filter(|e| e.phase == 2).map(|e| e.lr).collect();
    assert!(phase2.windows(2).all(|w| w[1] <= w[0]));
    assert!(phase2.iter().all(|&lr| lr >= cfg.lr_floor));
}

#[test]
fn focal_gamma_zero_matches_bce_step_for_step() {
    let (x, y) = separable(50, 3, 3);
    let weights = ClassWeights::uniform(&classes());
    let fit = |loss| {
        let cfg = TrainingConfig { loss, ..quick_config() };
        fit_reference_model(
            Split { x: x.view(), y: y.view() },
            Split { x: x.view(), y: y.view() },
            &classes(),
            &weights,
            FeatureSpec::Embedding { len: 3 },
            &cfg,
        )
        .unwrap()
    };
    let focal = fit(LossKind::Focal { gamma: 0.0 });
    let bce = fit(LossKind::Bce);
    assert_eq!(focal.history.epochs, bce.history.epochs);
    assert_eq!(focal.model.weights, bce.model.weights);
}

#[test]
fn nan_features_abort() {
    let mut x = Array2::<f64>::zeros((4, 1));
    x[[0, 0]] = f64::NAN;
    let y = Array2::from_shape_fn((4, 1), |(i, _)| (i % 2) as u8);
    let r = fit_reference_model(
        Split { x: x.view(), y: y.view() },
        Split { x: x.view(), y: y.view() },
        &classes(),
        &ClassWeights::uniform(&classes()),
        FeatureSpec::Embedding { len: 1 },
        &quick_config(),
    );
    assert!(matches!(r, Err(retina_ensemble::Error::Numerical(_))));
}

/// Improvement for 30 fine-tuning epochs, then a flat validation loss.
#[test]
fn crafted_trace_matches_the_schedule_table() {
    let cfg = TrainingConfig::default();
    let mut driver = ScheduleDriver::new(&cfg).unwrap();
    let mut trace = Vec::new();
    while let Some((epoch, phase, lr)) = driver.next_epoch() {
        let val = 10.0 - epoch.min(40) as f64 * 0.01;
        let outcome = driver.record(val);
        trace.push((epoch, phase.number(), lr, outcome.decision));
    }
    let last = trace.last().unwrap();
    assert_eq!(last.0, 60);
    assert_eq!(last.3, StopDecision::Stop);
    for &(epoch, phase, lr, _) in &trace {
        let expected = match epoch {
            1..=10 => (1, 1e-4),
            11..=48 => (2, 1e-5),
            49..=56 => (2, 1e-6),
            _ => (2, 1e-7),
        };
        assert_eq!(phase, expected.0, "epoch {epoch}");
        assert!((lr - expected.1).abs() < 1e-18, "epoch {epoch}: lr {lr}");
    }
}
