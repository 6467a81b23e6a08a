use indexmap::IndexMap;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retina_ensemble::dataset::{LabelMatrix, LabelSchema, SampleRecord};
use retina_ensemble::ensemble::PredictionMatrix;
use retina_ensemble::metrics::{evaluate_multilabel, macro_over_folds, ClassMetrics, EvalReport};

fn truth(labels: &Array2<u8>) -> LabelMatrix {
    let mut names = vec!["Risk".to_string()];
    names.extend((1..labels.ncols()).map(|i| format!("C{i}")));
    let schema = LabelSchema::new(names, "Risk").unwrap();
    let records = labels
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| SampleRecord {
            sample_id: format!("s{i:03}"),
            image_path: None,
            labels: r.to_vec(),
        })
        .collect();
    LabelMatrix::new(schema, records).unwrap()
}

fn preds(values: Array2<f64>, truth: &LabelMatrix) -> PredictionMatrix {
    let ids = truth.sample_ids();
    PredictionMatrix::new("m", ids, truth.schema().class_names().to_vec(), values).unwrap()
}

#[test]
fn random_predictions_score_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let y = Array2::from_shape_fn((200, 5), |_| u8::from(rng.gen_bool(0.4)));
    let t = truth(&y);
    let p = preds(Array2::from_shape_fn((200, 5), |_| rng.gen()), &t);
    let r = evaluate_multilabel(&p, &t, "random").unwrap();
    let a = r.macro_auroc.unwrap();
    assert!((0.4..=0.6).contains(&a), "macro AUROC {a}");
    assert!(r.skipped.is_empty());
}

#[test]
fn margin_thresholded_truth_scores_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scores = Array2::from_shape_fn((50, 3), |_| {
        if rng.gen_bool(0.5) {
            rng.gen_range(0.6..1.0)
        } else {
            rng.gen_range(0.0..0.4)
        }
    });
    let y = scores.mapv(|s| u8::from(s > 0.5));
    let t = truth(&y);
    let r = evaluate_multilabel(&preds(scores, &t), &t, "f0").unwrap();
    assert_eq!(r.macro_auroc, Some(1.0));
    assert!((r.macro_map.unwrap() - 1.0).abs() < 1e-12);
    assert!((r.composite.unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn single_outcome_classes_are_skipped() {
    let y = Array2::from_shape_fn((6, 2), |(i, c)| if c == 0 { (i % 2) as u8 } else { 0 });
    let t = truth(&y);
    let r = evaluate_multilabel(&preds(Array2::from_elem((6, 2), 0.3), &t), &t, "f0").unwrap();
    assert_eq!(r.skipped, vec!["C1".to_string()]);
    assert_eq!(r.macro_auroc, Some(0.5));
}

#[test]
fn unknown_sample_ids_are_rejected() {
    let y = Array2::from_shape_fn((4, 1), |(i, _)| (i % 2) as u8);
    let t = truth(&y);
    let p = PredictionMatrix::new(
        "m",
        vec!["s000".into(), "zzz".into()],
        vec!["Risk".into()],
        Array2::from_elem((2, 1), 0.5),
    )
    .unwrap();
    assert!(evaluate_multilabel(&p, &t, "f0").is_err());
}

fn report(tag: &str, values: &[(f64, f64)]) -> EvalReport {
    let classes: IndexMap<String, ClassMetrics> = values
        .iter()
        .enumerate()
        .map(|(i, &(a, ap))| {
            (
                format!("C{i}"),
                ClassMetrics {
                    auroc: Some(a),
                    ap: Some(ap),
                    positives: 1,
                    samples: 2,
                },
            )
        })
        .collect();
    let n = values.len() as f64;
    EvalReport {
        tag: tag.into(),
        classes,
        macro_auroc: Some(values.iter().map(|v| v.0).sum::<f64>() / n),
        macro_map: Some(values.iter().map(|v| v.1).sum::<f64>() / n),
        composite: None,
        skipped: vec![],
    }
}

#[test]
fn fold_average_is_classwise_then_macro() {
    let two = macro_over_folds(&[report("a", &[(0.8, 0.5)]), report("b", &[(1.0, 0.7)])], "cv").unwrap();
    assert!((two.macro_auroc.unwrap() - 0.9).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let folds: Vec<Vec<(f64, f64)>> = (0..5)
        .map(|_| (0..4).map(|_| (rng.gen(), rng.gen())).collect())
        .collect();
    let reports: Vec<EvalReport> = folds.iter().enumerate().map(|(i, v)| report(&format!("f{i}"), v)).collect();
    let avg = macro_over_folds(&reports, "cv").unwrap();
    let mut class_means = Vec::new();
    for c in 0..4 {
        let a: f64 = folds.iter().map(|f| f[c].0).sum::<f64>() / 5.0;
        let p: f64 = folds.iter().map(|f| f[c].1).sum::<f64>() / 5.0;
        assert!((avg.classes[&format!("C{c}")].auroc.unwrap() - a).abs() < 1e-12);
        class_means.push((a, p));
    }
    let macro_a = class_means.iter().map(|v| v.0).sum::<f64>() / 4.0;
    let macro_p = class_means.iter().map(|v| v.1).sum::<f64>() / 4.0;
    assert!((avg.macro_auroc.unwrap() - macro_a).abs() < 1e-12);
    assert!((avg.macro_map.unwrap() - macro_p).abs() < 1e-12);

    let same = macro_over_folds(&[reports[0].clone(), reports[0].clone()], "x").unwrap();
    assert!((same.macro_auroc.unwrap() - reports[0].macro_auroc.unwrap()).abs() < 1e-15);

    let other = report("odd", &[(0.5, 0.5)]);
    assert!(macro_over_folds(&[reports[0].clone(), other], "x").is_err());
}
