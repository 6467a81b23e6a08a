//! Acceptance suite. Every criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retina_ensemble::dataset::{LabelMatrix, LabelSchema, SampleRecord, TargetMode};
use retina_ensemble::ensemble::{assemble_oof_features, check_out_of_fold, fit_stacker, PredictionMatrix, StackerConfig};
use retina_ensemble::imaging::{
    augment, center_crop, flip_horizontal, flip_vertical, hsv_to_rgb, preprocess, resize_bilinear, rgb_to_hsv,
    rotate, square_pad, ArchPreset, AugmentParams, CameraProfile, ImageBuffer, NormalizationStats,
};
use retina_ensemble::lbfgs::{fit_logistic, lbfgs_minimize, logistic_objective, LbfgsConfig};
use retina_ensemble::losses::{class_weight, focal_loss, focal_loss_grad, BinaryWeight, ClassWeights, FocalConfig};
use retina_ensemble::metrics::{auroc, average_precision};
use retina_ensemble::sampling::{stratified_kfold, upsample_plan, FoldAssignment};
use retina_ensemble::synthetic::{generate, SyntheticConfig};
use retina_ensemble::training::{ScheduleDriver, StopDecision, TrainingConfig};
use retina_ensemble_cli::config::RunConfig;
use retina_ensemble_cli::pipeline::run_all;
use retina_ensemble_cli::synthetic_run_config;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(start: Instant, limit: Duration) -> Outcome {
    let t = start.elapsed();
    ensure!(t < limit, "took {t:.2?}, limit {limit:?}");
    Ok(format!("{t:.2?}"))
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

// 1
fn focal_loss_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=4);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-4..1.0 - 1e-4)).collect();
        let y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let fl = focal_loss(&p, &y, &ClassWeights::uniform(&names(n)), &FocalConfig { gamma: 0.0, epsilon: 1e-7 })
            .map_err(|e| e.to_string())?;
        let bce: f64 = p
            .iter()
            .zip(&y)
            .map(|(&p, &y)| if y == 1 { -p.ln() } else { -(1.0 - p).ln() })
            .sum();
        worst = worst.max((fl - bce).abs());
    }
    ensure!(worst <= 1e-12, "focal(γ=0) vs BCE differs by {worst:e}");

    // α = 0.5, γ = 2, p_t = 0.9: 0.5 · 0.1² · (−ln 0.9)
    let w = ClassWeights::new(
        [("c0".to_string(), BinaryWeight { pos: 0.5, neg: 0.5 })]
            .into_iter()
            .collect(),
    )
    .map_err(|e| e.to_string())?;
    let cfg = FocalConfig { gamma: 2.0, epsilon: 1e-7 };
    let pos = focal_loss(&[0.9], &[1], &w, &cfg).map_err(|e| e.to_string())?;
    let neg = focal_loss(&[0.1], &[0], &w, &cfg).map_err(|e| e.to_string())?;
    for v in [pos, neg] {
        ensure!((v - 5.26803e-4).abs() < 1e-9, "hand value {v:e}");
    }
    let timing = within(start, Duration::from_secs(1))?;
    Ok(format!("max |FL−BCE| {worst:.1e}, hand value {pos:.6e}, {timing}"))
}

// 2
fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let gamma = [0.0, 1.0, 2.0, 5.0][i % 4];
        let cfg = FocalConfig { gamma, epsilon: 1e-7 };
        let p = rng.gen_range(0.01..0.99);
        let y = rng.gen_range(0..2u8);
        let weight = BinaryWeight {
            pos: rng.gen_range(0.1..5.0),
            neg: rng.gen_range(0.1..5.0),
        };
        let w = ClassWeights::new([("c0".to_string(), weight)].into_iter().collect()).map_err(|e| e.to_string())?;
        let f = |x: f64| focal_loss(&[x], &[y], &w, &cfg).expect("valid input");
        let numeric = (f(p + h) - f(p - h)) / (2.0 * h);
        let analytic = focal_loss_grad(&[p], &[y], &w, &cfg).map_err(|e| e.to_string())?[0];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        worst = worst.max(rel);
    }
    ensure!(worst < 1e-5, "max relative error {worst:e}");
    let timing = within(start, Duration::from_secs(5))?;
    Ok(format!("max relative error {worst:.1e}, {timing}"))
}

// 3
fn class_weight_formula() -> Outcome {
    let risk = class_weight(1920, 2, 1519).map_err(|e| e.to_string())?;
    ensure!((risk - 0.631_994_733_377_221_9).abs() < 1e-9, "weight {risk}");
    let balanced = class_weight(400, 2, 200).map_err(|e| e.to_string())?;
    ensure!(balanced == 1.0, "balanced weight {balanced}");
    Ok(format!("disease risk {risk:.9}, balanced {balanced}"))
}

fn auroc_oracle(s: &[f64], y: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] == 1 && y[j] == 0 {
                pairs += 1.0;
                if s[i] > s[j] {
                    wins += 1.0;
                } else if s[i] == s[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Precision and recall at every distinct threshold, highest first.
fn ap_oracle(s: &[f64], y: &[u8]) -> f64 {
    let mut thresholds: Vec<f64> = s.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let positives = y.iter().filter(|&&v| v == 1).count() as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let selected: Vec<usize> = (0..s.len()).filter(|&i| s[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| y[i] == 1).count() as f64;
        let recall = tp / positives;
        let precision = tp / selected.len() as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

// 4
fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_auc, mut worst_ap): (f64, f64) = (0.0, 0.0);
    let mut tied = 0;
    for i in 0..500 {
        let n = rng.gen_range(2..=50);
        let levels = if i % 10 == 0 { 1 } else { rng.gen_range(2..=n.max(3)) };
        tied += usize::from(levels == 1);
        let s: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..levels as u32)) / 7.0).collect();
        let mut y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        y[0] = 1;
        y[1] = 0;
        let a = auroc(&s, &y).map_err(|e| e.to_string())?;
        let p = average_precision(&s, &y).map_err(|e| e.to_string())?;
        worst_auc = worst_auc.max((a - auroc_oracle(&s, &y)).abs());
        worst_ap = worst_ap.max((p - ap_oracle(&s, &y)).abs());
    }
    ensure!(worst_auc <= 1e-12 && worst_ap <= 1e-12, "AUROC error {worst_auc:e}, AP error {worst_ap:e}");
    let timing = within(start, Duration::from_secs(10))?;
    Ok(format!(
        "AUROC error {worst_auc:.1e}, AP error {worst_ap:.1e}, {tied} all-tied instances, {timing}"
    ))
}

// 5
fn splitter() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = 5;
    let mut worst = 0;
    for inst in 0..1000 {
        let n = rng.gen_range(k..=300);
        let l = rng.gen_range(1..=10);
        let prevalence: Vec<f64> = (0..l).map(|_| rng.gen_range(0.01..0.6)).collect();
        let y = Array2::from_shape_fn((n, l), |(_, j)| u8::from(rng.gen_bool(prevalence[j])));
        let seed = rng.gen();
        let a = stratified_kfold(y.view(), k, seed).map_err(|e| e.to_string())?;
        let b = stratified_kfold(y.view(), k, seed).map_err(|e| e.to_string())?;
        let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let bytes = |f: &[usize]| {
            FoldAssignment::from_folds(k, &ids, f)
                .and_then(|x| x.to_csv_bytes())
                .map_err(|e| e.to_string())
        };
        ensure!(bytes(&a)? == bytes(&b)?, "instance {inst}: not deterministic");
        ensure!(a.len() == n && a.iter().all(|&f| f < k), "instance {inst}: not a partition");
        for j in 0..l {
            let mut counts = vec![0usize; k];
            for i in 0..n {
                counts[a[i]] += usize::from(y[[i, j]]);
            }
            let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
            worst = worst.max(spread);
            ensure!(spread <= 2, "instance {inst} label {j}: fold positives {counts:?}");
        }
    }
    Ok(format!("1000 instances, max per-label spread {worst}"))
}

fn label_matrix(y: &Array2<u8>) -> Result<LabelMatrix, String> {
    let mut classes = vec!["Risk".to_string()];
    classes.extend((1..y.ncols()).map(|i| format!("L{i}")));
    let schema = LabelSchema::new(classes, "Risk").map_err(|e| e.to_string())?;
    let records = y
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| SampleRecord {
            sample_id: format!("s{i}"),
            image_path: None,
            labels: r.to_vec(),
        })
        .collect();
    LabelMatrix::new(schema, records).map_err(|e| e.to_string())
}

// 6
fn upsampling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut replicas = 0;
    for inst in 0..200 {
        let n = rng.gen_range(1..=120);
        let l = rng.gen_range(1..=8);
        let prevalence: Vec<f64> = (0..l).map(|_| rng.gen_range(0.0..0.5)).collect();
        let y = Array2::from_shape_fn((n, l), |(_, j)| u8::from(rng.gen_bool(prevalence[j])));
        let m = label_matrix(&y)?;
        let threshold = rng.gen_range(1..=60);
        let plan = upsample_plan(&m, threshold, rng.gen());
        let after = plan.materialize(&m).map_err(|e| e.to_string())?.label_counts();
        let mut bound = 0;
        for (name, &c) in &m.label_counts() {
            if c > 0 {
                ensure!(after[name] >= threshold, "instance {inst}: {name} has {} < {threshold}", after[name]);
            }
            bound += threshold.saturating_sub(c);
        }
        ensure!(plan.len() <= bound, "instance {inst}: {} replicas over bound {bound}", plan.len());
        replicas += plan.len();
    }
    Ok(format!("200 instances, {replicas} replicas"))
}

// 7
fn lbfgs_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // ‖∇f‖∞ ≤ 1e-9 bounds ‖∇f‖₂ below 1e-8 for d ≤ 50, and with the smallest
    // eigenvalue at 1 also ‖x − x*‖₂
    let cfg = LbfgsConfig {
        max_iterations: 200,
        grad_tolerance: 1e-9,
        ..Default::default()
    };
    let (mut worst_x, mut worst_g, mut most_iter): (f64, f64, usize) = (0.0, 0.0, 0);
    for inst in 0..100 {
        let d = rng.gen_range(1..=50);
        let g = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let q = g.qr().q();
        // spectrum uniform in [1, cond] with both ends present
        let cond: f64 = rng.gen_range(1.0..=1e3);
        let mut eig = DVector::from_fn(d, |_, _| rng.gen_range(1.0..=cond));
        eig[0] = 1.0;
        if d > 1 {
            eig[d - 1] = cond;
        }
        let a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
        let b = DVector::from_fn(d, |_, _| rng.gen_range(-10.0..10.0));
        let direct = a.clone().cholesky().ok_or("matrix not positive definite")?.solve(&b);
        let report = lbfgs_minimize(
            |x, grad| {
                let x = DVector::from_column_slice(x);
                let ax = &a * &x;
                grad.copy_from_slice((&ax - &b).as_slice());
                0.5 * x.dot(&ax) - b.dot(&x)
            },
            &vec![0.0; d],
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        let x = DVector::from_vec(report.x.clone());
        let grad = &a * &x - &b;
        let gnorm = grad.norm();
        let err = (&x - &direct).norm();
        ensure!(report.iterations <= 200, "instance {inst}: {} iterations", report.iterations);
        ensure!(gnorm < 1e-8, "instance {inst} (d={d}, cond={cond:.0}): ‖∇f‖ {gnorm:e}");
        ensure!(err < 1e-8, "instance {inst} (d={d}, cond={cond:.0}): ‖x−x*‖ {err:e}");
        worst_x = worst_x.max(err);
        worst_g = worst_g.max(gnorm);
        most_iter = most_iter.max(report.iterations);
    }

    let rosen = lbfgs_minimize(
        |x, g| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        },
        &[-1.2, 1.0],
        &LbfgsConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let dist = ((rosen.x[0] - 1.0).powi(2) + (rosen.x[1] - 1.0).powi(2)).sqrt();
    ensure!(dist < 1e-6, "Rosenbrock ended at {:?}", rosen.x);
    Ok(format!(
        "quadratics: max ‖∇f‖ {worst_g:.1e}, max ‖x−x*‖ {worst_x:.1e}, max {most_iter} iterations; Rosenbrock distance {dist:.1e}"
    ))
}

// 8
fn logistic_stationarity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for inst in 0..100 {
        let n = rng.gen_range(10..=300);
        let d = rng.gen_range(1..=20);
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let mut y: Vec<u8> = x
            .rows()
            .into_iter()
            .map(|r| {
                let z: f64 = r.iter().zip(&w).map(|(a, b)| a * b).sum();
                u8::from(rng.gen::<f64>() < 1.0 / (1.0 + (-z).exp()))
            })
            .collect();
        y[0] = 1;
        y[1] = 0;
        let fit = fit_logistic(x.view(), &y, 1e-4, &LbfgsConfig::default()).map_err(|e| e.to_string())?;
        let mut theta = fit.model.coefficients.clone();
        theta.push(fit.model.intercept);
        let mut grad = vec![0.0; d + 1];
        logistic_objective(x.view(), &y, 1e-4, &theta, &mut grad);
        let g = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        ensure!(g < 1e-7, "dataset {inst} (n={n}, d={d}): ‖∇‖∞ {g:e}");
        worst = worst.max(g);
    }
    Ok(format!("100 datasets, max ‖∇‖∞ {worst:.1e}"))
}

/// Runs the schedule over `val(epoch)` and returns `(epoch, lr)` per epoch
/// and the epoch with the stop decision.
fn trace(val: impl Fn(usize) -> f64) -> Result<(Vec<(usize, f64)>, Option<usize>), String> {
    let cfg = TrainingConfig::default();
    let mut driver = ScheduleDriver::new(&cfg).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    let mut stop = None;
    while let Some((epoch, _, lr)) = driver.next_epoch() {
        rows.push((epoch, lr));
        if driver.record(val(epoch)).decision == StopDecision::Stop {
            stop = Some(epoch);
        }
    }
    Ok((rows, stop))
}

// 9
fn schedule_table() -> Outcome {
    struct Case {
        last_improvement: usize,
        stop: Option<usize>,
        /// `(first epoch, lr)` segments of fine-tuning.
        lr: &'static [(usize, f64)],
    }
    let cases = [
        // stale from 41: decays after 48 and 56, 20 stale epochs at 60
        Case { last_improvement: 40, stop: Some(60), lr: &[(11, 1e-5), (49, 1e-6), (57, 1e-7)] },
        // 20 stale epochs reached at 45, but the gate holds until 60
        Case { last_improvement: 25, stop: Some(60), lr: &[(11, 1e-5), (34, 1e-6), (42, 1e-7)] },
        Case { last_improvement: 55, stop: Some(75), lr: &[(11, 1e-5), (64, 1e-6), (72, 1e-7)] },
        Case { last_improvement: 300, stop: None, lr: &[(11, 1e-5)] },
    ];
    for c in &cases {
        let (rows, stop) = trace(|e| 10.0 - e.min(c.last_improvement) as f64 * 0.01)?;
        ensure!(stop == c.stop, "improving until {}: stop {stop:?}, expected {:?}", c.last_improvement, c.stop);
        let last = c.stop.unwrap_or(300);
        ensure!(rows.len() == last, "improving until {}: {} epochs", c.last_improvement, rows.len());
        for &(epoch, lr) in &rows {
            let expected = if epoch <= 10 {
                1e-4
            } else {
                c.lr.iter().rev().find(|s| epoch >= s.0).unwrap().1
            };
            ensure!(
                (lr - expected).abs() <= 1e-18,
                "improving until {}: epoch {epoch} lr {lr:e}, expected {expected:e}",
                c.last_improvement
            );
        }
    }
    Ok("4 traces, lr 1e-5 → 1e-6 → 1e-7, stops at 60, 60, 75 and none".into())
}

fn max_diff(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

// 10
fn preprocessing_geometry() -> Outcome {
    let pattern = |r: usize, c: usize, ch: usize| ((r * 31 + c * 17 + ch * 7) % 97) as f64 / 96.0;
    let stats = NormalizationStats::identity();
    let mut checked = Vec::new();
    for cam in CameraProfile::rfmid() {
        let img = ImageBuffer::from_fn(cam.native_height, cam.native_width, pattern);
        for size in [224, 299, 380] {
            let arch = ArchPreset::new("a", size).map_err(|e| e.to_string())?;
            let out = preprocess(&img, Some(&cam), &arch, &stats).map_err(|e| e.to_string())?;
            ensure!(
                (out.height(), out.width()) == (size, size),
                "{}x{} → {size}: got {}x{}",
                cam.native_width,
                cam.native_height,
                out.height(),
                out.width()
            );
        }
        checked.push(format!("{}x{}/{}", cam.native_width, cam.native_height, cam.crop_size));

        // same geometry, scaled down by 8, against the explicit composition
        let (h, w, crop) = (cam.native_height / 8, cam.native_width / 8, cam.crop_size / 8);
        let small = ImageBuffer::from_fn(h, w, pattern);
        let small_cam = CameraProfile::new(w, h, crop).map_err(|e| e.to_string())?;
        let arch = ArchPreset::new("a", 64).map_err(|e| e.to_string())?;
        let fused = preprocess(&small, Some(&small_cam), &arch, &stats).map_err(|e| e.to_string())?;
        let composed = square_pad(&small, 0.0);
        let composed = center_crop(&composed, crop).map_err(|e| e.to_string())?;
        let composed = resize_bilinear(&composed, 64).map_err(|e| e.to_string())?;
        let d = max_diff(&fused, &composed);
        ensure!(d < 1e-6, "pad→crop→resize differs by {d:e}");
    }

    let img = ImageBuffer::from_fn(37, 37, pattern);
    let cases = [
        ("identity", augment(&img, &AugmentParams::identity()), img.clone()),
        ("h-flip twice", flip_horizontal(&flip_horizontal(&img)), img.clone()),
        ("v-flip twice", flip_vertical(&flip_vertical(&img)), img.clone()),
        ("rotate 180", rotate(&img, 180.0), flip_vertical(&flip_horizontal(&img))),
        ("rotate 0", rotate(&img, 0.0), img.clone()),
        (
            "full hue turn",
            augment(&img, &AugmentParams { hue_delta: 1.0, ..AugmentParams::identity() }),
            img.clone(),
        ),
    ];
    for (name, got, want) in &cases {
        let d = max_diff(got, want);
        ensure!(d <= 1e-6, "{name}: differs by {d:e}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..1000 {
        let px = [rng.gen(), rng.gen(), rng.gen()];
        let back = hsv_to_rgb(rgb_to_hsv(px));
        ensure!(px.iter().zip(back).all(|(a, b)| (a - b).abs() <= 1e-6), "HSV round trip of {px:?}");
    }
    Ok(format!("{} → 224/299/380; 6 augmentation invariants", checked.join(", ")))
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_path_buf();
                out.insert(rel, std::fs::read(&path).expect("readable file"));
            }
        }
    }
    out
}

// 11
fn end_to_end() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut artifacts = Vec::new();
    let mut summaries = Vec::new();
    for run in ["a", "b"] {
        let run_start = Instant::now();
        let dir = tmp.path().join(run);
        let data = generate(&SyntheticConfig {
            seed: 11,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let manifest = data.write(&dir).map_err(|e| e.to_string())?;
        let cfg = synthetic_run_config(&manifest, &dir.join("work"), 11);
        let summary = run_all(&cfg).map_err(|e| e.to_string())?;
        let elapsed = run_start.elapsed();
        ensure!(elapsed < Duration::from_secs(300), "run {run} took {elapsed:.1?}");
        artifacts.push(files(&dir));
        summaries.push((summary, elapsed));
    }
    ensure!(artifacts[0] == artifacts[1], "reruns with the same seed differ");
    let (summary, elapsed) = &summaries[0];
    let stacked = summary
        .stacker_cv
        .as_ref()
        .and_then(|r| r.macro_auroc)
        .ok_or("no cross-validated stacker AUROC")?;
    ensure!(summary.members.len() == 20, "{} members", summary.members.len());
    let best = summary
        .members
        .values()
        .map(|m| m.0.unwrap_or(f64::NAN))
        .fold(f64::NEG_INFINITY, f64::max);
    ensure!(stacked > 0.9, "stacked macro AUROC {stacked:.4}");
    ensure!(stacked >= best, "stacked {stacked:.4} below best member {best:.4}");
    Ok(format!(
        "stacked macro AUROC {stacked:.4} (best member {best:.4}), {} files identical, {elapsed:.1?} per run, {:.1?} total",
        artifacts[0].len(),
        start.elapsed()
    ))
}

// 12
fn ensemble_shape() -> Outcome {
    let spec = RunConfig::default().ensemble_spec().map_err(|e| e.to_string())?;
    let labels: Vec<String> = (1..=28).map(|i| format!("C{i:02}")).collect();
    let mut classes = vec!["Disease_Risk".to_string()];
    classes.extend(labels.iter().cloned());
    let n = 100;
    let ids: Vec<String> = (0..n).map(|i| format!("s{i:03}")).collect();
    let folds =
        FoldAssignment::from_folds(5, &ids, &(0..n).map(|i| i % 5).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let preds: Vec<PredictionMatrix> = spec
        .members
        .iter()
        .map(|m| {
            let cols = match m.model_type {
                TargetMode::Detector => vec!["Disease_Risk".to_string()],
                TargetMode::Classifier => labels.clone(),
            };
            let values = Array2::from_shape_fn((n, cols.len()), |_| rng.gen::<f64>());
            PredictionMatrix::new(m.model_id.clone(), ids.clone(), cols, values).map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    let detectors = spec.members.iter().filter(|m| m.model_type == TargetMode::Detector).count();
    let table = assemble_oof_features(&preds, &spec, &folds, &ids).map_err(|e| e.to_string())?;
    check_out_of_fold(&table, &spec, &folds).map_err(|e| e.to_string())?;
    ensure!(table.columns.len() == 570, "{} stacking features", table.columns.len());
    let targets = Array2::from_shape_fn((n, 29), |(i, c)| u8::from((i + c) % 3 == 0));
    let model =
        fit_stacker(&table, targets.view(), &classes, &spec, &StackerConfig::default()).map_err(|e| e.to_string())?;
    ensure!(model.classes.len() == 29, "{} stacker models", model.classes.len());
    Ok(format!(
        "{detectors} detectors + {} classifiers → {} features, {} models",
        spec.len() - detectors,
        table.columns.len(),
        model.classes.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("focal loss unit suite", focal_loss_suite),
        ("focal gradient check", gradient_check),
        ("class-weight formula", class_weight_formula),
        ("metric oracles", metric_oracles),
        ("stratified splitter", splitter),
        ("up-sampling", upsampling),
        ("L-BFGS", lbfgs_suite),
        ("logistic stationarity", logistic_stationarity),
        ("schedule state machine", schedule_table),
        ("preprocessing geometry", preprocessing_geometry),
        ("end-to-end synthetic pipeline", end_to_end),
        ("ensemble shape", ensemble_shape),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
