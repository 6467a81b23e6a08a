use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use retina_ensemble::dataset::TargetMode;
use retina_ensemble::ensemble::StackedModel;
use retina_ensemble::synthetic::{generate, SyntheticConfig};
use retina_ensemble::{Error, Result, FORMAT_VERSIONS};
use retina_ensemble_cli::config::RunConfig;
use retina_ensemble_cli::pipeline::{self, Workspace};
use retina_ensemble_cli::{exit_code, synthetic_run_config};

#[derive(Parser)]
#[command(name = "retina-ensemble", about = "Multi-label fundus classification with a stacked ensemble")]
#[command(disable_version_flag = true)]
struct Cli {
    /// Print the crate version and every file-format version.
    #[arg(short = 'V', long)]
    version: bool,
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set training.batch_size=16`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Keep going when a stacker class has a single outcome.
    #[arg(long, global = true)]
    allow_degenerate: bool,
    /// Increase log verbosity.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Assign samples to stratified folds.
    Split {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Plan augmentation replicas for rare labels.
    Upsample {
        #[arg(long)]
        threshold: Option<usize>,
    },
    /// Preprocess images and compute reference-model features.
    Preprocess {
        /// Also write preprocessed tensors.
        #[arg(long)]
        tensors: bool,
    },
    /// Train ensemble members (all of them unless filtered).
    Train {
        #[arg(long)]
        mode: Option<TargetMode>,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Predict with a saved reference model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the output file stem.
        #[arg(long)]
        model_id: Option<String>,
    },
    /// Fit the stacked logistic regressions.
    StackFit,
    /// Apply the stacker to member predictions.
    StackPredict {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory holding one `<model_id>.csv` per member.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score prediction files against the manifest.
    Evaluate {
        #[arg(long, required = true, num_args = 1..)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole pipeline.
    RunAll,
    /// Write a synthetic dataset and a matching configuration.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 4)]
        labels: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut sets = Vec::new();
    let quote = |p: &PathBuf| serde_json::to_string(&p.to_string_lossy()).expect("string serializes");
    if let Some(m) = &c.manifest {
        sets.push(format!("manifest={}", quote(m)));
    }
    if let Some(w) = &c.work_dir {
        sets.push(format!("work_dir={}", quote(w)));
    }
    if let Some(s) = c.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(w) = c.workers {
        sets.push(format!("workers={w}"));
    }
    if c.allow_degenerate {
        sets.push("allow_degenerate=true".into());
    }
    sets.extend(c.overrides.iter().cloned());
    RunConfig::load(c.config.as_deref(), &sets)
}

fn require_file(path: &std::path::Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{} does not exist", path.display())))
    }
}

fn run(cli: Cli) -> Result<()> {
    let Some(command) = cli.command else {
        return Err(Error::InvalidArgument("no command given; see --help".into()));
    };
    if let Command::Synth {
        out,
        samples,
        labels,
        image_size,
    } = &command
    {
        let seed = cli.common.seed.unwrap_or(0);
        let data = generate(&SyntheticConfig {
            n_samples: *samples,
            n_labels: *labels,
            image_size: *image_size,
            seed,
            ..Default::default()
        })?;
        let manifest = data.write(out)?;
        let cfg = synthetic_run_config(&manifest, &out.join("work"), seed);
        let path = out.join("config.json");
        retina_ensemble::io::write_json(&path, &cfg)?;
        println!("wrote {} samples to {}", samples, manifest.display());
        println!("configuration: {}", path.display());
        return Ok(());
    }
    if let Command::Predict {
        model,
        features,
        out,
        model_id,
    } = &command
    {
        let id = model_id.clone().unwrap_or_else(|| {
            out.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into())
        });
        pipeline::predict_file(model, features, &id)?.write_csv(out)?;
        return Ok(());
    }

    let mut cfg = load_config(&cli.common)?;
    require_file(&cfg.manifest)?;
    if cfg.workers > 0 {
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    let ws = Workspace::new(&cfg.work_dir);
    match command {
        Command::Split { k } => {
            if let Some(k) = k {
                if k < 2 {
                    return Err(Error::InvalidArgument(format!("k = {k} must be >= 2")));
                }
                cfg.k = k;
            }
            let (_, table) = pipeline::split(&cfg)?;
            print!("{table}");
            println!("wrote {}", ws.folds().display());
        }
        Command::Upsample { threshold } => {
            if let Some(t) = threshold {
                cfg.upsample_threshold = t;
            }
            let plan = pipeline::upsample(&cfg)?;
            println!("{} replicas planned; wrote {}", plan.len(), ws.plan().display());
        }
        Command::Preprocess { tensors } => {
            for p in pipeline::preprocess_all(&cfg, tensors)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train { mode, arch, fold } => {
            require_file(&ws.folds())?;
            for s in pipeline::train_members(&cfg, mode, arch.as_deref(), fold)? {
                println!(
                    "{}: {} epochs, best epoch {} (val loss {:.6})",
                    s.model_id, s.epochs, s.best_epoch, s.val_loss
                );
            }
        }
        Command::StackFit => {
            let s = pipeline::stack_fit(&cfg)?;
            println!("feature columns: {}", s.feature_columns);
            println!("stacker models: {}", s.models);
            println!("training rows: {}", s.training_rows);
            if !s.degenerate.is_empty() {
                println!("constant models: {}", s.degenerate.join(", "));
            }
            if let Some(r) = s.cv_report {
                println!(
                    "cross-validated macro AUROC {} mAP {}",
                    fmt_opt(r.macro_auroc),
                    fmt_opt(r.macro_map)
                );
            }
        }
        Command::StackPredict {
            model,
            predictions,
            out,
        } => {
            let model = StackedModel::read(&model.unwrap_or_else(|| ws.stacker()))?;
            let preds = pipeline::stack_predict(&model, &predictions.unwrap_or_else(|| ws.predictions_dir()))?;
            let out = out.unwrap_or_else(|| ws.stacked());
            preds.write_csv(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate { predictions, out } => {
            let truth = pipeline::load_labels(&cfg)?;
            for path in predictions {
                let preds = retina_ensemble::ensemble::PredictionMatrix::read_csv(&path, None)?;
                let dir = out.join(preds.model_id());
                let r = pipeline::write_evaluation(&preds, &truth, &dir)?;
                println!(
                    "{}: macro AUROC {} mAP {} ({} skipped)",
                    preds.model_id(),
                    fmt_opt(r.macro_auroc),
                    fmt_opt(r.macro_map),
                    r.skipped.len()
                );
            }
        }
        Command::RunAll => {
            let s = pipeline::run_all(&cfg)?;
            println!("feature columns: {}", s.feature_columns);
            println!("stacker models: {}", s.stacker_models);
            for (id, (auroc, map)) in &s.members {
                println!("{id}: macro AUROC {} mAP {}", fmt_opt(*auroc), fmt_opt(*map));
            }
            if let Some(r) = &s.stacker_cv {
                println!(
                    "stacker (cross-validated): macro AUROC {} mAP {}",
                    fmt_opt(r.macro_auroc),
                    fmt_opt(r.macro_map)
                );
            }
        }
        Command::Predict { .. } | Command::Synth { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.version {
        println!("retina-ensemble {}", env!("CARGO_PKG_VERSION"));
        for (name, v) in FORMAT_VERSIONS {
            println!("{name} v{v}");
        }
        return ExitCode::SUCCESS;
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
