//! Command-line entry points: synthetic data generation, training,
//! prediction, evaluation, ensembling and gradient verification.
//!
//! Exit codes: 0 success, 2 usage/configuration error, 3 data error,
//! 4 numerical failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use asl_core::data::{
    load_checkpoint, load_dataset, load_predictions, save_checkpoint, save_predictions,
    synth_generate, RunConfig,
};
use asl_core::error::Error;
use asl_core::metrics::EvalReport;
use asl_core::network::{Mode, Model};
use asl_core::pipeline::{evaluate_mq, evaluate_nlq, predict_mq, predict_nlq};
use asl_core::postprocess::{ensemble_topk_merge, sort_predictions, SegmentPrediction};
use asl_core::train::{end_to_end_gradcheck, train_model};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "asl",
    version,
    about = "Temporal action localization and language grounding with learned per-frame sensitivity"
)]
pub struct Cli {
    /// Run configuration file (key = value lines).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override a config key, repeatable: --set train.lr=0.001
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Output directory for artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Worker threads for data-parallel sections (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Shorthand for --set train.seed=N --set synth.seed=N.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a deterministic synthetic dataset.
    Synth,
    /// Train a detection model on data.train_manifest.
    TrainMq,
    /// Train a grounding model on data.train_manifest.
    TrainNlq,
    /// Run a checkpoint over a manifest and write predictions.
    Predict {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Manifest to predict on (default: data.val_manifest).
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
    },
    /// Evaluate detection predictions against a manifest.
    EvalMq {
        #[arg(long, value_name = "PATH")]
        predictions: PathBuf,
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
    },
    /// Evaluate grounding predictions against a manifest.
    EvalNlq {
        #[arg(long, value_name = "PATH")]
        predictions: PathBuf,
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
    },
    /// Combine models (mean logits over checkpoints) or prediction files
    /// (confidence-sorted top-k merge).
    Ensemble {
        /// Checkpoints for the mean-logit path (repeatable).
        #[arg(long = "checkpoint", value_name = "PATH")]
        checkpoints: Vec<PathBuf>,
        /// Prediction files for the top-k merge path (repeatable).
        #[arg(long = "predictions", value_name = "PATH")]
        predictions: Vec<PathBuf>,
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
    },
    /// Finite-difference verification of all gradients.
    Gradcheck,
}

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

/// Parses argv and runs; returns the process exit code.
pub fn run_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version print and exit cleanly; real usage errors exit 2.
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        // Best effort: a pre-existing pool (e.g. in tests) keeps its size.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("train.seed={seed}"));
        overrides.push(format!("synth.seed={seed}"));
    }
    RunConfig::load(cli.config.as_deref(), &overrides)
}

fn require_out(cli: &Cli) -> Result<&Path, Error> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::config("this command needs --out DIR"))
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_snapshot(cfg: &RunConfig, dir: &Path) -> Result<(), Error> {
    cfg.save(&dir.join("config.txt"))
}

fn manifest_or_default(
    explicit: &Option<PathBuf>,
    fallback: &Option<PathBuf>,
    what: &str,
) -> Result<PathBuf, Error> {
    explicit
        .clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| Error::config(format!("{what}: pass --manifest or set data.val_manifest")))
}

fn expect_mode(cfg: &RunConfig, mode: Mode, cmd: &str) -> Result<(), Error> {
    if cfg.model.mode != mode {
        return Err(Error::config(format!(
            "{cmd} requires model.mode = {}, config says {}",
            mode.as_str(),
            cfg.model.mode.as_str()
        )));
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Synth => {
            let cfg = load_config(cli)?;
            let out = require_out(cli)?;
            ensure_dir(out)?;
            let result = synth_generate(&cfg.synth, cfg.model.mode, out)?;
            write_snapshot(&cfg, out)?;
            println!(
                "synth: wrote {} and {}",
                result.train_manifest.display(),
                result.val_manifest.display()
            );
            Ok(())
        }
        Command::TrainMq => run_train(cli, Mode::Mq),
        Command::TrainNlq => run_train(cli, Mode::Nlq),
        Command::Predict {
            checkpoint,
            manifest,
        } => {
            let cfg = load_config(cli)?;
            let out = require_out(cli)?;
            ensure_dir(out)?;
            let model = load_checkpoint(checkpoint)?;
            let manifest = manifest_or_default(manifest, &cfg.data.val_manifest, "predict")?;
            let dataset = load_dataset(&manifest)?;
            let decode = resolved_decode_for(&cfg, model.config().mode);
            let preds = match model.config().mode {
                Mode::Mq => predict_mq(std::slice::from_ref(&model), &dataset, &decode)?,
                Mode::Nlq => predict_nlq(std::slice::from_ref(&model), &dataset, &decode)?,
            };
            let path = out.join("predictions.txt");
            save_predictions(&preds, &path)?;
            write_snapshot(&cfg, out)?;
            println!("predict: {} predictions -> {}", preds.len(), path.display());
            Ok(())
        }
        Command::EvalMq {
            predictions,
            manifest,
        } => run_eval(cli, Mode::Mq, predictions, manifest),
        Command::EvalNlq {
            predictions,
            manifest,
        } => run_eval(cli, Mode::Nlq, predictions, manifest),
        Command::Ensemble {
            checkpoints,
            predictions,
            manifest,
        } => run_ensemble(cli, checkpoints, predictions, manifest),
        Command::Gradcheck => run_gradcheck(cli),
    }
}

/// Decode settings resolved against the mode actually being decoded (which
/// may come from a checkpoint rather than the config file).
fn resolved_decode_for(cfg: &RunConfig, mode: Mode) -> asl_core::postprocess::DecodeConfig {
    let mut decode = cfg.resolved_decode();
    if cfg.decode.max_keep == 0 {
        decode.max_keep = match mode {
            Mode::Mq => 2000,
            Mode::Nlq => 5,
        };
    }
    decode.per_class = mode == Mode::Mq;
    decode
}

fn run_train(cli: &Cli, mode: Mode) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    expect_mode(&cfg, mode, if mode == Mode::Mq { "train-mq" } else { "train-nlq" })?;
    let out = require_out(cli)?;
    ensure_dir(out)?;
    let manifest = cfg
        .data
        .train_manifest
        .clone()
        .ok_or_else(|| Error::config("training needs data.train_manifest"))?;
    let dataset = load_dataset(&manifest)?;

    let log_path = out.join("train_log.txt");
    let mut log = String::new();
    let every = cfg.train.checkpoint_every;
    let out_dir = out.to_path_buf();
    let outcome = train_model(&cfg, &dataset, |ep, model| {
        let line = ep.render_line();
        println!("{line}");
        log.push_str(&line);
        log.push('\n');
        if ep.zero_pos_batches > 0 {
            log.push_str(&format!(
                "warning: {} batch(es) without positive points\n",
                ep.zero_pos_batches
            ));
        }
        if every > 0 && (ep.epoch + 1) % every == 0 {
            let path = out_dir.join(format!("checkpoint_epoch{:03}.aslm", ep.epoch + 1));
            save_checkpoint(model, &path)?;
        }
        Ok(())
    })?;
    std::fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
    let ckpt = out.join("checkpoint.aslm");
    save_checkpoint(&outcome.model, &ckpt)?;
    write_snapshot(&cfg, out)?;
    println!("train: checkpoint -> {}", ckpt.display());
    Ok(())
}

fn run_eval(
    cli: &Cli,
    mode: Mode,
    predictions: &Path,
    manifest: &Option<PathBuf>,
) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let out = require_out(cli)?;
    ensure_dir(out)?;
    let manifest = manifest_or_default(manifest, &cfg.data.val_manifest, "eval")?;
    let dataset = load_dataset(&manifest)?;
    let preds = load_predictions(predictions)?;
    let report = match mode {
        Mode::Mq => evaluate_mq(&preds, &dataset, &cfg.eval)?,
        Mode::Nlq => evaluate_nlq(&preds, &dataset, &cfg.eval)?,
    };
    write_report(&cfg, &report, &preds, &dataset, out)?;
    print!("{}", report.render_text());
    Ok(())
}

fn write_report(
    cfg: &RunConfig,
    report: &EvalReport,
    preds: &[SegmentPrediction],
    dataset: &asl_core::data::Dataset,
    out: &Path,
) -> Result<(), Error> {
    let txt = out.join("report.txt");
    std::fs::write(&txt, report.render_text()).map_err(|e| Error::io(&txt, e))?;
    let kv = out.join("report.kv");
    std::fs::write(&kv, report.render_kv()).map_err(|e| Error::io(&kv, e))?;
    if cfg.eval.dump_pr && dataset.mode == Mode::Mq {
        let annotations: Vec<_> = dataset
            .videos
            .iter()
            .map(|v| v.annotation.clone())
            .collect();
        let mut dump = String::new();
        for &t in &cfg.eval.thresholds {
            for class in 0..dataset.classes {
                for (r, p) in asl_core::metrics::pr_points(preds, &annotations, class, t) {
                    dump.push_str(&format!("{t:.2} {class} {r:.9} {p:.9}\n"));
                }
            }
        }
        let pr = out.join("pr_curves.txt");
        std::fs::write(&pr, dump).map_err(|e| Error::io(&pr, e))?;
    }
    write_snapshot(cfg, out)?;
    Ok(())
}

fn run_ensemble(
    cli: &Cli,
    checkpoints: &[PathBuf],
    prediction_files: &[PathBuf],
    manifest: &Option<PathBuf>,
) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let out = require_out(cli)?;
    ensure_dir(out)?;
    match (checkpoints.is_empty(), prediction_files.is_empty()) {
        (false, true) => {
            // Mean-logit path over models.
            let models: Vec<Model> = checkpoints
                .iter()
                .map(|p| load_checkpoint(p))
                .collect::<Result<_, _>>()?;
            let mode = models[0].config().mode;
            let manifest = manifest_or_default(manifest, &cfg.data.val_manifest, "ensemble")?;
            let dataset = load_dataset(&manifest)?;
            let decode = resolved_decode_for(&cfg, mode);
            let preds = match mode {
                Mode::Mq => predict_mq(&models, &dataset, &decode)?,
                Mode::Nlq => predict_nlq(&models, &dataset, &decode)?,
            };
            let path = out.join("predictions.txt");
            save_predictions(&preds, &path)?;
            write_snapshot(&cfg, out)?;
            println!(
                "ensemble: {} models -> {} predictions",
                models.len(),
                preds.len()
            );
            Ok(())
        }
        (true, false) => {
            // Confidence-sorted merge of per-query top-k lists.
            let lists: Vec<Vec<SegmentPrediction>> = prediction_files
                .iter()
                .map(|p| load_predictions(p))
                .collect::<Result<_, _>>()?;
            let k_out = resolved_decode_for(&cfg, Mode::Nlq).max_keep;
            // Merge per query id.
            let mut ids: Vec<String> = lists
                .iter()
                .flatten()
                .map(|p| p.video_id.clone())
                .collect();
            ids.sort();
            ids.dedup();
            let mut merged = Vec::new();
            for id in &ids {
                let per_model: Vec<Vec<SegmentPrediction>> = lists
                    .iter()
                    .map(|l| {
                        l.iter()
                            .filter(|p| &p.video_id == id)
                            .cloned()
                            .collect::<Vec<_>>()
                    })
                    .collect();
                merged.extend(ensemble_topk_merge(&per_model, k_out));
            }
            sort_predictions(&mut merged);
            let path = out.join("predictions.txt");
            save_predictions(&merged, &path)?;
            write_snapshot(&cfg, out)?;
            println!(
                "ensemble: merged {} files -> {} predictions",
                prediction_files.len(),
                merged.len()
            );
            Ok(())
        }
        _ => Err(Error::config(
            "ensemble needs either --checkpoint ... (mean logits) or --predictions ... (top-k merge), not both",
        )),
    }
}

fn run_gradcheck(cli: &Cli) -> Result<(), Error> {
    let _ = load_config(cli)?; // surfaces config errors even here
    let mut lines = Vec::new();
    let mut worst: f64 = 0.0;

    let reports = asl_core::autodiff::fdcheck::check_primitives(1234, 20)?;
    for r in &reports {
        lines.push(format!("primitive {:<22} max_rel_err {:.3e}", r.name, r.max_err));
        worst = worst.max(r.max_err);
    }
    let primitives_ok = reports.iter().all(|r| r.max_err < 1e-6);

    let mq = end_to_end_gradcheck(Mode::Mq, 7, 50)?;
    lines.push(format!("end-to-end mq          max_rel_err {mq:.3e}"));
    let nlq = end_to_end_gradcheck(Mode::Nlq, 8, 50)?;
    lines.push(format!("end-to-end nlq         max_rel_err {nlq:.3e}"));
    let e2e_ok = mq < 1e-5 && nlq < 1e-5;
    worst = worst.max(mq).max(nlq);
    lines.push(format!("worst observed         {worst:.3e}"));

    let text = lines.join("\n") + "\n";
    print!("{text}");
    if let Some(out) = cli.out.as_deref() {
        ensure_dir(out)?;
        let path = out.join("gradcheck.txt");
        std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    }
    if primitives_ok && e2e_ok {
        Ok(())
    } else {
        Err(Error::numerical(format!(
            "gradient check failed: worst relative error {worst:.3e}"
        )))
    }
}
