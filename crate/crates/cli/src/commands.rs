//! The five subcommand implementations.

use std::fs;
use std::path::Path;

use cov3d_core::checkpoint::{
    load_checkpoint, model_from_checkpoint, save_checkpoint, transfer_init, Checkpoint,
    TransferPolicy,
};
use cov3d_core::dataset::{load_manifest, load_samples, write_manifest, ManifestRecord};
use cov3d_core::metrics::MetricsReport;
use cov3d_core::model::build_model;
use cov3d_core::synth::{generate_corpus, SynthError, SynthOptions};
use cov3d_core::train::{evaluate, predict_probs, write_history_csv, TrainError};
use cov3d_core::volume::{preprocess_scan, write_raw_cache, PreprocessOptions, PruneParams, Volume};

use crate::config::RunConfig;
use crate::{CliError, EvalArgs, PredictArgs, PreprocessArgs, SynthArgs, TrainArgs};

fn data<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn from_train_error(e: TrainError) -> CliError {
    match e {
        TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
        other => CliError::Data(other.to_string()),
    }
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let opts = SynthOptions {
        depth: args.depth,
        height: args.height,
        width: args.width,
    };
    let summary = generate_corpus(&args.out, args.n_train, args.n_val, args.seed, &opts)
        .map_err(|e| match e {
            SynthError::InvalidOptions(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        })?;
    println!(
        "wrote {} scans ({} train, {} val) under {}",
        summary.scan_dirs,
        args.n_train,
        args.n_val,
        args.out.display()
    );
    println!("train manifest: {}", summary.train_manifest.display());
    println!("val manifest: {}", summary.val_manifest.display());
    Ok(())
}

/// Writes the cache through a sibling temp directory and renames it into
/// place, so an interrupted run never leaves a partial cache at the final
/// path and reruns replace stale caches atomically.
fn write_cache_atomic(final_dir: &Path, v: &Volume) -> Result<(), CliError> {
    let parent = final_dir.parent().unwrap_or_else(|| Path::new("."));
    let name = final_dir
        .file_name()
        .ok_or_else(|| CliError::Data(format!("bad cache path {}", final_dir.display())))?;
    let tmp = parent.join(format!(".{}.tmp", name.to_string_lossy()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(data)?;
    }
    if let Err(e) = write_raw_cache(&tmp, v) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(data(e));
    }
    if final_dir.exists() {
        fs::remove_dir_all(final_dir).map_err(data)?;
    }
    fs::rename(&tmp, final_dir).map_err(data)?;
    Ok(())
}

pub fn preprocess(args: &PreprocessArgs) -> Result<(), CliError> {
    let records = load_manifest(&args.manifest).map_err(data)?;
    fs::create_dir_all(&args.out).map_err(data)?;
    let opts = PreprocessOptions {
        prune: !args.no_prune,
        prune_params: PruneParams::default(),
        target: (args.depth, args.height, args.width),
    };

    let mut cached = Vec::new();
    let mut prune_lines = String::new();
    let mut failures = 0usize;
    for rec in &records {
        let (volume, report) = match preprocess_scan(&rec.path, &opts) {
            Ok(out) => out,
            Err(e) => {
                eprintln!("scan {}: {e}", rec.id);
                failures += 1;
                continue;
            }
        };
        write_cache_atomic(&args.out.join(&rec.id), &volume)?;
        cached.push(ManifestRecord {
            id: rec.id.clone(),
            path: rec.id.clone(),
            label: rec.label,
        });
        if let Some(r) = report {
            let kept = r.per_slice_lung_score.len() - r.head_removed - r.tail_removed;
            let line = serde_json::json!({
                "id": rec.id,
                "head_removed": r.head_removed,
                "tail_removed": r.tail_removed,
                "kept_depth": kept,
            });
            prune_lines.push_str(&line.to_string());
            prune_lines.push('\n');
        }
    }

    write_manifest(&args.out.join("manifest.jsonl"), &cached).map_err(data)?;
    if !args.no_prune {
        fs::write(args.out.join("prune_report.jsonl"), prune_lines).map_err(data)?;
    }
    println!(
        "cached {} of {} scans under {}",
        cached.len(),
        records.len(),
        args.out.display()
    );
    if failures > 0 {
        return Err(CliError::Data(format!("{failures} scan(s) failed preprocessing")));
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config)?;
    let train_set = load_samples(&load_manifest(&args.manifest).map_err(data)?).map_err(data)?;
    let val_set = load_samples(&load_manifest(&args.val_manifest).map_err(data)?).map_err(data)?;

    let mut model = build_model(cfg.model_config()?, cfg.seed).map_err(data)?;
    if let Some(init) = &args.init {
        let ckpt = load_checkpoint(init).map_err(data)?;
        let policy = TransferPolicy {
            reinit_seed: cfg.seed,
            ..TransferPolicy::default()
        };
        let report = transfer_init(&mut model, &ckpt, &policy).map_err(data)?;
        println!("transferred {} entries from {}", report.loaded.len(), init.display());
        for (name, reason) in &report.skipped {
            println!("  skipped {name}: {reason}");
        }
    }

    let outcome = cov3d_core::train::train(&mut model, &train_set, &val_set, &cfg.train_config())
        .map_err(from_train_error)?;

    let mut best = outcome.best;
    if let serde_json::Value::Object(map) = &mut best.config {
        map.insert(
            "run".to_string(),
            serde_json::to_value(&cfg).expect("run config serializes"),
        );
    }
    save_checkpoint(&best, &args.out).map_err(data)?;
    let history_path = args.out.with_extension("history.csv");
    write_history_csv(&history_path, &outcome.history).map_err(from_train_error)?;
    let config_path = args.out.with_extension("config.json");
    let mut echo = serde_json::to_string_pretty(&cfg).expect("run config serializes");
    echo.push('\n');
    fs::write(&config_path, echo).map_err(data)?;

    println!(
        "best epoch {} of {}: val macro F1 {:.4}",
        outcome.best_epoch,
        cfg.epochs,
        outcome.best_val_f1
    );
    println!("checkpoint: {}", args.out.display());
    println!("history: {}", history_path.display());
    Ok(())
}

/// Recovers the run configuration echoed into a trained checkpoint, falling
/// back to defaults for checkpoints saved without one.
fn run_echo(ckpt: &Checkpoint) -> RunConfig {
    ckpt.config
        .get("run")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default()
}

fn print_report(report: &MetricsReport) {
    print!("confusion");
    for c in 0..report.per_class.len() {
        print!("{:>8}", format!("pred {c}"));
    }
    println!();
    for (t, row) in report.confusion.iter().enumerate() {
        print!("{:>9}", format!("true {t}"));
        for &count in row {
            print!("{count:>8}");
        }
        println!();
    }
    for (c, m) in report.per_class.iter().enumerate() {
        println!(
            "class {c}: precision {:.4} recall {:.4} f1 {:.4} support {}",
            m.precision, m.recall, m.f1, m.support
        );
    }
    println!("accuracy: {:.4}", report.accuracy);
    println!("macro F1: {:.4}", report.macro_f1);
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.ckpt).map_err(data)?;
    let model = model_from_checkpoint(&ckpt).map_err(data)?;
    let samples = load_samples(&load_manifest(&args.manifest).map_err(data)?).map_err(data)?;
    let outcome = evaluate(&model, &samples, run_echo(&ckpt).eval_depth).map_err(from_train_error)?;
    print_report(&outcome.report);
    Ok(())
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.ckpt).map_err(data)?;
    let model = model_from_checkpoint(&ckpt).map_err(data)?;
    let run = run_echo(&ckpt);
    let opts = PreprocessOptions {
        prune: run.prune,
        prune_params: PruneParams::default(),
        target: run.resize_target(),
    };
    let (volume, report) = preprocess_scan(&args.scan, &opts).map_err(data)?;
    let probs = predict_probs(&model, volume, run.eval_depth).map_err(from_train_error)?;

    println!("{}", if probs[1] > probs[0] { "COVID" } else { "non-COVID" });
    println!("p(non-COVID) = {:.4}", probs[0]);
    println!("p(COVID) = {:.4}", probs[1]);
    if let Some(r) = report {
        println!("pruned slices: head {} tail {}", r.head_removed, r.tail_removed);
    }
    Ok(())
}
