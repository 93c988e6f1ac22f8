//! The four subcommands. Everything here writes only under the configured
//! output directory, guarded by its lock file.

use std::io::Write;
use std::path::{Path, PathBuf};

use hgconv_core::bench::{
    doubling_ratios, fit_exponent, fwd_bwd_points, run_naive_control, run_scaling, scaling_csv,
    BenchOptions, ScalingReport,
};
use hgconv_core::checkpoint::{load_checkpoint, save_checkpoint};
use hgconv_core::data::{make_batches, synth_longrange, Dataset, Manifest, SynthTask};
use hgconv_core::model::{splitmix64, ModelConfig, ModelParams, ModelState};
use hgconv_core::train::{
    evaluate, metrics_csv_row, train_epoch, AdamState, EvalReport, ScheduleConfig, TrainOptions,
    Trainer, METRICS_CSV_HEADER,
};
use hgconv_core::HgError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::lock::DirLock;
use crate::selftest;
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SCALING_FILE: &str = "scaling.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn cfg_err(e: HgError) -> CliError {
    CliError::Config(e.to_string())
}

fn run_err(e: HgError) -> CliError {
    CliError::Runtime(e.to_string())
}

fn parse_synth_task(name: &str) -> Result<SynthTask, CliError> {
    match name {
        "marker-pair" => Ok(SynthTask::MarkerPair),
        "majority-byte" => Ok(SynthTask::MajorityByte),
        other => Err(CliError::Config(format!(
            "data.synth: unknown task \"{other}\""
        ))),
    }
}

/// Train and eval datasets from the data section. Synthetic splits are
/// seeded from the run seed so the whole run is one function of (config,
/// seed).
fn build_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    if let Some(path) = &cfg.data.manifest {
        let m = Manifest::load(path).map_err(cfg_err)?;
        let train = Dataset::from_manifest(&m);
        let eval = match &cfg.data.eval_manifest {
            Some(p) => Dataset::from_manifest(&Manifest::load(p).map_err(cfg_err)?),
            None => Dataset::from_manifest(&m),
        };
        if train.num_classes() != cfg.model.num_classes
            || eval.num_classes() != cfg.model.num_classes
        {
            return Err(CliError::Config(format!(
                "model.num_classes is {} but the manifest defines {} classes",
                cfg.model.num_classes,
                train.num_classes().max(eval.num_classes())
            )));
        }
        return Ok((train, eval));
    }
    if let Some(task) = &cfg.data.synth {
        let task = parse_synth_task(task)?;
        let t = cfg.seq_len();
        let train_seed = splitmix64(cfg.train.seed ^ 0x5EED_DA7A);
        let eval_seed = splitmix64(cfg.train.seed ^ 0x5EED_E7A1);
        let train = synth_longrange(task, t, cfg.data.synth_train, train_seed).map_err(cfg_err)?;
        let eval = synth_longrange(task, t, cfg.data.synth_eval, eval_seed).map_err(cfg_err)?;
        if cfg.model.num_classes != 2 {
            return Err(CliError::Config(
                "synthetic tasks are two-class; set model.num_classes = 2".into(),
            ));
        }
        return Ok((train.dataset, eval.dataset));
    }
    Err(CliError::Config(
        "no data source: set data.manifest or data.synth".into(),
    ))
}

fn schedule_for(cfg: &RunConfig, batches_per_epoch: usize) -> Result<ScheduleConfig, CliError> {
    let total = if cfg.schedule.total_steps > 0 {
        cfg.schedule.total_steps
    } else {
        cfg.train.epochs as u64 * batches_per_epoch as u64
    };
    let sched = ScheduleConfig {
        peak_lr: cfg.schedule.peak_lr,
        warmup_steps: cfg.schedule.warmup_steps.min(total.saturating_sub(1)),
        total_steps: total,
        floor_lr: cfg.schedule.floor_lr,
    };
    sched.validate().map_err(cfg_err)?;
    Ok(sched)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub final_eval: EvalReport,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

pub fn cmd_train(cfg: &RunConfig, json: bool) -> Result<TrainOutcome, CliError> {
    let (train_ds, eval_ds) = build_datasets(cfg)?;
    let seq_len = cfg.seq_len();
    let opts = TrainOptions {
        batch_size: cfg.train.batch_size,
        workers: cfg.train.workers,
        weight_decay: cfg.train.weight_decay,
        clip_norm: (cfg.train.clip_norm > 0.0).then_some(cfg.train.clip_norm),
        seq_len,
    };
    opts.validate().map_err(cfg_err)?;
    let batches_per_epoch = make_batches(&train_ds, seq_len, opts.batch_size, 0)
        .map_err(cfg_err)?
        .num_batches();
    let sched = schedule_for(cfg, batches_per_epoch)?;

    let lock = DirLock::acquire(&cfg.output.dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut params: ModelParams<f32> = ModelParams::init(&cfg.model, &mut rng).map_err(cfg_err)?;
    let mut state = ModelState::new(&cfg.model);
    let mut adam = AdamState::new_like(&params);

    let metrics_path = cfg.output.dir.join(METRICS_FILE);
    let mut metrics = std::fs::File::create(&metrics_path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", metrics_path.display())))?;
    writeln!(metrics, "{METRICS_CSV_HEADER}")
        .map_err(|e| CliError::Runtime(format!("metrics write failed: {e}")))?;

    let mut trainer = Trainer {
        params: &mut params,
        model_state: &mut state,
        adam: &mut adam,
        config: &cfg.model,
        sched: &sched,
        opts: &opts,
        seed: cfg.train.seed,
        global_step: 0,
    };

    let mut last_eval = None;
    let mut epochs_run = 0;
    for epoch in 0..cfg.train.epochs {
        let m = train_epoch(&mut trainer, &train_ds, epoch).map_err(run_err)?;
        let ev = evaluate(
            trainer.params,
            trainer.model_state,
            &cfg.model,
            &eval_ds,
            seq_len,
            opts.batch_size,
        )
        .map_err(run_err)?;
        writeln!(metrics, "{}", metrics_csv_row(&m, ev.mean_loss, ev.accuracy))
            .map_err(|e| CliError::Runtime(format!("metrics write failed: {e}")))?;
        metrics
            .flush()
            .map_err(|e| CliError::Runtime(format!("metrics flush failed: {e}")))?;
        let ckpt = cfg.output.dir.join(format!("epoch_{epoch:03}.ckpt"));
        save_checkpoint(
            trainer.params,
            &cfg.model,
            trainer.model_state,
            Some(trainer.adam),
            &ckpt,
        )
        .map_err(run_err)?;
        if !json {
            println!(
                "epoch {epoch}: train loss {:.4} acc {:.4} | eval loss {:.4} acc {:.4} | lr {:.2e} ({:.1}s)",
                m.train_loss, m.train_acc, ev.mean_loss, ev.accuracy, m.lr, m.seconds
            );
        }
        epochs_run = epoch + 1;
        let reached = cfg.train.target_accuracy > 0.0 && ev.accuracy >= cfg.train.target_accuracy;
        last_eval = Some(ev);
        if reached {
            if !json {
                println!("target accuracy reached; stopping early");
            }
            break;
        }
    }
    let final_eval = last_eval.expect("epochs >= 1 validated");
    let checkpoint_path = cfg.output.dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&params, &cfg.model, &state, Some(&adam), &checkpoint_path)
        .map_err(run_err)?;
    drop(lock);

    if json {
        println!(
            "{}",
            serde_json::json!({
                "epochs_run": epochs_run,
                "eval_accuracy": final_eval.accuracy,
                "eval_loss": final_eval.mean_loss,
                "metrics": metrics_path.display().to_string(),
                "checkpoint": checkpoint_path.display().to_string(),
            })
        );
    } else {
        println!(
            "done: {epochs_run} epoch(s), final eval acc {:.4}; metrics at {}, checkpoint at {}",
            final_eval.accuracy,
            metrics_path.display(),
            checkpoint_path.display()
        );
    }
    Ok(TrainOutcome {
        epochs_run,
        final_eval,
        metrics_path,
        checkpoint_path,
    })
}

/// Eval dataset when a manifest is given on the command line; otherwise the
/// eval split the config describes.
fn eval_dataset(
    cfg: &RunConfig,
    manifest_flag: Option<&Path>,
    model: &ModelConfig,
    seq_len: usize,
) -> Result<Dataset, CliError> {
    if let Some(path) = manifest_flag {
        let ds = Dataset::from_manifest(&Manifest::load(path).map_err(cfg_err)?);
        if ds.num_classes() != model.num_classes {
            return Err(CliError::Config(format!(
                "checkpoint was trained with {} classes but the manifest defines {}",
                model.num_classes,
                ds.num_classes()
            )));
        }
        return Ok(ds);
    }
    if cfg.data.manifest.is_some() {
        let (_, eval) = build_datasets_for_model(cfg, model)?;
        return Ok(eval);
    }
    if let Some(task) = &cfg.data.synth {
        let task = parse_synth_task(task)?;
        let eval_seed = splitmix64(cfg.train.seed ^ 0x5EED_E7A1);
        let eval = synth_longrange(task, seq_len, cfg.data.synth_eval, eval_seed)
            .map_err(cfg_err)?;
        if model.num_classes != 2 {
            return Err(CliError::Config(
                "checkpoint class count does not match the two-class synthetic task".into(),
            ));
        }
        return Ok(eval.dataset);
    }
    Err(CliError::Config(
        "no eval data: pass --manifest or set data.manifest / data.synth".into(),
    ))
}

/// Like [`build_datasets`] but validating against a checkpoint's model
/// config instead of the run config's model section.
fn build_datasets_for_model(
    cfg: &RunConfig,
    model: &ModelConfig,
) -> Result<(Dataset, Dataset), CliError> {
    let path = cfg.data.manifest.as_ref().expect("caller checked");
    let m = Manifest::load(path).map_err(cfg_err)?;
    let train = Dataset::from_manifest(&m);
    let eval = match &cfg.data.eval_manifest {
        Some(p) => Dataset::from_manifest(&Manifest::load(p).map_err(cfg_err)?),
        None => Dataset::from_manifest(&m),
    };
    if eval.num_classes() != model.num_classes {
        return Err(CliError::Config(format!(
            "checkpoint was trained with {} classes but the manifest defines {}",
            model.num_classes,
            eval.num_classes()
        )));
    }
    Ok((train, eval))
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    manifest: Option<&Path>,
    json: bool,
) -> Result<EvalReport, CliError> {
    let default_path = cfg.output.dir.join(FINAL_CHECKPOINT);
    let path = checkpoint.unwrap_or(&default_path);
    let ckpt = load_checkpoint::<f32>(path).map_err(cfg_err)?;
    let seq_len = cfg.seq_len().min(ckpt.config.max_seq_len);
    let ds = eval_dataset(cfg, manifest, &ckpt.config, seq_len)?;
    let mut state = ckpt.state;
    let report = evaluate(
        &ckpt.params,
        &mut state,
        &ckpt.config,
        &ds,
        seq_len,
        cfg.train.batch_size,
    )
    .map_err(run_err)?;
    if json {
        println!(
            "{}",
            serde_json::json!({
                "accuracy": report.accuracy,
                "mean_loss": report.mean_loss,
                "samples": report.samples,
                "confusion": report.confusion,
            })
        );
    } else {
        println!(
            "eval: accuracy {:.4}, mean loss {:.4} over {} samples",
            report.accuracy, report.mean_loss, report.samples
        );
        println!("confusion (rows = true class):");
        for row in &report.confusion {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:6}")).collect();
            println!("  {}", cells.join(" "));
        }
    }
    Ok(report)
}

pub fn cmd_bench(cfg: &RunConfig, json: bool) -> Result<ScalingReport, CliError> {
    let opts = BenchOptions {
        t_list: cfg.bench.t_list.clone(),
        reps: cfg.bench.reps,
        batch_divisor: cfg.bench.batch_divisor,
        fixed_batch: (cfg.bench.fixed_batch > 0).then_some(cfg.bench.fixed_batch),
        mem_budget_bytes: (cfg.bench.mem_budget_gb * (1u64 << 30) as f64) as usize,
        seed: cfg.train.seed,
    };
    let lock = DirLock::acquire(&cfg.output.dir)?;
    let report = run_scaling::<f32>(&cfg.model, &opts).map_err(cfg_err)?;
    let csv = scaling_csv(&report);
    let csv_path = cfg.output.dir.join(SCALING_FILE);
    std::fs::write(&csv_path, &csv)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", csv_path.display())))?;
    drop(lock);

    let points = fwd_bwd_points(&report);
    let exponent = (points.len() >= 4).then(|| fit_exponent(&points)).transpose()
        .map_err(run_err)?;
    let control = if cfg.bench.control {
        let grid: Vec<usize> = cfg
            .bench
            .t_list
            .iter()
            .copied()
            .filter(|&t| t <= 1 << 12)
            .collect();
        if grid.len() >= 4 {
            let pts = run_naive_control::<f32>(&grid, 4, cfg.bench.reps, cfg.train.seed)
                .map_err(run_err)?;
            Some(fit_exponent(&pts).map_err(run_err)?)
        } else {
            None
        }
    } else {
        None
    };

    if json {
        let rows: Vec<serde_json::Value> = report
            .rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "seq_len": r.seq_len,
                    "batch": r.batch,
                    "forward_ms": r.forward_ms,
                    "fwd_bwd_ms": r.fwd_bwd_ms,
                    "peak_bytes": r.peak_bytes,
                    "tokens_per_s": r.tokens_per_s,
                    "oom": r.oom,
                })
            })
            .collect();
        println!(
            "{}",
            serde_json::json!({
                "rows": rows,
                "exponent": exponent,
                "control_exponent": control,
                "csv": csv_path.display().to_string(),
            })
        );
    } else {
        print!("{csv}");
        if let Some(e) = exponent {
            println!("# fitted exponent (fwd+bwd): {e:.3}");
        }
        if let Some(c) = control {
            println!("# naive control exponent: {c:.3}");
        }
        for (tr, mr) in doubling_ratios(&report) {
            println!("# doubling: time ×{tr:.2}, peak mem ×{mr:.2}");
        }
        println!("# wrote {}", csv_path.display());
    }
    Ok(report)
}

pub fn cmd_selftest() -> Result<(), CliError> {
    let reports = selftest::run_all().map_err(run_err)?;
    for r in &reports {
        println!("{}", r.line());
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("selftest: {}/{} properties passed", reports.len(), reports.len());
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "selftest failed: {}",
            failed.join(", ")
        )))
    }
}
