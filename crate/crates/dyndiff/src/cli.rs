//! Command-line pipeline: train, forecast, evaluate, hist, synth.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (handled by the
//! argument parser).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, SynthKind, WindowSet, SYNTH_KINDS};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalReport};
use crate::forecasting::{self, Model};

#[derive(Parser, Debug)]
#[command(
    name = "dyndiff",
    version,
    about = "Probabilistic time-series forecasting with a context-conditioned diffusion model"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint plus a training log.
    Train(TrainArgs),
    /// Sample a forecast ensemble from a checkpoint and write it as CSV.
    Forecast(ForecastArgs),
    /// Score a checkpoint on the test split and write a report.
    Evaluate(EvaluateArgs),
    /// Bin ensemble samples against the truth for distribution plots.
    Hist(HistArgs),
    /// Generate a synthetic series and write it as CSV.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Input CSV (header row; optional leading `timestamp` column).
    #[arg(long)]
    data: PathBuf,
    /// Config file (flat dotted keys, TOML syntax).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override train.steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override train.batch.
    #[arg(long)]
    batch: Option<usize>,
    /// Override train.lr.
    #[arg(long)]
    lr: Option<f64>,
    /// Train the unconditional diffusion baseline.
    #[arg(long)]
    unconditional: bool,
}

#[derive(Args, Debug)]
struct ForecastArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV providing the context window (the most recent steps are used).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Ensemble size K.
    #[arg(long, default_value_t = 100)]
    samples: usize,
    /// Total forecast horizon P; beyond the model window it rolls
    /// iteratively.
    #[arg(long, default_value_t = 10)]
    horizon: usize,
    /// Master seed for the per-path noise streams (defaults to the training
    /// seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the ensemble-mean point forecast.
    #[arg(long)]
    point: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "trials")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated horizons to report.
    #[arg(long, default_value = "1,4,7,10")]
    horizons: String,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Second checkpoint for a side-by-side comparison table.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Re-run training with N distinct seeds and report mean +- std
    /// (requires --config).
    #[arg(long)]
    trials: Option<usize>,
    /// Config file, required with --trials.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Self-test: score the truth against itself; all metrics must be zero.
    #[arg(long)]
    oracle_identity: bool,
}

#[derive(Args, Debug)]
struct HistArgs {
    /// Ensemble CSV produced by `forecast`.
    #[arg(long)]
    ensemble: PathBuf,
    /// CSV with the true values beginning at the forecast origin.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// 1-based step to histogram; omit to aggregate over all positions.
    #[arg(long)]
    position: Option<usize>,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Variable to histogram (defaults to the first in the ensemble).
    #[arg(long)]
    variable: Option<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_parser = SYNTH_KINDS)]
    kind: String,
    #[arg(long)]
    length: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Parses the process arguments (usage errors exit 2 via clap) and runs the
/// selected command.
pub fn main_entry() -> Result<()> {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("DYNDIFF_THREADS") {
        let n: usize = threads
            .parse()
            .map_err(|_| Error::Config(format!("DYNDIFF_THREADS={threads:?} is not a number")))?;
        // Ignore the error if a pool already exists (e.g. under tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Forecast(args) => cmd_forecast(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Hist(args) => cmd_hist(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

struct PreparedData {
    train_ws: WindowSet,
    val_ws: WindowSet,
    test_ws: WindowSet,
}

fn prepare_data(
    path: &Path,
    targets: &[String],
    split: [f64; 3],
    context: usize,
    horizon: usize,
    stride: usize,
    stats_from: Option<&[crate::checkpoint::StatEntry]>,
) -> Result<PreparedData> {
    let frame = data::load_csv(path, targets)?;
    let min_len = context + horizon;
    let (train_f, val_f, test_f) = frame.split(split, min_len)?;
    let stats = match stats_from {
        Some(entries) => {
            if entries.len() != frame.n_vars()
                || entries
                    .iter()
                    .zip(&frame.names)
                    .any(|(e, n)| &e.name != n)
            {
                return Err(Error::Data(format!(
                    "data columns {:?} do not match the checkpoint's variables {:?}",
                    frame.names,
                    entries.iter().map(|e| e.name.clone()).collect::<Vec<_>>()
                )));
            }
            entries.iter().map(|e| e.stats()).collect::<Vec<_>>()
        }
        None => train_f.fit_stats(),
    };
    let train_s = train_f.standardized(&stats)?;
    let val_s = val_f.standardized(&stats)?;
    let test_s = test_f.standardized(&stats)?;
    Ok(PreparedData {
        train_ws: data::make_windows(&train_s, context, horizon, stride)?,
        val_ws: data::make_windows(&val_s, context, horizon, stride)?,
        test_ws: data::make_windows(&test_s, context, horizon, stride)?,
    })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::default();
    cfg.apply_file(&std::fs::read_to_string(&args.config)?)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    if let Some(batch) = args.batch {
        cfg.train.batch = batch;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if args.unconditional {
        cfg.train.unconditional = true;
    }
    cfg.validate()?;

    let prepared = prepare_data(
        &args.data,
        &cfg.data.targets,
        cfg.data.split,
        cfg.train.context,
        cfg.train.horizon,
        cfg.data.stride,
        None,
    )?;
    let m = prepared.train_ws.frame.n_vars();
    let n = prepared.train_ws.frame.targets.len();
    let model_cfg = cfg.model_config(m, n);
    println!(
        "encoder receptive field: {} steps (context {})",
        model_cfg.encoder.receptive_field(),
        cfg.train.context
    );
    println!(
        "windows: {} train, {} val, {} test",
        prepared.train_ws.len(),
        prepared.val_ws.len(),
        prepared.test_ws.len()
    );

    let outcome = forecasting::train(
        &prepared.train_ws,
        Some(&prepared.val_ws),
        &model_cfg,
        &cfg.train,
        &cfg.data,
    )?;
    if !outcome.dead_params.is_empty() {
        eprintln!(
            "warning: parameters with zero gradient on the first batch: {:?}",
            outcome.dead_params
        );
    }

    std::fs::create_dir_all(&args.out)?;
    let ckpt_path = args.out.join("checkpoint.dyndiff");
    outcome.checkpoint.save(&ckpt_path)?;
    let mut log = String::from("step,loss\n");
    for row in &outcome.log {
        log.push_str(&format!("{},{}\n", row.step, row.loss));
    }
    std::fs::write(args.out.join("training_log.csv"), log)?;

    let last = outcome.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} steps (final loss {:.6}{}); checkpoint written to {}",
        outcome.log.len(),
        last,
        if outcome.stopped_early {
            ", stopped early on validation"
        } else {
            ""
        },
        ckpt_path.display()
    );
    Ok(())
}

fn checkpoint_hash(ckpt: &Checkpoint) -> String {
    let blob = serde_json::to_vec(&(
        &ckpt.schedule,
        &ckpt.encoder,
        &ckpt.denoiser,
        &ckpt.train,
        &ckpt.data,
    ))
    .expect("configs serialize");
    let digest = Sha256::digest(&blob);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_forecast(args: ForecastArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = Model::from_checkpoint(&ckpt)?;
    let frame = data::load_csv(&args.data, &ckpt.data.targets)?;
    if frame.names.len() != ckpt.stats.len()
        || frame
            .names
            .iter()
            .zip(&ckpt.stats)
            .any(|(n, s)| n != &s.name)
    {
        return Err(Error::Data(
            "data columns do not match the checkpoint's variables".into(),
        ));
    }
    let stats: Vec<data::Stats> = ckpt.stats.iter().map(|s| s.stats()).collect();
    let standardized = frame.standardized(&stats)?;
    let context = ckpt.train.context;
    if standardized.len() < context {
        return Err(Error::Data(format!(
            "need at least {context} steps of context, file has {}",
            standardized.len()
        )));
    }
    let m = standardized.n_vars();
    let start = standardized.len() - context;
    let mut ctx = Vec::with_capacity(m * context);
    for v in 0..m {
        ctx.extend(standardized.var(v)[start..].iter().map(|&f| f as f32));
    }
    let x_ctx = crate::tensor::Tensor::from_vec(ctx, vec![m, context])?;

    let seed = args.seed.unwrap_or(ckpt.train.seed);
    let target_stats = ckpt.target_stats()?;
    let ens = forecasting::iterative_forecast(
        &x_ctx,
        &model,
        args.horizon,
        args.samples,
        seed,
        standardized.len() - 1,
        standardized.target_names(),
        &target_stats,
        &standardized.targets,
    )?;

    std::fs::create_dir_all(&args.out)?;
    let ens_path = args.out.join("ensemble.csv");
    let mut writer = csv::Writer::from_path(&ens_path)?;
    writer.write_record(["path_id", "variable", "step", "value"])?;
    let (n, p) = (ens.n_vars(), ens.horizon());
    for path in 0..ens.k() {
        for v in 0..n {
            for step in 0..p {
                writer.write_record([
                    path.to_string(),
                    ens.variable_names[v].clone(),
                    (step + 1).to_string(),
                    format!("{}", ens.samples.data()[(path * n + v) * p + step]),
                ])?;
            }
        }
    }
    writer.flush()?;
    println!(
        "wrote {} paths x {} variables x {} steps to {}",
        ens.k(),
        n,
        p,
        ens_path.display()
    );

    if args.point {
        let point = evaluation::point_forecast(&ens);
        let point_path = args.out.join("point.csv");
        let mut writer = csv::Writer::from_path(&point_path)?;
        writer.write_record(["variable", "step", "value"])?;
        for v in 0..n {
            for step in 0..p {
                writer.write_record([
                    ens.variable_names[v].clone(),
                    (step + 1).to_string(),
                    format!("{}", point.data()[v * p + step]),
                ])?;
            }
        }
        writer.flush()?;
        println!("wrote point forecast to {}", point_path.display());
    }
    Ok(())
}

fn parse_horizons(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad horizon {part:?}")))
        })
        .collect()
}

fn evaluate_checkpoint(
    ckpt_path: &Path,
    data_path: &Path,
    horizons: &[usize],
    samples: usize,
    seed: Option<u64>,
) -> Result<(String, EvalReport)> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = Model::from_checkpoint(&ckpt)?;
    let prepared = prepare_data(
        data_path,
        &ckpt.data.targets,
        ckpt.data.split,
        ckpt.train.context,
        ckpt.train.horizon,
        ckpt.data.stride,
        Some(&ckpt.stats),
    )?;
    let seed = seed.unwrap_or(ckpt.train.seed);
    let report = evaluation::evaluate(
        &model,
        &prepared.test_ws,
        horizons,
        samples,
        seed,
        &checkpoint_hash(&ckpt),
    )?;
    let label = ckpt_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".to_string());
    let label = if ckpt.train.unconditional {
        format!("{label}(unconditional)")
    } else {
        label
    };
    Ok((label, report))
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let horizons = parse_horizons(&args.horizons)?;
    std::fs::create_dir_all(&args.out)?;
    let report_path = args.out.join("report.txt");

    if let Some(trials) = args.trials {
        if args.baseline.is_some() || args.oracle_identity {
            return Err(Error::Config(
                "--trials cannot be combined with --baseline or --oracle-identity".into(),
            ));
        }
        if trials == 0 {
            return Err(Error::Config("--trials must be >= 1".into()));
        }
        let config_path = args
            .config
            .as_ref()
            .ok_or_else(|| Error::Config("--trials requires --config".into()))?;
        let mut base_cfg = RunConfig::default();
        base_cfg.apply_file(&std::fs::read_to_string(config_path)?)?;
        base_cfg.validate()?;
        let base_seed = args.seed.unwrap_or(base_cfg.train.seed);
        let mut reports = Vec::with_capacity(trials);
        for trial in 0..trials {
            let mut cfg = base_cfg.clone();
            cfg.train.seed = base_seed + trial as u64;
            let prepared = prepare_data(
                &args.data,
                &cfg.data.targets,
                cfg.data.split,
                cfg.train.context,
                cfg.train.horizon,
                cfg.data.stride,
                None,
            )?;
            let m = prepared.train_ws.frame.n_vars();
            let n = prepared.train_ws.frame.targets.len();
            let model_cfg = cfg.model_config(m, n);
            let outcome = forecasting::train(
                &prepared.train_ws,
                Some(&prepared.val_ws),
                &model_cfg,
                &cfg.train,
                &cfg.data,
            )?;
            let model = Model::from_checkpoint(&outcome.checkpoint)?;
            let report = evaluation::evaluate(
                &model,
                &prepared.test_ws,
                &horizons,
                args.samples,
                cfg.train.seed,
                &cfg.config_hash(),
            )?;
            println!(
                "trial {} (seed {}): overall crps {:.6}",
                trial + 1,
                cfg.train.seed,
                report.overall.crps
            );
            reports.push(report);
        }
        let text = evaluation::render_trials(&reports);
        std::fs::write(&report_path, &text)?;
        print!("{text}");
        return Ok(());
    }

    let ckpt_path = args
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("--checkpoint is required without --trials".into()))?;

    if args.oracle_identity {
        let ckpt = Checkpoint::load(ckpt_path)?;
        let prepared = prepare_data(
            &args.data,
            &ckpt.data.targets,
            ckpt.data.split,
            ckpt.train.context,
            ckpt.train.horizon,
            ckpt.data.stride,
            Some(&ckpt.stats),
        )?;
        let report = evaluation::evaluate_oracle_identity(
            &prepared.test_ws,
            &horizons,
            args.samples.max(1),
            "oracle-identity",
        )?;
        let text = evaluation::render_report(&report);
        std::fs::write(&report_path, &text)?;
        print!("{text}");
        return Ok(());
    }

    let (label, report) =
        evaluate_checkpoint(ckpt_path, &args.data, &horizons, args.samples, args.seed)?;
    let mut text = evaluation::render_report(&report);
    if let Some(baseline_path) = &args.baseline {
        let (base_label, base_report) = evaluate_checkpoint(
            baseline_path,
            &args.data,
            &horizons,
            args.samples,
            args.seed,
        )?;
        text.push('\n');
        text.push_str(&evaluation::render_comparison(&[
            (label, report),
            (base_label, base_report),
        ]));
    }
    std::fs::write(&report_path, &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_hist(args: HistArgs) -> Result<()> {
    if args.bins == 0 {
        return Err(Error::Config("--bins must be >= 1".into()));
    }
    let mut reader = csv::Reader::from_path(&args.ensemble)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers != ["path_id", "variable", "step", "value"] {
        return Err(Error::Data(format!(
            "{}: expected columns path_id,variable,step,value, got {headers:?}",
            args.ensemble.display()
        )));
    }
    let mut rows: Vec<(String, usize, f64)> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let variable = record.get(1).unwrap_or("").to_string();
        let step: usize = record
            .get(2)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::Data("bad step in ensemble csv".into()))?;
        let value: f64 = record
            .get(3)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::Data("bad value in ensemble csv".into()))?;
        rows.push((variable, step, value));
    }
    if rows.is_empty() {
        return Err(Error::Data("ensemble csv has no rows".into()));
    }
    let variable = args
        .variable
        .clone()
        .unwrap_or_else(|| rows[0].0.clone());
    let max_step = rows
        .iter()
        .filter(|(v, _, _)| v == &variable)
        .map(|(_, s, _)| *s)
        .max()
        .ok_or_else(|| Error::Data(format!("variable {variable:?} not present in ensemble")))?;

    let truth_frame = data::load_csv(&args.truth, &[])?;
    let truth_var = truth_frame
        .names
        .iter()
        .position(|n| n == &variable)
        .ok_or_else(|| Error::Data(format!("variable {variable:?} not present in truth csv")))?;
    let truth_all = truth_frame.var(truth_var);

    let (model_values, truth_values): (Vec<f64>, Vec<f64>) = match args.position {
        Some(pos) => {
            if pos < 1 || pos > max_step {
                return Err(Error::Data(format!(
                    "position {pos} outside forecast steps 1..={max_step}"
                )));
            }
            if pos > truth_all.len() {
                return Err(Error::Data(format!(
                    "position {pos} outside truth series of {} steps",
                    truth_all.len()
                )));
            }
            (
                rows.iter()
                    .filter(|(v, s, _)| v == &variable && *s == pos)
                    .map(|(_, _, x)| *x)
                    .collect(),
                vec![truth_all[pos - 1]],
            )
        }
        None => {
            if truth_all.len() < max_step {
                return Err(Error::Data(format!(
                    "truth series has {} steps but the forecast spans {max_step}",
                    truth_all.len()
                )));
            }
            (
                rows.iter()
                    .filter(|(v, _, _)| v == &variable)
                    .map(|(_, _, x)| *x)
                    .collect(),
                truth_all[..max_step].to_vec(),
            )
        }
    };

    let pooled: Vec<f64> = model_values
        .iter()
        .chain(truth_values.iter())
        .copied()
        .collect();
    let mut lo = pooled.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = pooled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / args.bins as f64;
    let bin_of = |x: f64| -> usize {
        let mut idx = ((x - lo) / width) as usize;
        if idx >= args.bins {
            idx = args.bins - 1;
        }
        idx
    };

    let mut writer = csv::Writer::from_path(&args.out)?;
    writer.write_record(["bin_left", "bin_right", "count", "series_tag"])?;
    for (tag, values) in [("model", &model_values), ("truth", &truth_values)] {
        let mut counts = vec![0usize; args.bins];
        for &v in values {
            counts[bin_of(v)] += 1;
        }
        for (i, &count) in counts.iter().enumerate() {
            writer.write_record([
                format!("{}", lo + i as f64 * width),
                format!("{}", lo + (i + 1) as f64 * width),
                count.to_string(),
                tag.to_string(),
            ])?;
        }
    }
    writer.flush()?;
    println!(
        "wrote {} bins x 2 series for {variable:?} to {}",
        args.bins,
        args.out.display()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let kind: SynthKind = args.kind.parse()?;
    let frame = data::synth_generate(kind, args.length, args.seed)?;
    data::write_csv(&frame, &args.out)?;
    println!(
        "wrote {} steps of {:?} ({} variables) to {}",
        frame.len(),
        args.kind,
        frame.n_vars(),
        args.out.display()
    );
    Ok(())
}
