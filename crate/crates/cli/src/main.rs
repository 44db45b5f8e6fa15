//! `tfilm`: synthesize, degrade, train, evaluate and run TFiLM
//! super-resolution and imputation models.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 invariant or check failure.

mod config;
mod error;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};
use tfilm_core::checkpoint;
use tfilm_core::data::{self, PatchDataset, SignalAsset, SynthSpec};
use tfilm_core::dsp;
use tfilm_core::gradcheck::{self, Suite};
use tfilm_core::model::build_model;
use tfilm_core::rng;
use tfilm_core::tensor::Tensor;
use tfilm_core::train::{self, CheckpointSink, EvalItem, Metric, Task};

use config::RunConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "tfilm", version, about = "TFiLM sequence super-resolution and imputation")]
struct Cli {
    /// Worker threads for batch-parallel kernels.
    #[arg(long, global = true, env = "TFILM_THREADS")]
    threads: Option<usize>,
    /// Print per-epoch progress and per-parameter details.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GradModule {
    All,
    Layers,
    Tfilm,
    Model,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic signal from a JSON generator spec.
    Synth {
        /// Spec file, or inline JSON starting with `{`.
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Low-pass and subsample a signal by `r`.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(short = 'r', long = "ratio")]
        ratio: usize,
        #[arg(long)]
        out: PathBuf,
        /// Spline-upscale back to the original rate.
        #[arg(long)]
        upscale: bool,
    },
    /// Train a model on every signal in a directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override a config value, e.g. `--set model.channelCap=32`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Shorthand for `--set train.seed=N`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare a checkpoint with the spline baseline on a directory of signals.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "snr,lsd")]
        metrics: Vec<Metric>,
        /// CSV report path.
        #[arg(long)]
        out: PathBuf,
        /// Task as JSON; defaults to the one stored in the checkpoint.
        #[arg(long)]
        task: Option<String>,
        /// Seed for imputation masks.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Super-resolve a low-resolution signal by `r`.
    Upsample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(short = 'r', long = "ratio")]
        ratio: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero out a share of a series and reconstruct it.
    Impute {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        module: GradModule,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the reports as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// `<path>.run.json`: the command as resolved, for reruns.
fn run_record_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn write_run_record(out: &Path, record: Value) -> Result<(), CliError> {
    data::write_json(&run_record_path(out), &record)?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Signal files in `dir`, sorted by name; sidecars are skipped.
fn list_signals(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| {
            let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
            matches!(ext.as_str(), "f32" | "raw" | "tfs" | "wav" | "csv")
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no signal files (.f32, .raw, .tfs, .wav, .csv)",
            dir.display()
        )));
    }
    Ok(files)
}

fn read_all(dir: &Path) -> Result<Vec<SignalAsset>, CliError> {
    list_signals(dir)?.iter().map(|p| Ok(data::read_signal(p)?)).collect()
}

fn synth(spec: &str, seed: u64, out: &Path) -> Result<(), CliError> {
    let text = if spec.trim_start().starts_with('{') {
        spec.to_owned()
    } else {
        fs::read_to_string(spec).map_err(|e| CliError::Data(format!("{spec}: {e}")))?
    };
    let spec: SynthSpec = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid spec: {e}")))?;
    let asset = data::synth_signal(&spec, seed)?;
    ensure_parent(out)?;
    data::write_signal(out, &asset)?;
    write_run_record(out, json!({"command": "synth", "spec": spec, "seed": seed, "out": out}))?;
    println!("wrote {} samples to {}", asset.len(), out.display());
    Ok(())
}

fn degrade(input: &Path, ratio: usize, out: &Path, upscale: bool) -> Result<(), CliError> {
    if ratio == 0 {
        return Err(CliError::Usage("ratio must be at least 1".into()));
    }
    let y = data::read_signal(input)?;
    let x = if upscale {
        data::make_pairs(&y, ratio)?.0
    } else {
        let chans = (0..y.channels())
            .map(|c| dsp::degrade(&y.channel(c), ratio))
            .collect::<Result<Vec<_>, _>>()?;
        let mut prov = y.provenance.clone();
        prov.steps.push(json!({
            "op": "degrade",
            "ratio": ratio,
            "filter": {"type": "cheby1", "order": dsp::DEGRADE_ORDER, "rippleDb": dsp::DEGRADE_RIPPLE_DB, "cutoff": 0.8 / ratio as f64, "zeroPhase": true},
        }));
        SignalAsset::from_channels(y.sample_rate / ratio as u32, &chans, prov)?
    };
    ensure_parent(out)?;
    data::write_signal(out, &x)?;
    write_run_record(
        out,
        json!({"command": "degrade", "in": input, "ratio": ratio, "upscale": upscale, "out": out}),
    )?;
    println!("wrote {} samples to {}", x.len(), out.display());
    Ok(())
}

fn train_cmd(
    config: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    mut set: Vec<String>,
    seed: Option<u64>,
    verbose: u8,
) -> Result<(), CliError> {
    if let Some(s) = seed {
        set.push(format!("train.seed={s}"));
    }
    let cfg: RunConfig = config::resolve(config, &set)?;
    fs::create_dir_all(out)?;
    data::write_json(&out.join("config.json"), &cfg)?;

    let signals = read_all(data_dir)?;
    let pairs = cfg.task.pairs(&signals, cfg.train.seed)?;
    let patch = cfg.model.patch_length;
    let stride = cfg.patch_stride.unwrap_or((patch / 2).max(1));
    let dataset = PatchDataset::from_signals(&pairs, patch, stride, cfg.train.seed)?;
    let model = build_model(&cfg.model, cfg.train.seed)?;
    println!(
        "training {} parameters on {} patches from {} signals",
        model.count_params(),
        dataset.len(),
        signals.len()
    );
    let mut extras = Map::new();
    extras.insert("task".into(), serde_json::to_value(cfg.task)?);
    extras.insert("seed".into(), Value::from(cfg.train.seed));
    let sink = CheckpointSink {
        dir: out.join("checkpoints"),
        extras: extras.clone(),
    };
    let started = Instant::now();
    let (model, run) = train::train(model, &dataset, &cfg.train, Some(&sink))?;
    checkpoint::save(&out.join("model.tflm"), &model, &extras)?;
    data::write_json(&out.join("train_run.json"), &run)?;
    if verbose > 0 {
        for e in &run.epochs {
            println!(
                "epoch {:>3}  train {:.4e}  val {}  {:.1}s",
                e.epoch,
                e.train_loss,
                e.val_loss.map_or("-".into(), |v| format!("{v:.4e}")),
                e.seconds
            );
        }
    }
    println!(
        "{} epochs in {:.1}s; final train loss {}; best epoch {:?}; outputs in {}",
        run.epochs.len(),
        started.elapsed().as_secs_f64(),
        run.epochs.last().map_or("-".into(), |e| format!("{:.4e}", e.train_loss)),
        run.best_epoch,
        out.display()
    );
    Ok(())
}

fn checkpoint_task(extras: &Map<String, Value>, explicit: Option<&str>) -> Result<Task, CliError> {
    match explicit {
        Some(t) => serde_json::from_str(t).map_err(|e| CliError::Usage(format!("invalid --task: {e}"))),
        None => match extras.get("task") {
            Some(t) => serde_json::from_value(t.clone()).map_err(|e| CliError::Data(format!("checkpoint task: {e}"))),
            None => Err(CliError::Usage("checkpoint records no task; pass --task".into())),
        },
    }
}

fn eval_cmd(
    ckpt: &Path,
    data_dir: &Path,
    metrics: &[Metric],
    out: &Path,
    task: Option<&str>,
    seed: u64,
) -> Result<(), CliError> {
    let (model, extras) = checkpoint::load(ckpt)?;
    let task = checkpoint_task(&extras, task)?;
    let signals = read_all(data_dir)?;
    let items = task.eval_items(&signals, seed)?;
    let report = train::evaluate(&model, &items, metrics)?;
    ensure_parent(out)?;
    fs::write(out, report.to_csv())?;
    write_run_record(
        out,
        json!({"command": "eval", "ckpt": ckpt, "data": data_dir, "metrics": metrics, "task": task, "seed": seed, "out": out}),
    )?;
    print!("{report}");
    Ok(())
}

fn upsample(ckpt: &Path, input: &Path, ratio: usize, out: &Path) -> Result<(), CliError> {
    if ratio == 0 {
        return Err(CliError::Usage("ratio must be at least 1".into()));
    }
    let (model, _) = checkpoint::load(ckpt)?;
    let low = data::read_signal(input)?;
    let chans = (0..low.channels())
        .map(|c| dsp::spline_upsample(&low.channel(c), ratio))
        .collect::<Result<Vec<_>, _>>()?;
    let mut prov = low.provenance.clone();
    prov.steps.push(json!({"op": "splineUpsample", "ratio": ratio}));
    let x = SignalAsset::from_channels(low.sample_rate * ratio as u32, &chans, prov.clone())?;
    let y = train::predict(&model, x.samples())?;
    prov.steps.push(json!({"op": "model", "checkpoint": ckpt}));
    let result = SignalAsset::mono(x.sample_rate, y, prov)?;
    ensure_parent(out)?;
    data::write_signal(out, &result)?;
    write_run_record(out, json!({"command": "upsample", "ckpt": ckpt, "in": input, "ratio": ratio, "out": out}))?;
    println!("wrote {} samples at {} Hz to {}", result.len(), result.sample_rate, out.display());
    Ok(())
}

fn impute(ckpt: &Path, input: &Path, rate: f64, out: &Path, seed: u64) -> Result<(), CliError> {
    let (model, _) = checkpoint::load(ckpt)?;
    let series = data::read_signal(input)?;
    let mask_seed = rng::derive_seed(seed, "mask", 0);
    let item = EvalItem::imputation(&series.channel(0), rate, mask_seed)?;
    let y = train::predict(&model, &item.input)?;
    let report = train::evaluate(&model, std::slice::from_ref(&item), &[Metric::L2])?;
    let mut prov = series.provenance.clone();
    prov.steps.push(json!({"op": "zeroMask", "rate": rate, "seed": mask_seed}));
    prov.steps.push(json!({"op": "model", "checkpoint": ckpt}));
    let result = SignalAsset::new(series.sample_rate, Tensor::new(vec![y.len(), 1], y).expect("length"), prov)?;
    ensure_parent(out)?;
    data::write_signal(out, &result)?;
    write_run_record(out, json!({"command": "impute", "ckpt": ckpt, "in": input, "rate": rate, "seed": seed, "out": out}))?;
    println!("masked {} of {} samples", item.mask.len(), result.len());
    print!("{report}");
    Ok(())
}

fn gradcheck_cmd(module: GradModule, seed: u64, out: Option<&Path>, verbose: u8) -> Result<(), CliError> {
    let suites: &[Suite] = match module {
        GradModule::All => &Suite::ALL,
        GradModule::Layers => &[Suite::Layers],
        GradModule::Tfilm => &[Suite::Tfilm],
        GradModule::Model => &[Suite::Model],
    };
    let started = Instant::now();
    let mut reports = Vec::new();
    for &s in suites {
        reports.extend(gradcheck::run_suite(s, seed).map_err(|e| CliError::Check(e.to_string()))?);
    }
    println!("{:<8} {:<44} {:>12} {:>8} {:>8}  result", "suite", "case", "max rel err", "checked", "excluded");
    for r in &reports {
        let checked: usize = r.report.params.iter().map(|p| p.checked).sum();
        let excluded: usize = r.report.params.iter().map(|p| p.excluded).sum();
        println!(
            "{:<8} {:<44} {:>12.3e} {:>8} {:>8}  {}",
            serde_json::to_value(r.suite)?.as_str().unwrap_or("?"),
            r.case,
            r.report.max_rel_error(),
            checked,
            excluded,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if verbose > 0 {
            for p in &r.report.params {
                println!("           {:<42} {:>12.3e} {:>8} {:>8}", p.name, p.max_rel_error, p.checked, p.excluded);
            }
        }
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!(
        "{} cases, {failed} failed, h = {}, tolerance = {}, {:.1}s",
        reports.len(),
        gradcheck::STEP,
        gradcheck::TOLERANCE,
        started.elapsed().as_secs_f64()
    );
    if let Some(out) = out {
        data::write_json(out, &reports)?;
        write_run_record(out, json!({"command": "gradcheck", "module": format!("{module:?}").to_lowercase(), "seed": seed, "out": out}))?;
    }
    if failed > 0 {
        return Err(CliError::Check(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Synth { spec, seed, out } => synth(&spec, seed, &out),
        Command::Degrade {
            input,
            ratio,
            out,
            upscale,
        } => degrade(&input, ratio, &out, upscale),
        Command::Train {
            config,
            data,
            out,
            set,
            seed,
        } => train_cmd(config.as_deref(), &data, &out, set, seed, cli.verbose),
        Command::Eval {
            ckpt,
            data,
            metrics,
            out,
            task,
            seed,
        } => eval_cmd(&ckpt, &data, &metrics, &out, task.as_deref(), seed),
        Command::Upsample {
            ckpt,
            input,
            ratio,
            out,
        } => upsample(&ckpt, &input, ratio, &out),
        Command::Impute {
            ckpt,
            input,
            rate,
            out,
            seed,
        } => impute(&ckpt, &input, rate, &out, seed),
        Command::Gradcheck { module, seed, out } => gradcheck_cmd(module, seed, out.as_deref(), cli.verbose),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
