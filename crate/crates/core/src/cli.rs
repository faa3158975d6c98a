//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use crate::data::{
    generate_rs_scenes, generate_synthetic_corpus, load_labeled_dataset, load_unlabeled_dataset, write_corpus,
    SyntheticCorpusSpec,
};
use crate::error::{GerspError, Result};
use crate::eval::{evaluate, EvalMode, EvalProtocol, FrozenEncoder};
use crate::model::EncoderSpec;
use crate::trainer::{load_checkpoint, pretrain, PretrainOptions, TrainingConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "gersp", version, about = "Joint supervised and contrastive pre-training for aerial-image encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus as PNG files plus corpus.json.
    GenData(GenDataArgs),
    /// Pre-train an encoder and write a checkpoint and metric log.
    Pretrain(PretrainArgs),
    /// Fine-tune all backbone weights with a fresh linear head.
    Finetune(EvalArgs),
    /// Train a linear head on frozen pooled features.
    Probe(EvalArgs),
    /// Train one linear head per backbone stage on frozen features.
    StageProbe(EvalArgs),
    /// Print a checkpoint manifest after verifying its checksum.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    k_classes: usize,
    #[arg(long, default_value_t = 2000)]
    n_natural: usize,
    #[arg(long, default_value_t = 2000)]
    n_rs: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Also write this many labeled RS-style images under rs_scenes/.
    #[arg(long, default_value_t = 0)]
    n_scenes: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// Flat JSON config; keys not given fall back to the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Labeled natural images, one subdirectory per class.
    #[arg(long)]
    natural: Option<PathBuf>,
    /// Unlabeled RS images, scanned recursively.
    #[arg(long)]
    rs: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metric log path; defaults to `<out>.metrics.jsonl`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Write the effective config here. Without data paths, stop afterwards.
    #[arg(long)]
    dump_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    ema_m: Option<f64>,
    #[arg(long)]
    queue_capacity: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    t_max: Option<u32>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Any other config key, as `key=json_value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Labeled dataset, one subdirectory per class.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "random_init")]
    checkpoint: Option<PathBuf>,
    /// Evaluate a freshly initialized backbone instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    random_init: bool,
    /// Architecture for --random-init.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Protocol defaults: desk (30 epochs) or full (100 epochs at 224).
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    protocol: Preset,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    resize: Option<usize>,
    #[arg(long)]
    flip_p: Option<f64>,
    /// Pooling grid for stage-probe.
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    checkpoint: PathBuf,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            EXIT_RUNTIME
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("GERSP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("GERSP_THREADS must be a positive integer, got `{v}`"))?;
    // A pool may already exist when called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => run_pretrain(a),
        Command::Finetune(a) => run_eval(a, EvalMode::Finetune),
        Command::Probe(a) => run_eval(a, EvalMode::Probe),
        Command::StageProbe(a) => run_eval(a, EvalMode::StageProbe),
        Command::Inspect(a) => inspect(&a.checkpoint),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SyntheticCorpusSpec {
        n_natural: a.n_natural,
        n_rs: a.n_rs,
        k_classes: a.k_classes,
        image_size: a.image_size,
        seed: a.seed,
    };
    let (natural, rs) = generate_synthetic_corpus(&spec)?;
    let scenes = if a.n_scenes > 0 {
        Some(generate_rs_scenes(&spec, a.n_scenes, 0)?)
    } else {
        None
    };
    let manifest = write_corpus(&a.out, &spec, &natural, &rs, scenes.as_ref())?;
    println!("wrote {} files to {}", manifest.files.len(), a.out.display());
    Ok(())
}

fn preset_config(p: Preset) -> TrainingConfig {
    match p {
        Preset::Desk => TrainingConfig::desk(),
        Preset::Full => TrainingConfig::full(),
    }
}

fn overlay(base: &mut Map<String, Value>, key: &str, value: Value, origin: &str) -> Result<()> {
    match base.get_mut(key) {
        Some(slot) => {
            *slot = value;
            Ok(())
        }
        None => Err(GerspError::Config(format!("unknown config key `{key}` in {origin}"))),
    }
}

/// Preset, then config file, then flags.
fn effective_config(a: &PretrainArgs) -> Result<TrainingConfig> {
    let Value::Object(mut map) = serde_json::to_value(preset_config(a.preset)).expect("config serializes") else {
        unreachable!("config serializes to an object");
    };
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| GerspError::io(path, e))?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| GerspError::Config(format!("{}: {e}", path.display())))?;
        let Value::Object(file) = file else {
            return Err(GerspError::Config(format!("{} is not a JSON object", path.display())));
        };
        for (k, v) in file {
            overlay(&mut map, &k, v, &path.display().to_string())?;
        }
    }
    let flags: [(&str, Option<Value>); 12] = [
        ("seed", a.seed.map(Value::from)),
        ("alpha", a.alpha.map(Value::from)),
        ("tau", a.tau.map(Value::from)),
        ("ema_m", a.ema_m.map(Value::from)),
        ("queue_capacity", a.queue_capacity.map(Value::from)),
        ("batch_size", a.batch_size.map(Value::from)),
        ("epochs", a.epochs.map(Value::from)),
        ("lr_min", a.lr_min.map(Value::from)),
        ("lr_max", a.lr_max.map(Value::from)),
        ("t_max", a.t_max.map(Value::from)),
        ("momentum", a.momentum.map(Value::from)),
        ("weight_decay", a.weight_decay.map(Value::from)),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            overlay(&mut map, k, v, "flags")?;
        }
    }
    for kv in &a.set {
        let (k, raw) = kv
            .split_once('=')
            .ok_or_else(|| GerspError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        // Bare words are taken as strings so `--set block=basic` works.
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        overlay(&mut map, k, v, "--set")?;
    }
    let cfg: TrainingConfig =
        serde_json::from_value(Value::Object(map)).map_err(|e| GerspError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = effective_config(&a)?;
    if let Some(path) = &a.dump_config {
        let json = serde_json::to_string_pretty(&cfg).expect("config serializes");
        fs::write(path, json + "\n").map_err(|e| GerspError::io(path, e))?;
        if a.natural.is_none() && a.rs.is_none() {
            return Ok(());
        }
    }
    let missing = |what: &str| GerspError::Config(format!("pretrain needs --{what}"));
    let natural = load_labeled_dataset(a.natural.as_deref().ok_or_else(|| missing("natural"))?)?;
    let rs = load_unlabeled_dataset(a.rs.as_deref().ok_or_else(|| missing("rs"))?)?;
    let out = a.out.as_deref().ok_or_else(|| missing("out"))?;
    let opts = PretrainOptions {
        metrics_path: a.metrics.clone(),
        verbose: !a.quiet,
    };
    let result = pretrain(&cfg, &natural, &rs, out, &opts)?;
    println!(
        "checkpoint {} ({} iterations, content checksum {:08x}); metrics {}",
        out.display(),
        result.state.iteration,
        result.manifest.content_checksum,
        result.metrics_path.display()
    );
    Ok(())
}

fn run_eval(a: EvalArgs, mode: EvalMode) -> Result<()> {
    let encoder = match &a.checkpoint {
        Some(path) => FrozenEncoder::from_checkpoint(&load_checkpoint(path)?)?,
        None => {
            let spec = match a.preset {
                Preset::Desk => EncoderSpec::desk(),
                Preset::Full => EncoderSpec::full(),
            };
            FrozenEncoder::random(&spec, a.seed)?
        }
    };
    let dataset = load_labeled_dataset(&a.data)?;
    let mut p = match a.protocol {
        Preset::Desk => EvalProtocol::desk(mode, encoder.spec.input_size),
        Preset::Full => EvalProtocol::full(mode),
    };
    p.seed = a.seed;
    if let Some(v) = a.trials {
        p.trials = v;
    }
    if let Some(v) = a.epochs {
        p.epochs = v;
    }
    if let Some(v) = a.train_fraction {
        p.train_fraction = v;
    }
    if let Some(v) = a.batch_size {
        p.batch_size = v;
    }
    if let Some(v) = a.lr {
        p.schedule.base_lr = v;
    }
    if let Some(v) = a.resize {
        p.resize = v;
    }
    if let Some(v) = a.flip_p {
        p.flip_p = v;
    }
    if let Some(v) = a.grid {
        p.stage_grid = v;
    }
    let report = evaluate(&encoder, &dataset, &p)?;
    if let Some(stages) = &report.stages {
        for s in stages {
            println!("stage {}: {:.2} ± {:.2}", s.stage, 100.0 * s.mean, 100.0 * s.std);
        }
    }
    println!(
        "top-1 {:.2} ± {:.2} over {} trials (population std)",
        100.0 * report.mean,
        100.0 * report.std,
        report.accuracies.len()
    );
    if let Some(path) = &a.report {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(path, json + "\n").map_err(|e| GerspError::io(path, e))?;
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let ck = load_checkpoint(path)?;
    let json = serde_json::to_string_pretty(&ck.manifest).expect("manifest serializes");
    println!("{json}");
    println!("crc32 {:08x} ok", ck.file_crc);
    Ok(())
}
