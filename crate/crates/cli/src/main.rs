use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffris::config::RunConfig;
use diffris::gradcheck::{self, GradcheckOptions};
use diffris::metrics::{emit_report, summary_json, BinaryMask};
use diffris::synthdata::{dataset::write_rgb_png, generate_split, load_dataset, Sample, Split};
use diffris::training::{evaluate, Checkpoint, CheckpointKind, Evaluation, Trainer};
use diffris::{Error, Result};

#[derive(Parser)]
#[command(name = "diffris", version, about = "Referring image segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with a manifest.
    GenData(GenDataArgs),
    /// Train the adapter and decoder with frozen encoders.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Finite-difference and straight-through checks at tiny dimensions.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Overrides {
    /// Override a config key, e.g. `--set training.lr=1e-4`. Values are
    /// parsed as JSON and fall back to strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct TrainArgs {
    /// Required unless resuming.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Required unless resuming; a resumed run writes next to its checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Markdown report; a JSON summary is written beside it.
    #[arg(long)]
    report: PathBuf,
    /// Write one PNG per sample with the predicted contour drawn in.
    #[arg(long, value_name = "DIR")]
    overlay: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DIFFRIS_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// Apply `key.path=value` overrides to a JSON document.
fn apply_overrides(doc: &mut serde_json::Value, sets: &[String]) -> Result<()> {
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override `{s}` is not KEY=VALUE")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut node = &mut *doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a config key")))?;
            if i + 1 == parts.len() {
                obj.insert(part.to_string(), value.clone());
                break;
            }
            node = obj.entry(part.to_string()).or_insert_with(|| serde_json::json!({}));
        }
    }
    Ok(())
}

/// Config file (or defaults) with overrides, validated.
fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => serde_json::json!({}),
    };
    apply_overrides(&mut doc, sets)?;
    RunConfig::from_json(&doc.to_string())
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let cfg = load_config(a.config.as_deref(), &a.overrides.set)?;
    let manifest = generate_split(&a.out, a.n, a.seed, &cfg.data)?;
    println!("{}", manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut sets = a.overrides.set.clone();
    if let Some(e) = a.epochs {
        sets.push(format!("training.epochs={e}"));
    }
    if let Some(lr) = a.lr {
        sets.push(format!("training.lr={lr}"));
    }
    if let Some(b) = a.batch_size {
        sets.push(format!("training.batch_size={b}"));
    }
    if let Some(s) = a.seed {
        sets.push(format!("training.seed={s}"));
    }
    let mut trainer = match &a.resume {
        Some(ck) => {
            if sets.iter().any(|s| !s.starts_with("training.epochs=")) {
                return Err(Error::Usage("a resumed run only accepts --epochs".into()));
            }
            let mut t = Trainer::resume(ck)?;
            if let Some(e) = a.epochs {
                t.extend_to(e)?;
            }
            t
        }
        None => {
            let path = a
                .config
                .as_deref()
                .ok_or_else(|| Error::Usage("train needs --config or --resume".into()))?;
            let out = a
                .out
                .as_deref()
                .ok_or_else(|| Error::Usage("train needs --out unless resuming".into()))?;
            let cfg = load_config(Some(path), &sets)?;
            Trainer::new(&cfg)?.with_output(out, &cfg.to_json())?
        }
    };
    let data = load_dataset(&a.data)?;
    if data.samples.iter().any(|s| s.size != trainer.config().data.canvas) {
        return Err(Error::Config(format!(
            "dataset images do not match data.canvas = {}",
            trainer.config().data.canvas
        )));
    }
    let (tr, val) = (data.split(Split::Train), data.split(Split::Val));
    let outcome = trainer.fit(&tr, &val)?;
    println!(
        "best validation mIoU {:.4} at epoch {}",
        outcome.best_val_miou, outcome.best_epoch
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let split: Split = a.split.parse()?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = &ck.meta.config;
    let data = load_dataset(&a.data)?.split(split);
    if data.is_empty() {
        return Err(Error::Usage(format!("split `{}` has no samples", a.split)));
    }
    let ev = match ck.meta.kind {
        CheckpointKind::Oracle => Evaluation::oracle(&data, &cfg.eval.thresholds)?,
        CheckpointKind::Model => evaluate(&ck.model()?, &data, &cfg.eval.thresholds, cfg.eval.batch_size)?,
    };
    let table = emit_report(&ev.summary);
    write(&a.report, table.as_bytes())?;
    let json = serde_json::to_string_pretty(&summary_json(&ev.summary, &ev.records, &ev.ids))?;
    write(&a.report.with_extension("json"), json.as_bytes())?;
    if let Some(dir) = &a.overlay {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (s, p) in data.samples.iter().zip(&ev.predictions) {
            write_rgb_png(&dir.join(format!("{:06}.png", s.id)), s.size, &overlay(s, p))?;
        }
    }
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

const CONTOUR: [u8; 3] = [255, 0, 255];

/// The sample's image with the boundary of `pred` painted over it.
fn overlay(s: &Sample, pred: &BinaryMask) -> Vec<u8> {
    let n = s.size * s.size;
    let mut rgb = vec![0u8; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            rgb[3 * p + c] = (s.image[c * n + p] * 255.0).round() as u8;
        }
    }
    let (h, w) = pred.dims();
    for y in 0..h {
        for x in 0..w {
            if !pred.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !pred.get(y - 1, x)
                || !pred.get(y + 1, x)
                || !pred.get(y, x - 1)
                || !pred.get(y, x + 1);
            if edge {
                rgb[3 * (y * w + x)..3 * (y * w + x) + 3].copy_from_slice(&CONTOUR);
            }
        }
    }
    rgb
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn run_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = load_config(a.config.as_deref(), &[])?;
    let opts = GradcheckOptions {
        seed: a.seed,
        inject_fault: a.inject_fault,
        ..Default::default()
    };
    let report = gradcheck::run(&cfg.model(), &opts)?;
    print!("{}", report.table());
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failing components: {}", report.failing().join(", "));
        Ok(ExitCode::from(1))
    }
}
