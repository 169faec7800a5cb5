//! `eocd`: synthetic data generation, training, evaluation, prediction,
//! benchmarking, ablation and gradient verification.

mod ablate;
mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eocd::config::RunConfigFile;
use eocd::data::{generate_synthetic_dataset, load_pgm, load_ppm, save_pgm, DatasetIndex, SPLITS};
use eocd::eval::{complexity_report, evaluate, measure_latency};
use eocd::gradcheck;
use eocd::losses::DistillLoss;
use eocd::network::{load_checkpoint, save_checkpoint, FusionMode, Model, ModelConfig};
use eocd::train::{fit, Teacher, TeacherKind};
use eocd::Error;

use output::Output;

#[derive(Parser)]
#[command(name = "eocd", version, about = "Encoder-only change detection on bitemporal imagery")]
struct Cli {
    /// Also append all output to this file.
    #[arg(long, global = true)]
    log: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bitemporal dataset.
    Synth(SynthArgs),
    /// Train a student model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Predict a change mask for one image pair.
    Predict(PredictArgs),
    /// Report parameters, FLOPs and latency.
    Bench(BenchArgs),
    /// Run an ablation preset and print a comparison table.
    Ablate(AblateArgs),
    /// Finite-difference check of every differentiable operator.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Run configuration whose [data] section supplies the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Where to write the best checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Frozen teacher checkpoint.
    #[arg(long, conflicts_with = "oracle_teacher")]
    teacher: Option<PathBuf>,
    /// Use the smoothed ground-truth oracle as teacher.
    #[arg(long)]
    oracle_teacher: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    pre: PathBuf,
    #[arg(long)]
    post: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, conflicts_with_all = ["config", "preset"])]
    ckpt: Option<PathBuf>,
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named model preset (micro, tiny, small, wide, teacher).
    #[arg(long)]
    preset: Option<String>,
    /// Override the fusion mode of a config or preset (emff, naive).
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long, default_value_t = 224)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 50)]
    runs: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// components, losses or backbones.
    #[arg(long)]
    preset: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Frozen teacher checkpoint; the oracle teacher is used otherwise.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Operator name or `all`.
    #[arg(long, default_value = "all")]
    op: String,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Process outcome: success, a failed verification, or an error.
enum Failure {
    Verification(String),
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type CmdResult = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } | Error::Generation(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = match Output::new(cli.log.as_deref()) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a, &mut out),
        Command::Train(a) => cmd_train(a, &mut out),
        Command::Eval(a) => cmd_eval(a, &mut out),
        Command::Predict(a) => cmd_predict(a, &mut out),
        Command::Bench(a) => cmd_bench(a, &mut out),
        Command::Ablate(a) => ablate::cmd_ablate(a, &mut out),
        Command::Gradcheck(a) => cmd_gradcheck(a, &mut out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            out.error(&msg);
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            out.error(&format!("error: {e}"));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(path: Option<&Path>) -> eocd::Result<RunConfigFile> {
    match path {
        Some(p) => RunConfigFile::load(p),
        None => Ok(RunConfigFile::default()),
    }
}

fn open_split(root: &Path, split: &str) -> eocd::Result<DatasetIndex> {
    if !SPLITS.contains(&split) {
        return Err(Error::Usage(format!("unknown split `{split}` (train, val, test)")));
    }
    DatasetIndex::open(root, split)
}

fn cmd_synth(a: SynthArgs, out: &mut Output) -> CmdResult {
    let mut data = load_config(a.config.as_deref())?.data;
    data.size = a.size.unwrap_or(data.size);
    data.n_train = a.n_train.unwrap_or(data.n_train);
    data.n_val = a.n_val.unwrap_or(data.n_val);
    data.n_test = a.n_test.unwrap_or(data.n_test);
    data.seed = a.seed.unwrap_or(data.seed);
    out.config("synth", &[("out", a.out.display().to_string())], "data", &data)?;
    data.validate()?;
    let non_empty = fs::read_dir(&a.out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !a.force {
        return Err(Error::Usage(format!(
            "{} exists and is not empty; pass --force to write into it",
            a.out.display()
        ))
        .into());
    }
    for index in generate_synthetic_dataset(&data, &a.out)? {
        let samples = index.load_all()?;
        let mean = if samples.is_empty() {
            0.0
        } else {
            samples.iter().map(|s| s.mask.change_fraction()).sum::<f64>() / samples.len() as f64
        };
        out.line(&format!("split={} samples={} mean_change_fraction={mean:.4}", index.split(), index.len()));
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, out: &mut Output) -> CmdResult {
    let mut run = load_config(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    match (&a.teacher, a.oracle_teacher) {
        (Some(path), _) => {
            run.train.teacher = TeacherKind::Checkpoint;
            run.train.teacher_checkpoint = path.display().to_string();
        }
        (None, true) => run.train.teacher = TeacherKind::Oracle,
        (None, false) => {
            run.train.teacher = TeacherKind::None;
            run.loss.distill_loss = DistillLoss::None;
        }
    }
    let extra = [
        ("data", a.data.display().to_string()),
        ("out", a.out.display().to_string()),
    ];
    out.config("train", &extra, "", &run)?;
    run.validate()?;
    let cfg = run.train_config();
    let teacher = Teacher::from_config(&cfg)?;
    let train = open_split(&a.data, "train")?.load_all()?;
    let val = open_split(&a.data, "val")?.load_all()?;
    let student = Model::new(run.model.clone(), cfg.seed)?;
    let mut lines = Vec::new();
    let outcome = fit(student, &teacher, &train, &val, &cfg, &mut |r| {
        let line = r.to_line();
        out.line(&line);
        lines.push(line);
    })?;
    save_checkpoint(&outcome.best, &a.out)?;
    let log_path = epoch_log_path(&a.out);
    fs::write(&log_path, lines.join("\n") + "\n").map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let best = &outcome.log[outcome.best_epoch - 1];
    out.line(&format!("best_epoch={} val_{}", outcome.best_epoch, best.val.to_record().replace(' ', " val_")));
    out.line(&format!("checkpoint={} epoch_log={}", a.out.display(), log_path.display()));
    Ok(())
}

/// `<ckpt>.log` next to the checkpoint.
pub fn epoch_log_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".log");
    ckpt.with_file_name(name)
}

fn cmd_eval(a: EvalArgs, out: &mut Output) -> CmdResult {
    out.header(
        "eval",
        &[
            ("ckpt", a.ckpt.display().to_string()),
            ("data", a.data.display().to_string()),
            ("split", a.split.clone()),
            ("batch_size", a.batch_size.to_string()),
        ],
    );
    let model = load_checkpoint(&a.ckpt)?;
    let index = open_split(&a.data, &a.split)?;
    if index.is_empty() {
        return Err(Error::Input(format!("split `{}` has no samples", a.split)).into());
    }
    let samples = index.load_all()?;
    let report = evaluate(&model, &samples, a.batch_size)?;
    out.line(&format!(
        "{:<6} {:>8} {:>8} {:>8}\n{:<6} {:>8.4} {:>8.4} {:>8.4}",
        "split", "iou", "f1", "oa", a.split, report.iou, report.f1, report.oa
    ));
    out.line(&format!("split={} samples={} {}", a.split, samples.len(), report.to_record()));
    Ok(())
}

fn cmd_predict(a: PredictArgs, out: &mut Output) -> CmdResult {
    out.header(
        "predict",
        &[
            ("ckpt", a.ckpt.display().to_string()),
            ("pre", a.pre.display().to_string()),
            ("post", a.post.display().to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    let model = load_checkpoint(&a.ckpt)?;
    let pre = load_ppm(&a.pre)?;
    let post = load_ppm(&a.post)?;
    if pre.shape() != post.shape() {
        return Err(Error::Input(format!(
            "pre image {} and post image {} differ in size",
            pre.shape(),
            post.shape()
        ))
        .into());
    }
    let (_, mask) = model.predict(&pre, &post)?;
    save_pgm(&mask, &a.out)?;
    // re-read to confirm what was written
    let written = load_pgm(&a.out)?;
    out.line(&format!(
        "mask={} size={}x{} change_percent={:.2}",
        a.out.display(),
        written.h(),
        written.w(),
        100.0 * written.change_fraction()
    ));
    Ok(())
}

fn parse_fusion(s: &str) -> eocd::Result<FusionMode> {
    match s {
        "emff" => Ok(FusionMode::Emff),
        "naive" => Ok(FusionMode::Naive),
        other => Err(Error::Usage(format!("unknown fusion mode `{other}` (emff, naive)"))),
    }
}

fn cmd_bench(a: BenchArgs, out: &mut Output) -> CmdResult {
    let model = if let Some(ckpt) = &a.ckpt {
        load_checkpoint(ckpt)?
    } else {
        let mut cfg = match (&a.config, &a.preset) {
            (Some(path), _) => RunConfigFile::load(path)?.model,
            (None, Some(name)) => ModelConfig::preset(name)?,
            (None, None) => ModelConfig::tiny(),
        };
        if let Some(f) = &a.fusion {
            cfg.fusion_mode = parse_fusion(f)?;
        }
        Model::new(cfg, 0)?
    };
    let extra = [
        ("size", a.size.to_string()),
        ("warmup", a.warmup.to_string()),
        ("runs", a.runs.to_string()),
    ];
    out.config("bench", &extra, "model", model.config())?;
    let mut report = complexity_report(&model, (a.size, a.size))?;
    report.latency = Some(measure_latency(&model, (a.size, a.size), a.warmup, a.runs)?);
    out.line(report.to_table().trim_end());
    for r in report.to_records() {
        out.line(&r);
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut Output) -> CmdResult {
    out.header(
        "gradcheck",
        &[
            ("op", a.op.clone()),
            ("instances", a.instances.to_string()),
            ("seed", a.seed.to_string()),
            ("tolerance", gradcheck::TOLERANCE.to_string()),
        ],
    );
    let reports = if a.op == "all" {
        gradcheck::check_all(a.instances, a.seed)?
    } else {
        vec![gradcheck::check_op(&a.op, a.instances, a.seed)?]
    };
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "pass" } else { "FAIL" };
        out.line(&format!(
            "op={} instances={} max_rel_err={:.3e} status={status}",
            r.op, r.instances, r.max_rel_err
        ));
        if !r.passed() {
            failed.push(r.op);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("gradient check failed for: {}", failed.join(", "))))
    }
}
