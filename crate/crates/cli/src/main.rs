//! `sethpose` command-line driver.
//!
//! Exit codes: 0 success, 1 contract or configuration error, 2 divergence,
//! 3 I/O.

mod commands;
mod run_config;

use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sethpose::{Error, Result};

use run_config::RunConfig;

#[derive(Parser)]
#[command(name = "sethpose", version, about = "Sequential 3D hand pose estimation from synthetic hand sequences")]
struct Cli {
    /// Run configuration file with `key = value` lines.
    #[arg(long, global = true, env = "SETHPOSE_CONFIG")]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Accepted before and after the subcommand; the two lists are joined in
/// command-line order.
#[derive(Args)]
struct Overrides {
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its split manifest.
    GenData(GenData),
    /// Run training stage 1, stage 2 or both.
    Train(Train),
    /// Report EPE, AUC and the PCK curve of a checkpoint.
    Eval(Eval),
    /// Finite-difference check of every parameter group.
    Gradcheck(Gradcheck),
    /// Train and evaluate once per attention head count.
    SweepHeads(SweepHeads),
    /// Write only the PCK curve as CSV.
    ExportCurve(Eval),
}

type Pairs = Vec<(&'static str, String)>;

fn put(pairs: &mut Pairs, key: &'static str, value: Option<impl Display>) {
    if let Some(v) = value {
        pairs.push((key, v.to_string()));
    }
}

fn flag(pairs: &mut Pairs, key: &'static str, on: bool) {
    if on {
        pairs.push((key, "true".into()));
    }
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    overrides: Overrides,
    /// temporal or angular.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    subjects: Option<u32>,
    #[arg(long)]
    activities: Option<u32>,
    /// Sequences per subject and activity.
    #[arg(long)]
    sequences: Option<u32>,
    /// Frames per sequence; the number of views in angular mode.
    #[arg(long = "seq-len", visible_alias = "cameras")]
    seq_len: Option<usize>,
    /// Square frame size in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Probability that a sequence has one finger hidden in some frames.
    #[arg(long)]
    occlusion: Option<f64>,
    /// subject or activity.
    #[arg(long)]
    split: Option<String>,
    /// Comma-separated held-out ids.
    #[arg(long = "test-ids")]
    test_ids: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl GenData {
    fn pairs(&self) -> Pairs {
        let mut p = Pairs::new();
        put(&mut p, "mode", self.mode.as_ref());
        put(&mut p, "subjects", self.subjects);
        put(&mut p, "activities", self.activities);
        put(&mut p, "sequences", self.sequences);
        put(&mut p, "seq_len", self.seq_len);
        put(&mut p, "img_h", self.size);
        put(&mut p, "img_w", self.size);
        put(&mut p, "occlusion", self.occlusion);
        put(&mut p, "split", self.split.as_ref());
        put(&mut p, "test_ids", self.test_ids.as_ref());
        put(&mut p, "seed", self.seed);
        put(&mut p, "out", self.out.as_ref().map(|p| p.display()));
        p
    }
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    data: Option<PathBuf>,
    /// 1, 2 or both.
    #[arg(long)]
    stage: Option<String>,
    /// Starting checkpoint; required for stage 2.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train stage 2 with the fully connected stand-in instead of the
    /// sequence encoder.
    #[arg(long)]
    ablation: bool,
    /// all, train or test side of the split manifest.
    #[arg(long)]
    subset: Option<String>,
}

impl Train {
    fn pairs(&self) -> Pairs {
        let mut p = Pairs::new();
        put(&mut p, "data", self.data.as_ref().map(|p| p.display()));
        put(&mut p, "stage", self.stage.as_ref());
        put(&mut p, "checkpoint", self.checkpoint.as_ref().map(|p| p.display()));
        put(&mut p, "out", self.out.as_ref().map(|p| p.display()));
        put(&mut p, "seed", self.seed);
        flag(&mut p, "ablation", self.ablation);
        put(&mut p, "train_on", self.subset.as_ref());
        p
    }
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for eval, CSV file for export-curve.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate the single-frame variant.
    #[arg(long)]
    ablation: bool,
    /// Score the ground truth as if it were a prediction.
    #[arg(long = "ground-truth")]
    ground_truth: bool,
    /// all, train or test side of the split manifest.
    #[arg(long)]
    subset: Option<String>,
    /// joint or frame.
    #[arg(long)]
    pooling: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
}

impl Eval {
    fn pairs(&self) -> Pairs {
        let mut p = Pairs::new();
        put(&mut p, "data", self.data.as_ref().map(|p| p.display()));
        put(&mut p, "checkpoint", self.checkpoint.as_ref().map(|p| p.display()));
        put(&mut p, "out", self.out.as_ref().map(|p| p.display()));
        flag(&mut p, "ablation", self.ablation);
        flag(&mut p, "ground_truth", self.ground_truth);
        put(&mut p, "eval_on", self.subset.as_ref());
        put(&mut p, "pck.pooling", self.pooling.as_ref());
        put(&mut p, "workers", self.workers);
        p
    }
}

#[derive(Args)]
struct Gradcheck {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Output directory for the report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flip the sign of one backward rule (harness self-test).
    #[arg(long = "inject-sign-flip", hide = true)]
    inject_sign_flip: Option<String>,
}

impl Gradcheck {
    fn pairs(&self) -> Pairs {
        let mut p = Pairs::new();
        put(&mut p, "seed", self.seed);
        put(&mut p, "gradcheck.eps", self.eps);
        put(&mut p, "gradcheck.tolerance", self.tolerance);
        put(&mut p, "out", self.out.as_ref().map(|p| p.display()));
        p
    }
}

#[derive(Args)]
struct SweepHeads {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated head counts.
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "train-on")]
    train_on: Option<String>,
    #[arg(long = "eval-on")]
    eval_on: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
}

impl SweepHeads {
    fn pairs(&self) -> Pairs {
        let mut p = Pairs::new();
        put(&mut p, "data", self.data.as_ref().map(|p| p.display()));
        put(&mut p, "sweep.heads", self.heads.as_ref());
        put(&mut p, "out", self.out.as_ref().map(|p| p.display()));
        put(&mut p, "seed", self.seed);
        put(&mut p, "train_on", self.train_on.as_ref());
        put(&mut p, "eval_on", self.eval_on.as_ref());
        put(&mut p, "workers", self.workers);
        p
    }
}

impl Command {
    fn overrides(&self) -> &[String] {
        match self {
            Command::GenData(a) => &a.overrides.set,
            Command::Train(a) => &a.overrides.set,
            Command::Eval(a) | Command::ExportCurve(a) => &a.overrides.set,
            Command::Gradcheck(a) => &a.overrides.set,
            Command::SweepHeads(a) => &a.overrides.set,
        }
    }

    fn pairs(&self) -> Pairs {
        match self {
            Command::GenData(a) => a.pairs(),
            Command::Train(a) => a.pairs(),
            Command::Eval(a) | Command::ExportCurve(a) => a.pairs(),
            Command::Gradcheck(a) => a.pairs(),
            Command::SweepHeads(a) => a.pairs(),
        }
    }
}

/// Defaults, then the model keys recorded next to an input checkpoint, then
/// the config file, then `--set` overrides, then dedicated flags.
fn resolve(cli: &Cli) -> Result<RunConfig> {
    let pairs = cli.command.pairs();
    let build = |base: Option<&PathBuf>| -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(file) = base {
            cfg.apply_model_keys(file)?;
        }
        if let Some(file) = &cli.config {
            cfg.apply_file(file)?;
        }
        for o in cli.overrides.set.iter().chain(cli.command.overrides()) {
            cfg.apply_override(o)?;
        }
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    };
    let cfg = build(None)?;
    let recorded = cfg
        .checkpoint
        .as_ref()
        .and_then(|c| c.parent().map(|d| d.join("config.txt")))
        .filter(|p| p.is_file());
    match recorded {
        Some(base) => build(Some(&base)),
        None => Ok(cfg),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::GenData(_) => commands::gen_data(&cfg),
        Command::Train(_) => commands::train(cfg),
        Command::Eval(_) => commands::eval(cfg),
        Command::ExportCurve(_) => commands::export_curve(cfg),
        Command::Gradcheck(a) => commands::gradcheck(&cfg, a.inject_sign_flip.as_deref()),
        Command::SweepHeads(_) => commands::sweep_heads(cfg),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Divergence { .. } => 2,
        Error::Io { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
