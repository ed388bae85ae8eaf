//! Command-line surface: dataset generation, training, evaluation, late
//! fusion, shape reports and gradient checks.
//!
//! Exit status is 0 on success, 1 for invalid input or configuration, and 2
//! when a numeric check or computation fails.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use stepnet_core::checks;
use stepnet_core::config::{Ablation, ExperimentConfig};
use stepnet_core::data::{generate_synthetic, pseudo_flow, write_dataset, Split};
use stepnet_core::fusion::{alpha_sweep, fuse_at, LogitExport};
use stepnet_core::shapes::{full_scale_report, propagate};
use stepnet_core::tensor::shape_string;
use stepnet_core::train::{evaluate_checkpoint, train, Metrics, TrainOptions};
use stepnet_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "stepnet", version, about = "Part-aware sign recognition on video clips")]
pub struct Cli {
    /// JSON experiment config; the desk preset when absent.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run seed; overrides the config.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Keep wall-clock times out of logs so equal runs are byte-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset described by the config.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus a metric log.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Late-fuse RGB and flow logit exports.
    Fuse(FuseArgs),
    /// Print the shape of every named tensor.
    Shapes(ShapesArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory; the config's data root when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write 10-channel pseudo-flow stacks instead of RGB frames.
    #[arg(long)]
    pub flow: bool,
    #[arg(long, value_name = "N")]
    pub clips_per_class: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    Full,
    GlobalOnly,
    SpatialOnly,
    TemporalOnly,
    LeftRightOnly,
    TopBottomOnly,
    ConcatFusion,
    NoGru,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::GlobalOnly => Ablation::GlobalOnly,
            AblationArg::SpatialOnly => Ablation::SpatialOnly,
            AblationArg::TemporalOnly => Ablation::TemporalOnly,
            AblationArg::LeftRightOnly => Ablation::LeftRightOnly,
            AblationArg::TopBottomOnly => Ablation::TopBottomOnly,
            AblationArg::ConcatFusion => Ablation::ConcatFusion,
            AblationArg::NoGru => Ablation::NoGru,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory for `metrics.jsonl`, `last.json` and `best.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset root; overrides the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Train the flow stream (10 input channels).
    #[arg(long)]
    pub flow: bool,
    #[arg(long, value_enum, default_value = "full")]
    pub ablation: AblationArg,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Continue from a checkpoint written by the same config.
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
    /// Save the resolved config next to the checkpoints.
    #[arg(long)]
    pub save_config: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Dataset root; the one recorded in the checkpoint when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Write final-head logits as JSON lines.
    #[arg(long, value_name = "PATH")]
    pub export_logits: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("mode").required(true).args(["alpha", "sweep"]))]
pub struct FuseArgs {
    #[arg(long, value_name = "PATH")]
    pub rgb: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub flow: PathBuf,
    /// Weight of the flow logits.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Score every weight in the config's grid.
    #[arg(long)]
    pub sweep: bool,
    /// Write the sweep report as JSON.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ShapesArgs {
    /// Full-scale dimensions, compared against the reference table.
    #[arg(long)]
    pub full_scale: bool,
}

/// Why a command failed, and so which exit status it maps to.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Invalid(_) => EXIT_INVALID,
            Failure::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric { .. } => Failure::Numeric(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

type Outcome = std::result::Result<String, Failure>;

/// Parses `argv` (program name first), runs the command and returns the exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Eval(a) => eval_cmd(a),
        Command::Fuse(a) => fuse_cmd(cli, a),
        Command::Shapes(a) => shapes_cmd(cli, a),
        Command::Gradcheck => gradcheck_cmd(cli),
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Outcome {
    let cfg = load_config(cli)?;
    let mut spec = cfg.data.synthetic.clone();
    if let Some(n) = a.clips_per_class {
        spec.clips_per_class = n;
    }
    let root = a.out.clone().unwrap_or(cfg.data.root);
    let (mut clips, manifest) = generate_synthetic(&spec)?;
    if a.flow {
        for (_, clip) in &mut clips {
            *clip = pseudo_flow(clip)?;
        }
    }
    write_dataset(&root, &clips, &manifest)?;
    Ok(format!(
        "wrote {} clips ({} classes, {} channels) to {}\n",
        clips.len(),
        manifest.num_classes(),
        if a.flow { 10 } else { 3 },
        root.display()
    ))
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Outcome {
    let mut cfg = load_config(cli)?.with_ablation(a.ablation.into());
    if let Some(root) = &a.data {
        cfg.data.root = root.clone();
    }
    if a.flow {
        cfg = cfg.flow_stream(cfg.data.root.clone());
    }
    if let Some(e) = a.epochs {
        cfg.schedule.epochs = e;
    }
    cfg.validate()?;
    if a.save_config {
        fs::create_dir_all(&a.out).map_err(|e| Failure::Invalid(format!("{}: {e}", a.out.display())))?;
        write_text(&a.out.join("config.json"), &cfg.to_json())?;
    }
    let opts = TrainOptions {
        out_dir: a.out.clone(),
        deterministic: cli.deterministic,
        resume: a.resume.clone(),
        stop_after: None,
    };
    let total = cfg.schedule.epochs;
    let outcome = train(&cfg, &opts, |e| {
        println!(
            "epoch {}/{total}  lr {:.3e}  loss {:.4}  top1 {:.2}  top5 {:.2}",
            e.epoch, e.lr, e.train_loss, e.metrics.top1_pi, e.metrics.top5_pi
        );
    })?;
    let mut out = format!("best top1 {:.2}\n", outcome.best_top1);
    let _ = writeln!(out, "checkpoint {}", outcome.last_checkpoint.display());
    Ok(out)
}

fn metrics_text(m: &Metrics) -> String {
    format!(
        "top1_pi {}\ntop5_pi {}\ntop1_pc {}\ntop5_pc {}\n",
        m.top1_pi, m.top5_pi, m.top1_pc, m.top5_pc
    )
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn eval_cmd(a: &EvalArgs) -> Outcome {
    let (metrics, export) = evaluate_checkpoint(&a.checkpoint, a.data.as_deref(), a.split.into())?;
    if let Some(path) = &a.export_logits {
        export.save(path)?;
    }
    Ok(metrics_text(&metrics))
}

fn fuse_cmd(cli: &Cli, a: &FuseArgs) -> Outcome {
    let rgb = LogitExport::load(&a.rgb)?;
    let flow = LogitExport::load(&a.flow)?;
    if let Some(alpha) = a.alpha {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Failure::Invalid(format!(
                "alpha must be finite and non-negative, got {alpha}"
            )));
        }
        return Ok(metrics_text(&fuse_at(&rgb, &flow, alpha)?));
    }
    let cfg = load_config(cli)?;
    let mut report = alpha_sweep(&rgb, &flow, &cfg.fusion.grid)?;
    report.inputs = vec![a.rgb.display().to_string(), a.flow.display().to_string()];
    report.config_hash = cli.config.is_some().then(|| cfg.hash());
    if let Some(path) = &a.report {
        write_text(path, &report.to_json())?;
    }
    Ok(report.to_table())
}

fn shapes_cmd(cli: &Cli, a: &ShapesArgs) -> Outcome {
    if a.full_scale {
        let report = full_scale_report()?;
        let text = report.to_text();
        if !report.mismatches().is_empty() {
            return Err(Failure::Invalid(format!("shape table mismatch\n{text}")));
        }
        return Ok(text);
    }
    let cfg = load_config(cli)?;
    let mut out = String::new();
    for (name, shape) in propagate(&cfg.model, cfg.data.frames)? {
        let _ = writeln!(out, "{name}: {}", shape_string(&shape));
    }
    Ok(out)
}

fn gradcheck_cmd(cli: &Cli) -> Outcome {
    let reports = checks::run_suite(cli.seed.unwrap_or(0))?;
    let mut out = String::new();
    let mut worst: f64 = 0.0;
    for r in &reports {
        let _ = writeln!(
            out,
            "{:<20} max rel error {:.3e}  ({} coordinates, {} points)",
            r.name, r.max_rel_error, r.coordinates, r.points
        );
        worst = worst.max(r.max_rel_error);
    }
    let _ = writeln!(out, "worst {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})");
    if worst <= GRADCHECK_TOLERANCE {
        Ok(out)
    } else {
        Err(Failure::Numeric(format!("gradient check failed\n{out}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_invalid() {
        assert_eq!(dispatch(["stepnet", "shapes", "--bogus"]), EXIT_INVALID);
        assert_eq!(dispatch(["stepnet"]), EXIT_INVALID);
    }

    #[test]
    fn fuse_requires_a_mode() {
        let r = Cli::try_parse_from(["stepnet", "fuse", "--rgb", "a", "--flow", "b"]);
        assert!(r.is_err());
        let r = Cli::try_parse_from([
            "stepnet", "fuse", "--rgb", "a", "--flow", "b", "--alpha", "0.4", "--sweep",
        ]);
        assert!(r.is_err());
    }

    #[test]
    fn numeric_errors_map_to_two() {
        let f: Failure = Error::Numeric {
            op: "train",
            msg: "loss is NaN".into(),
        }
        .into();
        assert_eq!(f.code(), EXIT_NUMERIC);
        let f: Failure = Error::Config("bad".into()).into();
        assert_eq!(f.code(), EXIT_INVALID);
    }

    #[test]
    fn global_flags_follow_the_subcommand() {
        let cli = Cli::try_parse_from(["stepnet", "gradcheck", "--seed", "3", "--deterministic"]).unwrap();
        assert_eq!(cli.seed, Some(3));
        assert!(cli.deterministic);
    }
}
