//! Command-line surface for the experiment drivers and the gradient checker.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on numeric
//! failures while running.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use tbnorm::cil::TrainConfig;
use tbnorm::experiments::{
    exp_ablation, exp_bias_check, exp_cil_run, exp_oracle, exp_toy_gaussian, RunConfig,
};
use tbnorm::gradcheck::{check_norm_layer, LayerCheck, DEFAULT_STEP, DEFAULT_THRESHOLD};
use tbnorm::norm::{BatchComposition, NormKind};

#[derive(Parser)]
#[command(
    name = "tbnorm",
    about = "Normalization-layer experiments for exemplar-based class-incremental learning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Accumulate running statistics from imbalanced Gaussian batches and
    /// compare against population values.
    ToyGaussian(RunArgs),
    /// Monte Carlo check of the batch-mean expectation gap.
    BiasCheck(RunArgs),
    /// Full class-incremental run with the chosen normalization layer.
    CilRun(RunArgs),
    /// Task-balanced component ablation sweep.
    Ablation(RunArgs),
    /// Statistics/affine repair oracles on a trained baseline.
    Oracle(RunArgs),
    /// Finite-difference gradient check of one normalization layer.
    Gradcheck(GradArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Flat key-value config file (TOML); explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Normalization layer: bn | gn | cn | tbbn.
    #[arg(long)]
    norm: Option<String>,
    /// Group count for gn/cn.
    #[arg(long)]
    groups: Option<usize>,
    /// Current-task rows per batch (B_c).
    #[arg(long)]
    bc: Option<usize>,
    /// Exemplar rows per batch (B_p).
    #[arg(long)]
    bp: Option<usize>,
    /// Number of tasks.
    #[arg(long)]
    tasks: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Bessel factor on the running variance: on | off.
    #[arg(long)]
    bessel: Option<String>,
}

#[derive(Args)]
struct GradArgs {
    /// Layer to check: bn | gn | cn | tbbn.
    #[arg(long, default_value = "bn")]
    layer: String,
    /// Input shape N,C,H,W.
    #[arg(long, default_value = "12,6,3,3")]
    shape: String,
    /// Task index for the batch composition.
    #[arg(long, default_value_t = 1)]
    t: usize,
    /// Current-task rows (B_c); must match N together with --bp when t > 1.
    #[arg(long)]
    bc: Option<usize>,
    /// Exemplar rows (B_p).
    #[arg(long)]
    bp: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Group count for gn/cn.
    #[arg(long, default_value_t = 2)]
    groups: usize,
}

/// Flat key-value mirror of the run flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<Vec<u64>>,
    norm: Option<String>,
    groups: Option<usize>,
    bc: Option<usize>,
    bp: Option<usize>,
    tasks: Option<usize>,
    out: Option<String>,
    bessel: Option<String>,
}

enum CliError {
    Config(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numeric(m) => m,
        }
    }
}

fn parse_norm(name: &str) -> Result<NormKind, CliError> {
    NormKind::parse(name)
        .ok_or_else(|| CliError::Config(format!("unknown normalization kind '{name}'")))
}

fn parse_bessel(value: &str) -> Result<bool, CliError> {
    match value {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(CliError::Config(format!(
            "--bessel takes on|off, got '{other}'"
        ))),
    }
}

fn resolve_run_config(name: &str, args: &RunArgs) -> Result<RunConfig, CliError> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };

    let mut train = TrainConfig::default();
    if let Some(norm) = args.norm.as_deref().or(file.norm.as_deref()) {
        train.norm = parse_norm(norm)?;
    }
    if let Some(groups) = args.groups.or(file.groups) {
        if groups == 0 {
            return Err(CliError::Config("--groups must be positive".to_string()));
        }
        train.groups = groups;
    }
    if let Some(bc) = args.bc.or(file.bc) {
        if bc == 0 {
            return Err(CliError::Config("--bc must be positive".to_string()));
        }
        train.batch_current = bc;
    }
    if let Some(bp) = args.bp.or(file.bp) {
        train.batch_exemplar = bp;
    }
    if let Some(tasks) = args.tasks.or(file.tasks) {
        if tasks == 0 {
            return Err(CliError::Config("--tasks must be positive".to_string()));
        }
        train.tasks = tasks;
    }
    if let Some(bessel) = args.bessel.as_deref().or(file.bessel.as_deref()) {
        train.bessel = parse_bessel(bessel)?;
    }

    let seeds = args
        .seed
        .clone()
        .or(file.seed)
        .unwrap_or_else(|| vec![1, 2, 3]);
    if seeds.is_empty() {
        return Err(CliError::Config("at least one seed is required".to_string()));
    }
    let out_dir = args
        .out
        .clone()
        .or_else(|| file.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out").join(name));

    Ok(RunConfig::new(name, train, out_dir, seeds))
}

fn run_experiment(name: &str, args: &RunArgs) -> Result<(), CliError> {
    let cfg = resolve_run_config(name, args)?;
    let numeric = |e: tbnorm::Error| CliError::Numeric(format!("{name} failed: {e}"));
    match name {
        "toy-gaussian" => {
            let report = exp_toy_gaussian(&cfg).map_err(numeric)?;
            for seed in &report.per_seed {
                println!(
                    "seed {}: task-balanced layer closer to the population mean on {}/{} dimensions",
                    seed.seed, seed.dims_tbbn_better_mean, report.dims
                );
            }
        }
        "bias-check" => {
            let report = exp_bias_check(&cfg).map_err(numeric)?;
            for p in &report.points {
                println!(
                    "B_c={:2} B_p={:2} t={}: derived gap {:+.4}, measured {:+.4} (se {:.4})",
                    p.b_c, p.b_p, p.tasks, p.derived_gap[0], p.measured_gap[0], p.standard_error[0]
                );
            }
        }
        "cil-run" => {
            let report = exp_cil_run(&cfg).map_err(numeric)?;
            println!(
                "{}: final {:.4}, average {:.4}, forgetting {:.4}, learning {:.4}",
                report.norm,
                report.mean_final_accuracy,
                report.mean_average_accuracy,
                report.mean_forgetting,
                report.mean_learning_accuracy
            );
        }
        "ablation" => {
            let report = exp_ablation(&cfg).map_err(numeric)?;
            println!("chance level {:.4}", report.chance_level);
            for row in &report.rows {
                println!(
                    "{:6}: final {:.4}, average {:.4}",
                    row.name, row.mean_final_accuracy, row.mean_average_accuracy
                );
            }
        }
        "oracle" => {
            let report = exp_oracle(&cfg).map_err(numeric)?;
            println!(
                "ft {:.4}, stats-only {:.4}, stats+affine {:.4}, joint {:.4}",
                report.mean_ft, report.mean_stats_only, report.mean_stats_affine, report.mean_joint
            );
        }
        _ => unreachable!("subcommand names are fixed"),
    }
    println!("outputs written to {}", cfg.out_dir.display());
    Ok(())
}

fn run_gradcheck(args: &GradArgs) -> Result<(), CliError> {
    let layer = parse_norm(&args.layer)?;
    let dims: Vec<usize> = args
        .shape
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Config(format!("bad --shape '{}': {e}", args.shape)))?;
    let [n, c, h, w] = match dims[..] {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(CliError::Config("--shape needs N,C,H,W".to_string())),
    };
    let comp = if args.t <= 1 {
        BatchComposition::single_task(n)
    } else {
        let bc = args.bc.ok_or_else(|| {
            CliError::Config("--bc is required for t > 1".to_string())
        })?;
        let bp = args.bp.ok_or_else(|| {
            CliError::Config("--bp is required for t > 1".to_string())
        })?;
        if bc + bp != n {
            return Err(CliError::Config(format!(
                "--bc {bc} + --bp {bp} must equal N = {n}"
            )));
        }
        BatchComposition::new(bc, bp, args.t)
    };
    let mut check = LayerCheck::new(layer, [n, c, h, w], comp, args.seed);
    check.groups = args.groups;
    check.step = DEFAULT_STEP;
    check.threshold = DEFAULT_THRESHOLD;
    let report = check_norm_layer(&check)
        .map_err(|e| CliError::Numeric(format!("gradient check failed to run: {e}")))?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Numeric(format!("cannot serialize report: {e}")))?;
    println!("{json}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::ToyGaussian(args) => run_experiment("toy-gaussian", args),
        Command::BiasCheck(args) => run_experiment("bias-check", args),
        Command::CilRun(args) => run_experiment("cil-run", args),
        Command::Ablation(args) => run_experiment("ablation", args),
        Command::Oracle(args) => run_experiment("oracle", args),
        Command::Gradcheck(args) => run_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}
