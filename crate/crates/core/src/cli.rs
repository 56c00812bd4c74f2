//! Command-line front end. Settings resolve as flags, then the optional JSON
//! config file, then built-in defaults.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::check::{run_checks, CheckConfig, CheckLevel, CheckTarget, Fault};
use crate::data::{Manifest, ProtocolConfig};
use crate::error::{Error, Result};
use crate::experiment::{
    benchmark_csv, run_benchmark, run_toy, run_uci, write_result, ExperimentResult, UciOptions,
    BENCHMARK_WIDTHS, TABLE_HEADER, TOY_DROPOUT,
};
use crate::moment_core::CovarianceMode;
use crate::network::{Architecture, HeadKind};
use crate::training::TrainConfig;

#[derive(Debug, Parser)]
#[command(
    name = "mpgelu",
    version,
    about = "Moment-propagating Bayesian neural networks with MP-GELU and ReLU"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train both architectures on the toy regression and write prediction bands as CSV.
    Toy(ToyArgs),
    /// Grid search plus the repeated-split train/test protocol on a manifest dataset.
    Uci(UciArgs),
    /// Time matched forward passes and count transcendental calls.
    Benchmark(BenchmarkArgs),
    /// Run the Monte-Carlo oracle and finite-difference suites.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    /// Directory for toy_train.csv and the per-architecture prediction files.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Seeds the data, the initialization and the batch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training epochs [default: 1000].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// SGD learning rate [default: 0.1].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Mini-batch size [default: 100].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Dropout rate of both networks [default: 0.001].
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    #[value(name = "mp_gelu")]
    MpGelu,
    Relu,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CovArg {
    Full,
    Diag,
}

impl From<CovArg> for CovarianceMode {
    fn from(c: CovArg) -> Self {
        match c {
            CovArg::Full => CovarianceMode::Full,
            CovArg::Diag => CovarianceMode::Diagonal,
        }
    }
}

#[derive(Debug, Args)]
pub struct UciArgs {
    /// JSON manifest mapping dataset names to CSV files and expected shapes.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Dataset name, comma-separated names, or `all`.
    #[arg(long)]
    pub dataset: String,
    /// Architecture to run [default: both].
    #[arg(long, value_enum)]
    pub arch: Option<ArchArg>,
    /// Covariance mode [default: full].
    #[arg(long, value_enum)]
    pub cov: Option<CovArg>,
    /// Output units of the head: 2 (mean and log-variance) or 1.
    #[arg(long)]
    pub head: Option<usize>,
    /// Run every head × covariance variant for the chosen architectures.
    #[arg(long)]
    pub all_variants: bool,
    /// Seeds initialization and batch order; also the split seed unless the config sets one [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for splits and grid points [default: 1].
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Directory for per-run JSON and the table CSVs.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Training epochs [default: 500].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// SGD learning rate [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Mini-batch size [default: 256].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Fixed dropout rate; skips the grid search.
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Random train/test splits [default: 20].
    #[arg(long)]
    pub repeats: Option<usize>,
    /// JSON file with any of the run settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Hidden widths, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = BENCHMARK_WIDTHS.to_vec())]
    pub widths: Vec<usize>,
    #[arg(long, value_enum, default_value = "full")]
    pub cov: CovArg,
    /// Timed repetitions per width; the median is reported.
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the CSV to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// `quick` (seconds) or `full` (10^6 samples, a few minutes).
    #[arg(long, default_value = "quick")]
    pub level: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace one analytic formula with a known-wrong variant.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// Settings accepted in the `--config` file of `uci`. Every field is optional.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub arch: Option<String>,
    pub cov: Option<CovarianceMode>,
    pub head: Option<usize>,
    pub seed: Option<u64>,
    pub split_seed: Option<u64>,
    pub jobs: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub dropout: Option<f64>,
    pub repeats: Option<usize>,
    pub rates: Option<Vec<f64>>,
    pub hidden_width: Option<usize>,
    pub test_frac: Option<f64>,
    pub val_frac: Option<f64>,
    pub timing_repetitions: Option<usize>,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn parse_arch(s: &str) -> Result<ArchArg> {
    ArchArg::from_str(s, true).map_err(|_| Error::invalid(format!("unknown architecture {s:?}")))
}

/// Fully resolved `uci` settings.
#[derive(Clone, Debug, PartialEq)]
pub struct UciPlan {
    pub datasets: Vec<String>,
    pub variants: Vec<(Architecture, CovarianceMode, HeadKind)>,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
    pub dropout: Option<f64>,
    pub timing_repetitions: usize,
}

pub fn resolve_uci(args: &UciArgs, manifest: &Manifest) -> Result<UciPlan> {
    let file = match &args.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let defaults = TrainConfig::uci(seed);
    let train = TrainConfig {
        learning_rate: args.lr.or(file.lr).unwrap_or(defaults.learning_rate),
        epochs: args.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        batch_size: args.batch.or(file.batch).unwrap_or(defaults.batch_size),
        seed,
    };
    train.validate()?;
    let base = ProtocolConfig::default();
    let protocol = ProtocolConfig {
        repeats: args.repeats.or(file.repeats).unwrap_or(base.repeats),
        test_frac: file.test_frac.unwrap_or(base.test_frac),
        val_frac: file.val_frac.unwrap_or(base.val_frac),
        rates: file.rates.clone().unwrap_or(base.rates),
        hidden_width: file.hidden_width.unwrap_or(base.hidden_width),
        split_seed: file.split_seed.unwrap_or(seed),
        jobs: args.jobs.or(file.jobs).unwrap_or(base.jobs),
    };

    let arch = match (args.arch, &file.arch) {
        (Some(a), _) => a,
        (None, Some(s)) => parse_arch(s)?,
        (None, None) => ArchArg::Both,
    };
    let archs = match arch {
        ArchArg::MpGelu => vec![Architecture::MpGelu],
        ArchArg::Relu => vec![Architecture::Relu],
        ArchArg::Both => vec![Architecture::MpGelu, Architecture::Relu],
    };
    let variants_for =
        |mode: CovarianceMode, head: HeadKind| archs.iter().map(move |&a| (a, mode, head));
    let variants: Vec<_> = if args.all_variants {
        let mut v = Vec::new();
        for head in [HeadKind::Heteroscedastic2, HeadKind::Homoscedastic1] {
            for mode in [CovarianceMode::Full, CovarianceMode::Diagonal] {
                v.extend(variants_for(mode, head));
            }
        }
        v
    } else {
        let mode = args
            .cov
            .map(CovarianceMode::from)
            .or(file.cov)
            .unwrap_or(CovarianceMode::Full);
        let head = HeadKind::from_outputs(args.head.or(file.head).unwrap_or(2))?;
        variants_for(mode, head).collect()
    };

    let datasets = if args.dataset == "all" {
        manifest.datasets.keys().cloned().collect()
    } else {
        args.dataset
            .split(',')
            .map(|s| s.trim().to_string())
            .collect()
    };
    Ok(UciPlan {
        datasets,
        variants,
        train,
        protocol,
        dropout: args.dropout.or(file.dropout),
        timing_repetitions: file.timing_repetitions.unwrap_or(5),
    })
}

fn cmd_toy(args: &ToyArgs, out: &mut dyn Write) -> Result<i32> {
    let d = TrainConfig::toy(args.seed);
    let tc = TrainConfig {
        learning_rate: args.lr.unwrap_or(d.learning_rate),
        epochs: args.epochs.unwrap_or(d.epochs),
        batch_size: args.batch.unwrap_or(d.batch_size),
        seed: args.seed,
    };
    tc.validate()?;
    let runs = run_toy(&args.out, &tc, args.dropout.unwrap_or(TOY_DROPOUT))?;
    for r in &runs {
        writeln!(
            out,
            "{}: mean pred_std |x|>=0.6 {:.4}, |x|<=0.4 {:.4}; aleatoric/|sin x| correlation {:.3}",
            r.architecture.as_str(),
            r.outer_std(),
            r.inner_std(),
            r.aleatoric_correlation()
        )
        .map_err(|e| Error::io("stdout", e))?;
    }
    Ok(0)
}

/// Runs a resolved plan and returns every result in order.
pub fn execute_uci(
    plan: &UciPlan,
    manifest: &Manifest,
    out_dir: &Path,
) -> Result<Vec<ExperimentResult>> {
    let mut results = Vec::new();
    for name in &plan.datasets {
        let ds = manifest.load_dataset(name)?;
        for &(arch, mode, head) in &plan.variants {
            let opts = UciOptions {
                arch,
                mode,
                head,
                train: plan.train,
                protocol: plan.protocol.clone(),
                dropout: plan.dropout,
                timing_repetitions: plan.timing_repetitions,
            };
            let result = run_uci(&ds, &opts)?;
            write_result(out_dir, &result)?;
            results.push(result);
        }
    }
    Ok(results)
}

fn cmd_uci(args: &UciArgs, out: &mut dyn Write) -> Result<i32> {
    let manifest = Manifest::load(&args.manifest)?;
    let plan = resolve_uci(args, &manifest)?;
    // Fail on missing or misshaped data before any training starts.
    for name in &plan.datasets {
        manifest.load_dataset(name)?;
    }
    let results = execute_uci(&plan, &manifest, &args.out)?;
    let io = |e| Error::io("stdout", e);
    writeln!(out, "variant,{TABLE_HEADER}").map_err(io)?;
    for r in &results {
        writeln!(out, "{},{}", r.variant_stem(), r.table_row()).map_err(io)?;
    }
    Ok(0)
}

fn cmd_benchmark(args: &BenchmarkArgs, out: &mut dyn Write) -> Result<i32> {
    let rows = run_benchmark(&args.widths, args.cov.into(), args.repetitions, args.seed)?;
    let csv = benchmark_csv(&rows);
    if let Some(path) = &args.out {
        std::fs::write(path, &csv).map_err(|e| Error::io(path, e))?;
    }
    out.write_all(csv.as_bytes())
        .map_err(|e| Error::io("stdout", e))?;
    Ok(0)
}

fn cmd_check(args: &CheckArgs, out: &mut dyn Write) -> Result<i32> {
    let level: CheckLevel = args.level.parse()?;
    let target = match &args.inject_fault {
        Some(f) => CheckTarget::with_fault(f.parse::<Fault>()?),
        None => CheckTarget::default(),
    };
    let report = run_checks(&target, &CheckConfig::for_level(level, args.seed))?;
    write!(out, "{report}").map_err(|e| Error::io("stdout", e))?;
    Ok(if report.all_passed() { 0 } else { 1 })
}

/// Runs a parsed command, writing its report to `out`. Returns the process exit code.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Toy(a) => cmd_toy(a, out),
        Command::Uci(a) => cmd_uci(a, out),
        Command::Benchmark(a) => cmd_benchmark(a, out),
        Command::Check(a) => cmd_check(a, out),
    }
}
