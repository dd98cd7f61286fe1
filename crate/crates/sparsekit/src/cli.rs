//! `sparsekit` command line: train, prune, sweep, analyze, compare.
//!
//! Exit codes: 0 success, 1 invalid configuration or arguments naming a
//! field, 2 runtime failure, 64 usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sparsekit_core::pruning::{apply_prune, magnitude_prune_mask};
use sparsekit_core::{Granularity, Network};

use crate::checkpoint;
use crate::config::{parse_fractions, ExperimentConfig};
use crate::error::{Error, Result};
use crate::harness::{self, AnalysisOptions};
use crate::report::{self, CsvSink};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "sparsekit", version, about = "Targeted dropout, magnitude pruning and pruning diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network; writes config.json, metrics.csv and checkpoint.tdck
    Train(TrainArgs),
    /// Magnitude-prune a checkpoint at one fraction
    Prune(PruneArgs),
    /// Test accuracy of a checkpoint over a grid of prune fractions
    Sweep(SweepArgs),
    /// Second-order loss-change estimate and dependence block of a checkpoint
    Analyze(AnalyzeArgs),
    /// Random pruning at initialisation vs ramping targeted dropout
    Compare(CompareArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Criterion {
    Weight,
    Unit,
}

impl From<Criterion> for Granularity {
    fn from(c: Criterion) -> Self {
        match c {
            Criterion::Weight => Granularity::Weight,
            Criterion::Unit => Granularity::Unit,
        }
    }
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON experiment config (defaults apply to absent keys)
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override the config seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override a config key, e.g. --set gamma=0.5 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Rescale surviving masked elements by the inverse keep probability
    #[arg(long)]
    pub scale_dropout: bool,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// CIFAR-10 binary directory [default: $SPARSEKIT_DATA]
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArg,
    /// Parent of the per-run directory (named by config hash)
    #[arg(long, value_name = "DIR", default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    /// checkpoint.tdck inside a run directory
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Pruning criterion [default: the run's criterion]
    #[arg(long, value_enum)]
    pub criterion: Option<Criterion>,
    /// Fraction to prune from every prunable matrix
    #[arg(long)]
    pub fraction: f64,
    /// Output directory [default: the checkpoint's directory]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// checkpoint.tdck inside a run directory
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Pruning criterion [default: the run's criterion]
    #[arg(long, value_enum)]
    pub criterion: Option<Criterion>,
    /// Fractions: "0,0.25,0.5", "0:0.9:0.1" or "0,0.1,...,0.9" [default: the run's prune_fractions]
    #[arg(long)]
    pub fractions: Option<String>,
    #[command(flatten)]
    pub data: DataArg,
    /// Output directory [default: the checkpoint's directory]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// checkpoint.tdck inside a run directory
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Criterion defining the deleted weights
    #[arg(long, value_enum, default_value = "weight")]
    pub criterion: Criterion,
    /// Prune fraction defining the deleted weights
    #[arg(long, default_value_t = 0.75)]
    pub fraction: f64,
    /// Finite-difference step of the Hessian-vector product
    #[arg(long, default_value_t = 1e-4)]
    pub hvp_eps: f64,
    /// Dependence-block indices drawn from the kept weights
    #[arg(long, default_value_t = 50)]
    pub block_keep: usize,
    /// Dependence-block indices drawn from the pruned weights
    #[arg(long, default_value_t = 150)]
    pub block_prune: usize,
    /// Upper bound on block_keep + block_prune
    #[arg(long, default_value_t = 400)]
    pub max_block_indices: usize,
    /// Use only the first N test records
    #[arg(long, value_name = "N")]
    pub eval_subset: Option<usize>,
    #[command(flatten)]
    pub data: DataArg,
    /// Output directory [default: the checkpoint's directory]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Fractions to compare [default: the config's prune_fractions]
    #[arg(long)]
    pub fractions: Option<String>,
    #[command(flatten)]
    pub data: DataArg,
    /// Parent of the per-run directory
    #[arg(long, value_name = "DIR", default_value = "runs")]
    pub out: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_INVALID
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Prune(a) => prune(a),
        Command::Sweep(a) => sweep(a),
        Command::Analyze(a) => analyze(a),
        Command::Compare(a) => compare(a),
    }
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
pub fn resolve_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for o in &args.overrides {
        cfg.set(o)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.scale_dropout {
        cfg.scale_dropout = true;
    }
    cfg.validate()?;
    let file = args
        .config
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "(none)".into());
    eprintln!(
        "config: defaults < {file} < --set {:?} < flags; hash {}",
        args.overrides,
        cfg.hash()
    );
    eprintln!("{}", serde_json::to_string(&cfg).expect("config serialises"));
    Ok(cfg)
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json() + "\n").map_err(|e| Error::io(&path, e))
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.config)?;
    let data = harness::load_data(&cfg, a.data.data.as_deref())?;
    let hash = cfg.hash();
    let dir = a.out.join(&hash);
    report::ensure_dir(&dir)?;
    write_config(&dir, &cfg)?;
    eprintln!(
        "data: {} train / {} test samples of shape {:?}",
        data.train.len(),
        data.test.len(),
        data.train.sample_shape()
    );
    let mut sink = CsvSink::create(&dir.join("metrics.csv"), &report::METRICS_HEADER)?;
    let run = harness::train(&cfg, &data, None, |row| {
        eprintln!(
            "epoch {:>4}  loss {:.5}  test_acc {:.4}  gamma {:.4}  alpha {:.4}",
            row.epoch, row.train_loss, row.test_acc, row.gamma, row.alpha
        );
        sink.row(&report::metrics_fields(&hash, row))
    })?;
    checkpoint::save(&run.net, &dir.join("checkpoint.tdck"))?;
    println!("{}", dir.display());
    Ok(())
}

/// Loads `checkpoint` together with the `config.json` beside it.
pub fn open_run(ck_path: &Path) -> Result<(ExperimentConfig, Network)> {
    let dir = ck_path.parent().unwrap_or(Path::new("."));
    let cfg = ExperimentConfig::from_file(&dir.join("config.json"))?;
    let mut net = harness::init_network(&cfg)?;
    let ck = checkpoint::load(ck_path)?;
    checkpoint::restore(&ck, &mut net, ck_path)?;
    Ok((cfg, net))
}

fn output_dir(out: Option<PathBuf>, ck: &Path) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| ck.parent().unwrap_or(Path::new(".")).to_path_buf());
    report::ensure_dir(&dir)?;
    Ok(dir)
}

fn check_fraction(f: f64) -> Result<()> {
    if (0.0..=1.0).contains(&f) {
        Ok(())
    } else {
        Err(Error::invalid("fraction", format!("{f} is outside [0, 1]")))
    }
}

fn fractions_arg(text: &str) -> Result<Vec<f64>> {
    let fr = parse_fractions(text).map_err(|m| Error::invalid("fractions", m))?;
    for &f in &fr {
        check_fraction(f).map_err(|_| Error::invalid("fractions", format!("{f} is outside [0, 1]")))?;
    }
    Ok(fr)
}

fn prune(a: PruneArgs) -> Result<()> {
    check_fraction(a.fraction)?;
    let (cfg, mut net) = open_run(&a.checkpoint)?;
    let criterion: Granularity = a.criterion.map(Into::into).unwrap_or(cfg.criterion.into());
    let dir = output_dir(a.out, &a.checkpoint)?;
    let mask = magnitude_prune_mask(&net, criterion, a.fraction)?;
    let report = apply_prune(&mut net, &mask)?;
    let stem = format!("pruned-{}-{}", criterion.as_str(), a.fraction);
    checkpoint::save(&net, &dir.join(format!("{stem}.tdck")))?;
    report::write_sparsity(&dir.join(format!("{stem}-sparsity.csv")), &cfg.hash(), &report)?;
    eprintln!(
        "density {:.6} over prunable matrices ({:.6} including logits)",
        report.global_density(),
        report.global_density_with_logits()
    );
    println!("{}", dir.join(format!("{stem}.tdck")).display());
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let (cfg, net) = open_run(&a.checkpoint)?;
    let criterion: Granularity = a.criterion.map(Into::into).unwrap_or(cfg.criterion.into());
    let fractions = match &a.fractions {
        Some(t) => fractions_arg(t)?,
        None => cfg.prune_fractions.clone(),
    };
    let data = harness::load_data(&cfg, a.data.data.as_deref())?;
    let rows = harness::sweep(&net, &data.test, criterion, &fractions)?;
    let dir = output_dir(a.out, &a.checkpoint)?;
    report::write_sweep(&dir.join("sweep.csv"), &cfg.hash(), criterion, &rows)?;
    for r in &rows {
        eprintln!(
            "fraction {:.4}  test_acc {:.4}  density {:.4}",
            r.prune_fraction, r.test_accuracy, r.density_achieved
        );
    }
    println!("{}", dir.join("sweep.csv").display());
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    check_fraction(a.fraction)?;
    let (cfg, net) = open_run(&a.checkpoint)?;
    let data = harness::load_data(&cfg, a.data.data.as_deref())?;
    let opts = AnalysisOptions {
        criterion: a.criterion.into(),
        fraction: a.fraction,
        hvp_eps: a.hvp_eps,
        block_keep: a.block_keep,
        block_prune: a.block_prune,
        max_block_indices: a.max_block_indices,
        eval_subset: a.eval_subset,
    };
    let rep = harness::analyze(&net, &data.test, &cfg, &opts)?;
    let dir = output_dir(a.out, &a.checkpoint)?;
    let hash = cfg.hash();
    report::write_analysis(&dir.join("analysis.csv"), &hash, &rep)?;
    if let Some(block) = &rep.block {
        report::write_dependence_csv(&dir.join("dependence.csv"), &hash, block)?;
        report::write_pgm(&dir.join("dependence.pgm"), block)?;
        eprintln!(
            "{}; prune block mass {:.6e}, asymmetry {:.2e}",
            report::block_protocol(block),
            block.prune_block_mass(),
            block.asymmetry
        );
    }
    eprintln!(
        "delta_e {:.6e} (gradient {:.6e}, curvature {:.6e}); acc {:.4} -> {:.4}",
        rep.delta_e, rep.gradient_term, rep.curvature_term, rep.unpruned_acc, rep.pruned_acc
    );
    println!("{}", dir.join("analysis.csv").display());
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.config)?;
    if let Some(t) = &a.fractions {
        cfg.prune_fractions = fractions_arg(t)?;
    }
    let data = harness::load_data(&cfg, a.data.data.as_deref())?;
    let dir = a.out.join(format!("compare-{}", cfg.hash()));
    report::ensure_dir(&dir)?;
    write_config(&dir, &cfg)?;
    let rows = harness::compare_random_vs_ramping(&cfg, &data, &cfg.prune_fractions)?;
    report::write_compare(&dir.join("compare.csv"), &cfg.hash(), cfg.seed, cfg.granularity.into(), &rows)?;
    for r in &rows {
        eprintln!(
            "fraction {:.4}  random-prune {:.4}  ramping-td {:.4}",
            r.fraction, r.random_prune_acc, r.ramping_acc
        );
    }
    println!("{}", dir.join("compare.csv").display());
    Ok(())
}
