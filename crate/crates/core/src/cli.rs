//! Command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure (including a failed check),
//! 2 usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::datakit::{generate, Dataset, GeneratorConfig};
use crate::error::{Error, Result};
use crate::fusion::Task;
use crate::harness::{
    curves_from_results, format_table, run_cv, table_csv, write_results, CvResult, RunConfig,
    Variant,
};
use crate::numkit::OpKind;
use crate::verify::{model_suite, op_suite, oracle_suite};

#[derive(Debug, Parser)]
#[command(
    name = "umeml",
    version,
    about = "Prototype-based multimodal pathology/genomics learning: data generation, \
             cross-validated training, ablations, baselines and verification suites",
    after_help = "Seeds: every --seed flag falls back to the UMEML_SEED environment \
                  variable, then to 0. Nothing reads the wall clock."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic planted-signal cohort.
    GenData(GenDataArgs),
    /// Cross-validated training of one variant.
    Train(TrainArgs),
    /// Run the full model and its three ablations (no_modularity, bifusion, no_registers).
    Ablate(SuiteArgs),
    /// Run the concat, add, path_only and gene_only baselines.
    Baselines(SuiteArgs),
    /// Finite-difference gradient checks for every op and the full model.
    Gradcheck(GradcheckArgs),
    /// Brute-force oracle checks for modularity, ROC-AUC, C-index and time-dependent AUC.
    OracleCheck,
    /// Write ROC / time-dependent AUC point files from a results directory.
    Curves(CurvesArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Number of latent classes.
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Patch feature width.
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    /// Gene-group width.
    #[arg(long = "d-g", default_value_t = 64)]
    pub d_g: usize,
    /// Minimum patches per bag.
    #[arg(long, default_value_t = 32)]
    pub m_min: usize,
    /// Maximum patches per bag.
    #[arg(long, default_value_t = 64)]
    pub m_max: usize,
    /// Gene groups per sample.
    #[arg(long, default_value_t = 6)]
    pub gene_groups: usize,
    /// Shift of the pathology signal cluster along its class direction.
    #[arg(long, default_value_t = 6.0)]
    pub signal_p: f64,
    /// Shift of each gene-group mean along its class direction.
    #[arg(long, default_value_t = 6.0)]
    pub signal_g: f64,
    /// Standard deviation of per-entry Gaussian noise.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Fraction of patches drawn from the signal cluster.
    #[arg(long, default_value_t = 0.2)]
    pub signal_fraction: f64,
    /// Fraction of samples whose modality carries class signal (per modality, >= 0.5).
    #[arg(long, default_value_t = 0.75)]
    pub signal_presence: f64,
    /// Probability that a sample is censored.
    #[arg(long, default_value_t = 0.3)]
    pub censor_rate: f64,
    /// Generator seed.
    #[arg(long, env = "UMEML_SEED", default_value_t = 0)]
    pub seed: u64,
}

impl GenDataArgs {
    pub fn config(&self) -> GeneratorConfig {
        GeneratorConfig {
            n_samples: self.samples,
            n_classes: self.classes,
            d: self.d,
            d_g: self.d_g,
            m_min: self.m_min,
            m_max: self.m_max,
            n_groups: self.gene_groups,
            signal_p: self.signal_p,
            signal_g: self.signal_g,
            noise: self.noise,
            signal_fraction: self.signal_fraction,
            signal_presence: self.signal_presence,
            censor_rate: self.censor_rate,
            seed: self.seed,
            ..GeneratorConfig::default()
        }
    }
}

/// Model and optimization flags shared by every training command.
#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// grading, classification or survival.
    #[arg(long, default_value = "grading")]
    pub task: Task,
    /// Modularity weight for pathology prototypes.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Modularity weight for gene prototypes.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Weight of the modularity term in the total loss.
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    /// K, pathology prototypes.
    #[arg(long, default_value_t = 16)]
    pub prototypes: usize,
    /// N, gene groups (must match the dataset).
    #[arg(long, default_value_t = 6)]
    pub gene_groups: usize,
    /// I, register tokens.
    #[arg(long, default_value_t = 4)]
    pub registers: usize,
    /// Token width (must match the dataset's patch width).
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    /// Attention heads.
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Prototype cross-attention rounds.
    #[arg(long, default_value_t = 2)]
    pub cross_layers: usize,
    /// Pathology self-attention blocks.
    #[arg(long, default_value_t = 2)]
    pub path_layers: usize,
    /// Genomic self-attention blocks.
    #[arg(long, default_value_t = 2)]
    pub gene_layers: usize,
    /// Unified decoder blocks.
    #[arg(long, default_value_t = 2)]
    pub decoder_layers: usize,
    /// Learning rate [default: 1e-3 for grading/classification, 2e-4 for survival].
    #[arg(long)]
    pub lr: Option<f64>,
    /// SGD weight decay.
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f64,
    /// Epochs [default: 10 for grading/classification, 5 for survival].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Cross-validation folds.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Fold f trains with seed (seed + f).
    #[arg(long, env = "UMEML_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Seed of the fold assignment shuffle.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Discrete time bins for survival.
    #[arg(long, default_value_t = 4)]
    pub survival_bins: usize,
    /// Blend weight of the event-only survival likelihood.
    #[arg(long, default_value_t = 0.0)]
    pub uncensored_weight: f64,
    /// Keep self loops in the patch affinity graph.
    #[arg(long)]
    pub keep_self_loops: bool,
    /// Run folds concurrently (results are identical to sequential runs).
    #[arg(long)]
    pub parallel_folds: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl ModelArgs {
    pub fn config(&self, variant: Variant) -> RunConfig {
        RunConfig {
            task: self.task,
            variant,
            prototypes: self.prototypes,
            gene_groups: self.gene_groups,
            registers: self.registers,
            d: self.d,
            cross_layers: self.cross_layers,
            path_self_layers: self.path_layers,
            gene_self_layers: self.gene_layers,
            decoder_layers: self.decoder_layers,
            heads: self.heads,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            lr: self.lr,
            weight_decay: self.weight_decay,
            momentum: 0.0,
            epochs: self.epochs,
            folds: self.folds,
            seed_offset: self.seed,
            split_seed: self.split_seed,
            survival_bins: self.survival_bins,
            uncensored_weight: self.uncensored_weight,
            keep_self_loops: self.keep_self_loops,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// full, no_modularity, no_registers, bifusion, concat, add, path_only or gene_only.
    #[arg(long, default_value = "full")]
    pub variant: Variant,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Flip the sign of one op's backward rule (mutation-test fixture).
    #[arg(long, hide = true, value_parser = parse_op)]
    pub fault: Option<OpKind>,
    /// Skip the whole-model checks.
    #[arg(long)]
    pub ops_only: bool,
}

fn parse_op(s: &str) -> std::result::Result<OpKind, String> {
    OpKind::DIFFERENTIABLE
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| format!("unknown op {s:?}"))
}

#[derive(Debug, Args)]
pub struct CurvesArgs {
    /// Results directory written by train.
    #[arg(long)]
    pub results: PathBuf,
    /// Directory for the point files.
    #[arg(long)]
    pub out: PathBuf,
}

fn run_and_write(
    dataset: &Dataset,
    config: &RunConfig,
    out: &Path,
    parallel: bool,
) -> Result<CvResult> {
    let result = run_cv(dataset, config, parallel)?;
    write_results(out, &result)?;
    Ok(result)
}

fn run_suite(args: &ModelArgs, variants: &[Variant], table_name: &str) -> Result<()> {
    let dataset = Dataset::load(&args.data)?;
    let mut results = Vec::new();
    for &v in variants {
        eprintln!("running {v}");
        let out = args.out.join(v.name());
        results.push(run_and_write(
            &dataset,
            &args.config(v),
            &out,
            args.parallel_folds,
        )?);
    }
    let summaries: Vec<_> = results.iter().map(|r| &r.summary).collect();
    let path = args.out.join(table_name);
    std::fs::write(&path, table_csv(&summaries)).map_err(|e| Error::io(&path, e))?;
    print!("{}", format_table(&summaries));
    Ok(())
}

/// Runs a parsed command; `Ok(false)` means a check ran and failed.
pub fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(args) => {
            let data = generate(&args.config(), &args.out)?;
            println!(
                "wrote {} samples to {}",
                data.samples.len(),
                args.out.display()
            );
            Ok(true)
        }
        Command::Train(args) => {
            let dataset = Dataset::load(&args.model.data)?;
            let config = args.model.config(args.variant);
            let result = run_and_write(
                &dataset,
                &config,
                &args.model.out,
                args.model.parallel_folds,
            )?;
            print!("{}", format_table(&[&result.summary]));
            Ok(true)
        }
        Command::Ablate(args) => {
            run_suite(&args.model, &Variant::ABLATIONS, "ablation.csv")?;
            Ok(true)
        }
        Command::Baselines(args) => {
            run_suite(&args.model, &Variant::BASELINES, "baselines.csv")?;
            Ok(true)
        }
        Command::Gradcheck(args) => {
            let mut reports = op_suite(args.fault)?;
            if !args.ops_only {
                reports.extend(model_suite(args.fault)?);
            }
            let mut ok = true;
            for r in &reports {
                println!(
                    "{:<26} max_rel_err {:.3e}  {}",
                    r.op_name,
                    r.max_rel_err,
                    if r.pass { "pass" } else { "FAIL" }
                );
                ok &= r.pass;
            }
            Ok(ok)
        }
        Command::OracleCheck => {
            let mut ok = true;
            for r in oracle_suite()? {
                println!(
                    "{:<24} cases {:>3}  max_abs_err {:.3e}  tol {:.0e}  {}",
                    r.name,
                    r.cases,
                    r.max_abs_err,
                    r.tolerance,
                    if r.pass { "pass" } else { "FAIL" }
                );
                ok &= r.pass;
            }
            Ok(ok)
        }
        Command::Curves(args) => {
            for path in curves_from_results(&args.results, &args.out)? {
                println!("{}", path.display());
            }
            Ok(true)
        }
    }
}

pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
