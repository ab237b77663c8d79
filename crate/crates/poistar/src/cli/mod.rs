//! Command-line interface.
//!
//! Five subcommands share one artifact layout: `fit` writes per-chain draw
//! CSVs, a parameter summary, predictive scores, the area id map, and a
//! manifest; `predict`, `compare`, and `diagnose` consume those artifacts;
//! `simulate` runs the synthetic-panel recovery study. Exit codes: 0 ok,
//! 1 error, 3 convergence warning.

pub mod artifacts;
pub mod config;
pub mod ingest;
mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
/// Convergence warning: the fit ran, but split R-hat exceeded 1.05 (or a
/// simulation replicate was excluded by the gate).
pub const EXIT_WARN: u8 = 3;

pub use run::RHAT_WARN;

const CONFIG_FILE_HELP: &str = "\
CONFIG FILE (--config)
  Flat keyed text: `key = value` lines grouped under `[section]` headers.
  Blank lines and `#` comments are ignored. Command-line flags override
  file values. Sections and keys:

  [model]
    variant             a|b|c|d|e                  (default d)
                        a: covariates only   b: +growth field
                        c: +baseline field   d: both fields
                        e: both fields, no covariates
    tau                 autoregression order >= 1  (default 3)
    depletion           susceptible|literal        (default susceptible)
    immunity_window     weeks of history, or none  (default none = all)
    sum_to_zero_factor  positive float             (default 0.001)

  [priors]
    beta0_mean            (default -0.5)   beta0_scale          (default 1)
    beta_scale            (default 1)      eta_scale            (default 1)
    sigma_growth_scale    (default 0.1)    sigma_baseline_scale (default 0.1)

  [sampler]
    chains (default 4)          iterations (default 2000, incl. warmup)
    warmup (default 1000)       thin (default 1)
    max_treedepth (default 10)  target_accept (default 0.8)
    step_size (default auto)    init_jitter (default 2)
    seed (default 1)

  [growth_covariates]    one `name = none|global|per_area` line per
  [baseline_covariates]  covariate, bound in column order; the value picks
                         the standardization. Names refer to the `name`
                         column of the --covariates file.

DATA FILES
  --counts      CSV: area_id, week_index, count, population. Weeks 0..T-1
                observed; negative weeks are pre-period history.
  --covariates  CSV: area_id, week_index, name, value. An empty week_index
                marks a time-constant value for that area.
  --edges       text: `area_count=N` header, then one `i,j` pair per line
                (0-based area indices); `#` comments allowed.

EXIT CODES
  0 success; 1 error; 3 convergence warning (R-hat > 1.05, or excluded
  simulation replicates).";

/// Bayesian spatio-temporal Poisson autoregression for areal count panels.
#[derive(Parser, Debug)]
#[command(name = "poistar", version, after_long_help = CONFIG_FILE_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the model to a counts panel and write draw/summary artifacts.
    Fit(FitArgs),
    /// Generate synthetic panels and run a parameter-recovery study.
    Simulate(SimulateArgs),
    /// Recompute cell intensities and predictive scores from a saved fit.
    Predict(PredictArgs),
    /// Rank saved fits of the same panel by WAIC and PSIS-LOO.
    Compare(CompareArgs),
    /// Recompute convergence diagnostics from a saved fit's draws.
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Counts CSV (columns: area_id, week_index, count, population).
    #[arg(long)]
    pub counts: PathBuf,
    /// Covariates CSV (columns: area_id, week_index, name, value).
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Adjacency edge list (`area_count=N` header, one `i,j` per line).
    #[arg(long)]
    pub edges: PathBuf,
    /// Config file; see --help for the format.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Model variant a..e (overrides the config file).
    #[arg(long)]
    pub variant: Option<String>,
    /// Autoregression order (number of lag weights).
    #[arg(long)]
    pub tau: Option<usize>,
    /// Depletion mode: susceptible or literal.
    #[arg(long)]
    pub depletion: Option<String>,
}

#[derive(Args, Debug)]
pub struct SamplerArgs {
    /// RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of chains.
    #[arg(long)]
    pub chains: Option<usize>,
    /// Iterations per chain, including warmup.
    #[arg(long)]
    pub iter: Option<usize>,
    /// Warmup iterations per chain.
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Keep every thin-th post-warmup draw.
    #[arg(long)]
    pub thin: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Directory for the fit artifacts.
    #[arg(long)]
    pub out: PathBuf,
    /// Hold this fraction of cells out of the likelihood, in [0, 1).
    #[arg(long)]
    pub holdout: Option<f64>,
    /// Seed for the holdout mask (defaults to the sampler seed).
    #[arg(long)]
    pub holdout_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Lattice rows (ignored when --edges is given).
    #[arg(long, default_value_t = 5)]
    pub rows: usize,
    /// Lattice columns (ignored when --edges is given).
    #[arg(long, default_value_t = 5)]
    pub cols: usize,
    /// Adjacency edge list replacing the lattice.
    #[arg(long)]
    pub edges: Option<PathBuf>,
    /// Observed weeks per replicate.
    #[arg(long, default_value_t = 30)]
    pub weeks: usize,
    /// Number of simulated panels to fit.
    #[arg(long, default_value_t = 20)]
    pub replicates: usize,
    /// Fraction of cells withheld from each fit, in [0, 1).
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    /// Population of every synthetic area.
    #[arg(long, default_value_t = 200_000.0)]
    pub population: f64,
    /// Mean pre-period count per 10,000 population.
    #[arg(long, default_value_t = 100.0)]
    pub init_rate: f64,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Directory for the recovery artifacts.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Fit directory holding manifest.json and the draw CSVs.
    pub fit: PathBuf,
    /// The counts CSV the fit was produced from.
    #[arg(long)]
    pub counts: PathBuf,
    /// The covariates CSV the fit was produced from, if any.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// The adjacency edge list the fit was produced from.
    #[arg(long)]
    pub edges: PathBuf,
    /// Output directory (defaults to the fit directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for predictive-interval sampling (defaults to the fit's seed,
    /// making a rerun reproduce pred_scores.csv byte for byte).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// The counts CSV all fits were produced from.
    #[arg(long)]
    pub counts: PathBuf,
    /// The covariates CSV (required when any fit binds covariates).
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// The adjacency edge list the fits were produced from.
    #[arg(long)]
    pub edges: PathBuf,
    /// Two or more fit directories to rank.
    #[arg(required = true, num_args = 2..)]
    pub fits: Vec<PathBuf>,
    /// Path of the comparison table (default: comparison.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    /// Fit directory holding manifest.json and the draw CSVs.
    pub fit: PathBuf,
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn run() -> u8 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Fit(args) => run::fit(args),
        Command::Simulate(args) => run::simulate(args),
        Command::Predict(args) => run::predict(args),
        Command::Compare(args) => run::compare(args),
        Command::Diagnose(args) => run::diagnose(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_args_parse_with_overrides() {
        let cli = Cli::try_parse_from([
            "poistar", "fit", "--counts", "c.csv", "--edges", "e.txt", "--out", "outdir",
            "--variant", "b", "--tau", "2", "--chains", "3", "--iter", "500", "--warmup", "200",
            "--seed", "7", "--holdout", "0.2",
        ])
        .unwrap();
        let Command::Fit(args) = cli.command else {
            panic!("expected fit");
        };
        assert_eq!(args.data.counts, PathBuf::from("c.csv"));
        assert_eq!(args.model.variant.as_deref(), Some("b"));
        assert_eq!(args.model.tau, Some(2));
        assert_eq!(args.sampler.chains, Some(3));
        assert_eq!(args.sampler.seed, Some(7));
        assert_eq!(args.holdout, Some(0.2));
        assert!(args.data.covariates.is_none());
    }

    #[test]
    fn simulate_defaults_mirror_the_desk_scale_study() {
        let cli =
            Cli::try_parse_from(["poistar", "simulate", "--out", "rec"]).unwrap();
        let Command::Simulate(args) = cli.command else {
            panic!("expected simulate");
        };
        assert_eq!((args.rows, args.cols, args.weeks), (5, 5, 30));
        assert_eq!(args.replicates, 20);
        assert_eq!(args.holdout, 0.2);
        assert_eq!(args.population, 200_000.0);
        assert_eq!(args.init_rate, 100.0);
    }

    #[test]
    fn compare_requires_two_fit_directories() {
        let err = Cli::try_parse_from([
            "poistar", "compare", "--counts", "c.csv", "--edges", "e.txt", "only_one",
        ])
        .unwrap_err();
        assert!(err.use_stderr());
        let ok = Cli::try_parse_from([
            "poistar", "compare", "--counts", "c.csv", "--edges", "e.txt", "fit_a", "fit_b",
        ])
        .unwrap();
        let Command::Compare(args) = ok.command else {
            panic!("expected compare");
        };
        assert_eq!(args.fits.len(), 2);
    }

    #[test]
    fn config_keys_are_documented_in_the_long_help() {
        for key in [
            "variant", "tau", "depletion", "immunity_window", "sum_to_zero_factor",
            "beta0_mean", "beta0_scale", "beta_scale", "eta_scale", "sigma_growth_scale",
            "sigma_baseline_scale", "chains", "iterations", "warmup", "thin", "max_treedepth",
            "target_accept", "step_size", "init_jitter", "seed", "growth_covariates",
            "baseline_covariates", "per_area",
        ] {
            assert!(CONFIG_FILE_HELP.contains(key), "`{key}` missing from --help");
        }
    }
}
