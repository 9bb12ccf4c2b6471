//! `braids`: Bayesian subgroup detection from the command line.
//!
//! Exit status is 0 on success, 1 for usage or configuration errors and 2
//! when a computation fails.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use braids::search::SearchMode;
use braids::sim::Fitter;
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::Failure;
use config::{DgpPreset, PolicyUtility, RunConfig, SimulationKind};

#[derive(Parser)]
#[command(name = "braids", version, about = "Bayesian risk-aware subgroup detection")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Delimited data file.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Stem of the draws files.
    #[arg(long, global = true)]
    draws: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an effect model and store its posterior draws.
    Fit(FitArgs),
    /// Search for subgroups and summarize them.
    Subgroups(SubgroupArgs),
    /// Find an exact depth-limited treatment policy.
    Policy(PolicyArgs),
    /// Compare prior heterogeneity of tree ensembles with its closed form.
    CalibratePrior(CalibrateArgs),
    /// Run a simulation experiment.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Ridge,
    FlatLinear,
    RuleBcf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Posterior draws kept.
    #[arg(long)]
    n_draws: Option<usize>,
    #[arg(long)]
    n_burn: Option<usize>,
    /// Center the treatment at the propensity score.
    #[arg(long)]
    observational: bool,
    /// Also write the draws as CSV.
    #[arg(long)]
    export_csv: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    Greedy,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct SubgroupArgs {
    /// Risk attitudes, comma separated.
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    min_leaf: Option<usize>,
    /// Utility cost per level of depth.
    #[arg(long)]
    penalty: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Summarize τ(G_K1) − τ(G_K2); may be repeated.
    #[arg(long, num_args = 2, value_names = ["K1", "K2"], action = clap::ArgAction::Append)]
    contrast: Vec<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum UtilityArg {
    Welfare,
    Efficacy,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct PolicyArgs {
    #[arg(long, value_enum)]
    utility: Option<UtilityArg>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Prior forests drawn.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    columns: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Utility,
    Coverage,
    PriorPredictive,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Linear,
    Tree,
    Step,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
}

fn apply(cli: &Cli, cfg: &mut RunConfig) -> Result<(), Failure> {
    let c = &cli.common;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.output {
        cfg.output = o.clone();
    }
    if let Some(d) = &c.data {
        cfg.data = Some(d.clone());
    }
    if let Some(d) = &c.draws {
        cfg.draws = Some(d.clone());
    }
    match &cli.command {
        Command::Fit(a) => {
            if let Some(m) = a.model {
                cfg.fit.model = match m {
                    ModelArg::Ridge => Fitter::Ridge,
                    ModelArg::FlatLinear => Fitter::FlatLinear,
                    ModelArg::RuleBcf => Fitter::RuleBcf,
                };
            }
            if let Some(n) = a.n_draws {
                cfg.mcmc.n_draws = n;
            }
            if let Some(n) = a.n_burn {
                cfg.mcmc.n_burn = n;
            }
            cfg.fit.observational |= a.observational;
            cfg.fit.export_csv |= a.export_csv;
        }
        Command::Subgroups(a) => {
            let s = &mut cfg.subgroups;
            if !a.lambda.is_empty() {
                s.lambdas = a.lambda.clone();
            }
            if let Some(m) = a.mode {
                s.search.mode = match m {
                    ModeArg::Exact => SearchMode::Exact,
                    ModeArg::Greedy => SearchMode::Greedy,
                };
            }
            if let Some(v) = a.depth {
                s.search.max_depth = v;
            }
            if let Some(v) = a.min_leaf {
                s.search.min_leaf = v;
            }
            if let Some(v) = a.penalty {
                s.search.depth_penalty = v;
            }
            if let Some(v) = a.alpha {
                s.alpha = v;
            }
            s.contrasts.extend(a.contrast.chunks(2).map(|p| [p[0], p[1]]));
        }
        Command::Policy(a) => {
            let p = &mut cfg.policy;
            if let Some(u) = a.utility {
                p.utility = match u {
                    UtilityArg::Welfare => PolicyUtility::Welfare,
                    UtilityArg::Efficacy => PolicyUtility::Efficacy,
                };
            }
            if let Some(v) = a.delta {
                p.delta = v;
            }
            if let Some(v) = a.c {
                p.c = v;
            }
            if let Some(v) = a.depth {
                p.max_depth = v;
            }
        }
        Command::CalibratePrior(a) => {
            let k = &mut cfg.calibration;
            if let Some(v) = a.samples {
                k.n_samples = v;
            }
            if let Some(v) = a.rows {
                k.n_rows = v;
            }
            if let Some(v) = a.columns {
                k.p = v;
            }
        }
        Command::Simulate(a) => {
            let s = &mut cfg.simulate;
            if let Some(k) = a.kind {
                s.kind = match k {
                    KindArg::Utility => SimulationKind::Utility,
                    KindArg::Coverage => SimulationKind::Coverage,
                    KindArg::PriorPredictive => SimulationKind::PriorPredictive,
                };
            }
            if let Some(p) = a.preset {
                s.preset = match p {
                    PresetArg::Linear => DgpPreset::Linear,
                    PresetArg::Tree => DgpPreset::Tree,
                    PresetArg::Step => DgpPreset::Step,
                };
            }
            if let Some(v) = a.sigma {
                s.sigma = v;
            }
            if let Some(v) = a.reps {
                s.experiment.reps = v;
            }
        }
    }
    validate(cfg)
}

/// Checks that need no data, run before any computation.
fn validate(cfg: &RunConfig) -> Result<(), Failure> {
    let usage = |e: braids::Error| Failure::Usage(e.to_string());
    cfg.prior.validate().map_err(usage)?;
    cfg.mcmc.validate().map_err(usage)?;
    cfg.rules.validate().map_err(usage)?;
    cfg.subgroups.search.validate().map_err(usage)?;
    cfg.calibration.prior.validate().map_err(usage)?;
    cfg.simulate.experiment.validate().map_err(usage)?;
    if !(cfg.subgroups.alpha > 0.0 && cfg.subgroups.alpha < 1.0) {
        return Err(Failure::Usage("alpha must lie in (0, 1)".into()));
    }
    if cfg.subgroups.lambdas.iter().any(|l| !l.is_finite()) {
        return Err(Failure::Usage("lambdas must be finite".into()));
    }
    if cfg.subgroups.search.mode == SearchMode::Greedy && cfg.subgroups.lambdas.iter().any(|&l| l != 1.0) {
        return Err(Failure::Usage("greedy search supports lambda = 1 only; use exact mode for other risk attitudes".into()));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<String, Failure> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    apply(cli, &mut cfg)?;
    match cli.command {
        Command::Fit(_) => commands::cmd_fit(&cfg),
        Command::Subgroups(_) => commands::cmd_subgroups(&cfg),
        Command::Policy(_) => commands::cmd_policy(&cfg),
        Command::CalibratePrior(_) => commands::cmd_calibrate_prior(&cfg),
        Command::Simulate(_) => commands::cmd_simulate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Compute(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
