//! The five subcommands. Each reads a validated [`RunConfig`], writes its
//! artifacts under the output directory and returns a short text report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use braids::cutpoints::build_cutpoints;
use braids::data::{infer_schema, parse_dataset, standardize, Dataset};
use braids::draws::PosteriorDraws;
use braids::inference::{subgroup_contrast, subgroup_summary, trace_summaries, write_trace_summaries};
use braids::prior::{calibration_report, prior_heterogeneity_mc};
use braids::ridge::{fit_ridge, McmcConfig, RidgePrior};
use braids::rng::{derive_seed, stream};
use braids::rules::{extract_rules, fit_rule_bcf};
use braids::search::{evaluate_prespecified, policy_search_exact, search, SearchConfig, SearchMode};
use braids::sim::{
    prior_predictive_coverage, run_coverage_experiment, run_utility_experiment, scale_modifier_prior, ExperimentReport, Fitter,
};
use braids::utility::{efficacy_probabilities, expected_efficacy, expected_welfare};
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::{PolicyUtility, RunConfig, SimulationKind};

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration; exit status 1.
    Usage(String),
    /// A module reported an error; exit status 2.
    Compute(String),
}

impl From<braids::Error> for Failure {
    fn from(e: braids::Error) -> Self {
        Failure::Compute(e.to_string())
    }
}

type Outcome = Result<String, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Compute(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Compute(e.to_string()))?;
    write_text(path, &text)
}

fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::Compute(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Failure::Compute(e.to_string()))?;
    }
    w.flush().map_err(|e| io_failure(path, e))
}

fn prepare_output(cfg: &RunConfig) -> Result<(), Failure> {
    fs::create_dir_all(&cfg.output).map_err(|e| io_failure(&cfg.output, e))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, Failure> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Failure::Usage("a data file is required (--data or `data` in the config)".into()))?;
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    let schema = match &cfg.schema {
        Some(s) => s.clone(),
        None => infer_schema(&text, "y", "a")?,
    };
    Ok(parse_dataset(&text, &schema)?)
}

fn load_draws(cfg: &RunConfig, d: &Dataset) -> Result<PosteriorDraws, Failure> {
    let draws = PosteriorDraws::load(&cfg.draws_stem())?;
    if draws.n_units() != d.n() {
        return Err(Failure::Compute(format!(
            "the draws cover {} units but the data set has {}",
            draws.n_units(),
            d.n()
        )));
    }
    Ok(draws)
}

fn tag(lambda: f64) -> String {
    format!("lambda_{lambda}")
}

// ---------------------------------------------------------------------------
// fit

pub fn cmd_fit(cfg: &RunConfig) -> Outcome {
    let d = load_data(cfg)?;
    prepare_output(cfg)?;
    let (ds, recipe) = standardize(&d)?;
    let mcmc = McmcConfig {
        seed: derive_seed(cfg.seed, "mcmc"),
        ..cfg.mcmc
    };
    let mut out = String::new();
    let observational = cfg.fit.observational;
    let std_draws = match cfg.fit.model {
        Fitter::Ridge => fit_ridge(&ds, &cfg.prior, &mcmc, observational)?,
        Fitter::FlatLinear => fit_ridge(&ds, &RidgePrior::flat_linear(), &mcmc, observational)?,
        Fitter::RuleBcf => {
            let basis = extract_rules(&ds, &cfg.rules, derive_seed(cfg.seed, "rules"))?;
            if basis.modifier.is_empty() && basis.linear_modifier.is_none() {
                eprintln!("warning: the modifier basis is empty; the fitted effect is constant across units");
            }
            write_text(&cfg.output.join("rules.json"), &basis.to_json()?)?;
            write_text(&cfg.output.join("rules.txt"), &basis.render())?;
            let _ = writeln!(out, "rules: {} prognostic, {} modifier", basis.prognostic.len(), basis.modifier.len());
            fit_rule_bcf(&ds, &basis, &cfg.prior, &mcmc, observational)?
        }
    };
    let draws = std_draws.rescale(recipe.y_scale);
    let stem = cfg.draws_stem();
    if let Some(parent) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
    }
    draws.save(&stem)?;
    if cfg.fit.export_csv {
        draws.write_csv(&cfg.output.join("draws.csv"))?;
    }
    let traces = trace_summaries(&draws)?;
    write_trace_summaries(&traces, &cfg.output.join("trace.csv"))?;
    write_json(&cfg.output.join("recipe.json"), &recipe)?;

    let ate = traces[0].clone();
    let _ = writeln!(out, "model {}: {} units, {} draws", cfg.fit.model.name(), d.n(), draws.n_draws());
    let _ = writeln!(out, "ate {:.4} (sd {:.4}, lag-1 autocorrelation {:.3})", ate.mean, ate.sd, ate.lag1);
    let _ = writeln!(out, "draws written to {}", stem.display());
    Ok(out)
}

// ---------------------------------------------------------------------------
// subgroups

#[derive(Serialize)]
struct UtilityRow {
    lambda: f64,
    mode: SearchMode,
    depth: usize,
    groups: usize,
    value: f64,
    var_term: f64,
    within_sse: f64,
    penalized_value: f64,
    trees_covered: f64,
}

#[derive(Serialize)]
struct ContrastRow {
    lambda: f64,
    k1: usize,
    k2: usize,
    mean: f64,
    lo: f64,
    hi: f64,
    prob_negative: f64,
}

#[derive(Serialize)]
struct RankingCsvRow {
    partition: String,
    lambda: f64,
    value: Option<f64>,
    rank: Option<usize>,
    status: String,
}

pub fn cmd_subgroups(cfg: &RunConfig) -> Outcome {
    let sec = &cfg.subgroups;
    if sec.lambdas.is_empty() {
        return Err(Failure::Usage("at least one lambda is required".into()));
    }
    let d = load_data(cfg)?;
    let draws = load_draws(cfg, &d)?;
    prepare_output(cfg)?;
    let grid = build_cutpoints(&d, sec.search.min_leaf, sec.max_thresholds);
    let mut out = String::new();
    let mut utility_rows = Vec::new();
    let mut contrast_rows = Vec::new();
    for &lambda in &sec.lambdas {
        let scfg = SearchConfig { lambda, ..sec.search };
        let found = search(&draws, &d, &grid, &scfg)?;
        let rendering = found.tree.render(&d);
        write_text(&cfg.output.join(format!("tree_{}.txt", tag(lambda))), &rendering)?;
        write_json(&cfg.output.join(format!("tree_{}.json", tag(lambda))), &found.tree)?;
        let summary = subgroup_summary(&draws, &found.tree, &d, sec.alpha)?;
        summary.write_table(&cfg.output.join(format!("groups_{}.csv", tag(lambda))))?;

        let _ = writeln!(out, "lambda = {lambda}: expected utility {:.6}", found.report.value);
        out.push_str(&rendering);
        let _ = writeln!(out, "{:>6} {:>6} {:>10} {:>22} {:>10}", "group", "n", "tau_hat", "interval", "P(Δ<0)");
        for g in &summary.groups {
            let _ = writeln!(
                out,
                "{:>6} {:>6} {:>10.4} {:>22} {:>10.3}",
                g.group,
                g.size,
                g.tau_hat,
                format!("[{:.4}, {:.4}]", g.interval.lo, g.interval.hi),
                g.prob_delta_negative
            );
        }
        for &[k1, k2] in &sec.contrasts {
            let c = subgroup_contrast(&draws, &found.tree, &d, k1, k2, sec.alpha)?;
            let _ = writeln!(
                out,
                "contrast {k1} - {k2}: {:.4} [{:.4}, {:.4}], P(< 0) = {:.3}",
                c.mean, c.interval.lo, c.interval.hi, c.prob_negative
            );
            contrast_rows.push(ContrastRow {
                lambda,
                k1,
                k2,
                mean: c.mean,
                lo: c.interval.lo,
                hi: c.interval.hi,
                prob_negative: c.prob_negative,
            });
        }
        utility_rows.push(UtilityRow {
            lambda,
            mode: scfg.mode,
            depth: found.tree.depth(),
            groups: found.tree.k,
            value: found.report.value,
            var_term: found.report.var_term,
            within_sse: found.report.within_sse,
            penalized_value: found.penalized_value,
            trees_covered: found.trees_covered,
        });
    }
    write_rows(&cfg.output.join("utility.csv"), &utility_rows)?;
    if !sec.contrasts.is_empty() {
        write_rows(&cfg.output.join("contrasts.csv"), &contrast_rows)?;
    }
    if !sec.prespecified.is_empty() {
        let rows = evaluate_prespecified(&draws, &d, &sec.prespecified, &sec.lambdas)?;
        let csv_rows: Vec<RankingCsvRow> = rows
            .iter()
            .map(|r| RankingCsvRow {
                partition: r.partition.clone(),
                lambda: r.lambda,
                value: r.value,
                rank: r.rank,
                status: r.status.clone(),
            })
            .collect();
        write_rows(&cfg.output.join("ranking.csv"), &csv_rows)?;
        out.push_str(&ranking_table(&rows, &sec.lambdas));
    }
    Ok(out)
}

/// One row per partition, one column per λ, cells `value (rank)`.
fn ranking_table(rows: &[braids::search::RankingRow], lambdas: &[f64]) -> String {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.partition.as_str()) {
            names.push(&r.partition);
        }
    }
    let mut out = format!("{:<24}", "partition");
    for l in lambdas {
        let _ = write!(out, " {:>18}", format!("lambda = {l}"));
    }
    out.push('\n');
    for name in names {
        let _ = write!(out, "{name:<24}");
        for &l in lambdas {
            let cell = rows
                .iter()
                .find(|r| r.partition == name && r.lambda == l)
                .map(|r| match (r.value, r.rank) {
                    (Some(v), Some(k)) => format!("{v:.5} ({k})"),
                    _ => "infeasible".to_string(),
                })
                .unwrap_or_default();
            let _ = write!(out, " {cell:>18}");
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// policy

#[derive(Serialize)]
struct PolicyRecord<'a> {
    utility: PolicyUtility,
    delta: f64,
    c: Option<f64>,
    value: f64,
    recomputed_value: f64,
    treated: usize,
    tree: &'a braids::tree::PolicyTree,
}

pub fn cmd_policy(cfg: &RunConfig) -> Outcome {
    let sec = cfg.policy;
    let d = load_data(cfg)?;
    let draws = load_draws(cfg, &d)?;
    prepare_output(cfg)?;
    let scores: Vec<f64> = match sec.utility {
        PolicyUtility::Welfare => draws.posterior_mean().iter().map(|t| t - sec.delta).collect(),
        PolicyUtility::Efficacy => {
            if !(0.0..=1.0).contains(&sec.c) {
                return Err(Failure::Usage(format!("c = {} is outside [0, 1]", sec.c)));
            }
            efficacy_probabilities(&draws, sec.delta).iter().map(|p| p - sec.c).collect()
        }
    };
    let grid = build_cutpoints(&d, 1, sec.max_thresholds);
    let (tree, value) = policy_search_exact(&scores, &d, &grid, sec.max_depth)?;
    let recomputed = match sec.utility {
        PolicyUtility::Welfare => expected_welfare(&draws, &tree, &d, sec.delta)?,
        PolicyUtility::Efficacy => expected_efficacy(&draws, &tree, &d, sec.delta, sec.c)?,
    };
    let treated = tree.actions(&d)?.iter().filter(|a| a.treats()).count();
    let rendering = tree.render(&d);
    write_text(&cfg.output.join("policy.txt"), &rendering)?;
    write_json(
        &cfg.output.join("policy.json"),
        &PolicyRecord {
            utility: sec.utility,
            delta: sec.delta,
            c: (sec.utility == PolicyUtility::Efficacy).then_some(sec.c),
            value,
            recomputed_value: recomputed,
            treated,
            tree: &tree,
        },
    )?;
    let mut out = rendering;
    let _ = writeln!(out, "expected value {value:.6}; treats {treated} of {} units", d.n());
    Ok(out)
}

// ---------------------------------------------------------------------------
// calibrate-prior

#[derive(Serialize)]
struct CalibrationRecord<'a> {
    config: &'a braids::prior::TreePriorConfig,
    n_rows: usize,
    p: usize,
    n_samples: usize,
    report: braids::prior::CalibrationReport,
}

pub fn cmd_calibrate_prior(cfg: &RunConfig) -> Outcome {
    let sec = cfg.calibration;
    let x = match cfg.data {
        Some(_) => load_data(cfg)?.x().clone(),
        None => {
            if sec.n_rows < 2 || sec.p == 0 {
                return Err(Failure::Usage("the covariate matrix needs at least 2 rows and 1 column".into()));
            }
            let mut rng = stream(cfg.seed, "calibration-covariates");
            DMatrix::from_fn(sec.n_rows, sec.p, |_, _| StandardNormal.sample(&mut rng))
        }
    };
    prepare_output(cfg)?;
    let sample = prior_heterogeneity_mc(&x, &sec.prior, sec.n_samples, derive_seed(cfg.seed, "prior"))?;
    let report = calibration_report(&sec.prior, &sample)?;
    sample.write_histogram(&cfg.output.join("heterogeneity_histogram.csv"), sec.bins)?;
    write_json(
        &cfg.output.join("calibration.json"),
        &CalibrationRecord {
            config: &sec.prior,
            n_rows: x.nrows(),
            p: x.ncols(),
            n_samples: sec.n_samples,
            report,
        },
    )?;
    let mut out = String::new();
    let _ = writeln!(out, "mean leaf depth {:.4}", report.mean_leaf_depth);
    let _ = writeln!(out, "closed form E(H^2) {:.4}", report.closed_form);
    let _ = writeln!(
        out,
        "Monte Carlo E(H^2) {:.4} (SE {:.4}, z = {:.2}) over {} prior forests",
        report.mc_mean_h2, report.mc_se, report.z, sec.n_samples
    );
    Ok(out)
}

// ---------------------------------------------------------------------------
// simulate

fn summary_table(report: &ExperimentReport) -> String {
    let mut out = format!("{:<26} {:>12} {:>12} {:>10} {:>10}\n", "method", "cate_mse", "utility", "coverage", "width");
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.5}"));
    for s in &report.summaries {
        let _ = writeln!(
            out,
            "{:<26} {:>12} {:>12} {:>10} {:>10}",
            s.method,
            fmt(s.cate_mse.map(|v| v.mean)),
            fmt(s.realized_utility.map(|v| v.mean)),
            fmt(s.coverage.map(|v| v.rate)),
            fmt(s.width.map(|v| v.mean)),
        );
    }
    out
}

pub fn cmd_simulate(cfg: &RunConfig) -> Outcome {
    let sec = &cfg.simulate;
    prepare_output(cfg)?;
    match sec.kind {
        SimulationKind::Utility | SimulationKind::Coverage => {
            let dgp = sec.resolved_dgp();
            let report = if sec.kind == SimulationKind::Utility {
                run_utility_experiment(&dgp, &sec.methods, &sec.experiment, cfg.seed)?
            } else {
                run_coverage_experiment(&dgp, &sec.pipelines, &sec.experiment, cfg.seed)?
            };
            report.write(&cfg.output)?;
            Ok(summary_table(&report))
        }
        SimulationKind::PriorPredictive => {
            let fitting = scale_modifier_prior(&cfg.prior, sec.fit_scale);
            let outcome = prior_predictive_coverage(
                &cfg.prior,
                &fitting,
                &sec.design,
                sec.experiment.reps,
                sec.experiment.alpha,
                cfg.seed,
            )?;
            write_json(&cfg.output.join("prior_predictive.json"), &outcome)?;
            let nominal = 1.0 - outcome.alpha;
            Ok(format!(
                "coverage of the first unit's group {:.3} (SE {:.3}, z = {:.2} against {nominal}); pooled {:.3}\n",
                outcome.first_unit.rate,
                outcome.first_unit.se,
                outcome.first_unit.z_at(nominal),
                outcome.pooled.rate
            ))
        }
    }
}
