use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use braids::cutpoints::build_cutpoints;
use braids::data::{infer_schema, parse_dataset, Dataset};
use braids::draws::PosteriorDraws;
use braids::search::{search_greedy_rn, SearchConfig, SearchMode};
use tempfile::TempDir;

const TOY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy.csv");
const TOY_CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy.toml");

fn braids(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_braids"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn toy() -> Dataset {
    let text = fs::read_to_string(TOY).unwrap();
    parse_dataset(&text, &infer_schema(&text, "y", "a").unwrap()).unwrap()
}

/// Fits ridge on the toy data into `dir/out` and returns that directory.
fn fitted(dir: &Path, draws: &str) -> PathBuf {
    ok(&braids(dir, &["fit", "--data", TOY, "--output", "out", "--seed", "3", "--n-draws", draws, "--n-burn", "200"]));
    dir.join("out")
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fit_stores_the_requested_number_of_draws() {
    let tmp = TempDir::new().unwrap();
    let out = fitted(tmp.path(), "250");
    let draws = PosteriorDraws::load(&out.join("draws")).unwrap();
    assert_eq!(draws.n_draws(), 250);
    assert_eq!(draws.n_units(), 300);
    assert!(out.join("trace.csv").exists());
    assert!(out.join("recipe.json").exists());
}

#[test]
fn same_seed_gives_identical_draws() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    fitted(a.path(), "100");
    fitted(b.path(), "100");
    let bytes = |d: &Path| fs::read(d.join("out/draws.bin")).unwrap();
    assert_eq!(bytes(a.path()), bytes(b.path()));
}

#[test]
fn export_csv_writes_one_row_per_draw() {
    let tmp = TempDir::new().unwrap();
    ok(&braids(tmp.path(), &["fit", "--data", TOY, "--output", "out", "--n-draws", "40", "--n-burn", "10", "--export-csv"]));
    let text = fs::read_to_string(tmp.path().join("out/draws.csv")).unwrap();
    let data_rows = text.lines().filter(|l| !l.trim().is_empty()).count();
    assert!(data_rows == 40 || data_rows == 41, "{data_rows} lines");
}

#[test]
fn empty_modifier_basis_warns_and_gives_a_constant_effect() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("run.toml"),
        "[rules]\nmax_rules = 0\nlinear_modifier = false\n[mcmc]\nn_draws = 100\nn_burn = 50\n",
    )
    .unwrap();
    let out = braids(tmp.path(), &["fit", "--config", "run.toml", "--data", TOY, "--output", "out", "--model", "rule-bcf"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("modifier basis is empty"));
    let draws = PosteriorDraws::load(&tmp.path().join("out/draws")).unwrap();
    let tau = draws.posterior_mean();
    let spread = tau.iter().cloned().fold(f64::MIN, f64::max) - tau.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 1e-9, "spread {spread}");
}

#[test]
fn greedy_tree_matches_the_library_search() {
    let tmp = TempDir::new().unwrap();
    let out = fitted(tmp.path(), "300");
    let report = ok(&braids(tmp.path(), &["subgroups", "--data", TOY, "--output", "out", "--mode", "greedy", "--depth", "2"]));
    assert!(report.contains("if x1 <= 0.5000"), "{report}");
    assert!(report.contains("if x2 <= 0.5000"), "{report}");

    let d = toy();
    let draws = PosteriorDraws::load(&out.join("draws")).unwrap();
    let cfg = SearchConfig { mode: SearchMode::Greedy, max_depth: 2, lambda: 1.0, ..SearchConfig::default() };
    let grid = build_cutpoints(&d, cfg.min_leaf, 64);
    let tree = search_greedy_rn(&draws.posterior_mean(), &d, &grid, &cfg).unwrap();
    assert_eq!(read_json(&out.join("tree_lambda_1.json")), serde_json::to_value(&tree).unwrap());
    assert_eq!(tree.k, 4);
}

#[test]
fn prespecified_partitions_are_ranked_at_every_lambda() {
    let tmp = TempDir::new().unwrap();
    let data_dir = tmp.path();
    fs::copy(TOY, data_dir.join("toy.csv")).unwrap();
    fs::copy(TOY_CONFIG, data_dir.join("toy.toml")).unwrap();
    ok(&braids(data_dir, &["fit", "--config", "toy.toml", "--n-draws", "200", "--n-burn", "100"]));
    let report = ok(&braids(data_dir, &["subgroups", "--config", "toy.toml"]));
    for name in ["site", "sex", "site x sex"] {
        assert!(report.lines().any(|l| l.starts_with(name)), "{report}");
    }

    let mut reader = csv::Reader::from_path(data_dir.join("toy-out/ranking.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 9);
    for lambda in [0.0, 1.0, 2.0] {
        let mut ranks: Vec<&str> = rows.iter().filter(|r| r[1].parse::<f64>().unwrap() == lambda).map(|r| &r[3]).collect();
        ranks.sort();
        assert_eq!(ranks, ["1", "2", "3"], "lambda {lambda}");
    }
    assert!(data_dir.join("toy-out/contrasts.csv").exists());
    for lambda in [0, 1, 2] {
        assert!(data_dir.join(format!("toy-out/tree_lambda_{lambda}.txt")).exists());
    }
}

#[test]
fn contrast_flag_reports_the_difference() {
    let tmp = TempDir::new().unwrap();
    fitted(tmp.path(), "300");
    let report = ok(&braids(tmp.path(), &["subgroups", "--data", TOY, "--output", "out", "--contrast", "4", "1"]));
    let line = report.lines().find(|l| l.starts_with("contrast 4 - 1")).expect(&report);
    let mean: f64 = line.split_whitespace().nth(4).unwrap().trim_end_matches(':').parse().unwrap();
    assert!((mean - 3.0).abs() < 0.2, "{line}");
    let mut reader = csv::Reader::from_path(tmp.path().join("out/contrasts.csv")).unwrap();
    assert_eq!(reader.records().count(), 1);
}

#[test]
fn policy_extremes_and_value_recomputation() {
    let tmp = TempDir::new().unwrap();
    let out = fitted(tmp.path(), "300");
    let policy = |args: &[&str]| {
        let mut all = vec!["policy", "--data", TOY, "--output", "out"];
        all.extend_from_slice(args);
        ok(&braids(tmp.path(), &all));
        read_json(&out.join("policy.json"))
    };

    let nobody = policy(&["--delta", "100"]);
    assert_eq!(nobody["treated"], 0);
    let everyone = policy(&["--utility", "efficacy", "--delta", "-100", "--c", "0"]);
    assert_eq!(everyone["treated"], 300);
    let mixed = policy(&["--delta", "1"]);
    let n = mixed["treated"].as_u64().unwrap();
    assert!(n > 0 && n < 300);
    for record in [&nobody, &everyone, &mixed] {
        let v = record["value"].as_f64().unwrap();
        let r = record["recomputed_value"].as_f64().unwrap();
        assert!((v - r).abs() <= 1e-9 * (1.0 + v.abs()), "{v} vs {r}");
    }
}

#[test]
fn calibrate_prior_reports_closed_form_and_monte_carlo() {
    let tmp = TempDir::new().unwrap();
    let report = ok(&braids(tmp.path(), &["calibrate-prior", "--output", "out", "--samples", "2000"]));
    assert!(report.contains("closed form"), "{report}");
    let record = read_json(&tmp.path().join("out/calibration.json"));
    let closed = record["report"]["closed_form"].as_f64().unwrap();
    assert!((closed - 0.3297).abs() < 5e-4, "{closed}");
    let z = record["report"]["z"].as_f64().unwrap();
    assert!(z.abs() < 4.0, "z = {z}");
    assert!(tmp.path().join("out/heterogeneity_histogram.csv").exists());
}

#[test]
fn small_coverage_simulation_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    fs::write(
        tmp.path().join("sim.toml"),
        "[simulate]\nkind = \"coverage\"\npreset = \"tree\"\n\
         [simulate.experiment]\nn_fit = 200\nn_holdout = 100\nreps = 2\n\
         [simulate.experiment.mcmc]\nn_draws = 100\nn_burn = 50\n\
         [simulate.experiment.search]\nmin_leaf = 20\n",
    )
    .unwrap();
    let run = |out: &str| {
        let report = ok(&braids(tmp.path(), &["simulate", "--config", "sim.toml", "--output", out, "--seed", "11"]));
        (report, fs::read_to_string(tmp.path().join(out).join("summary.csv")).unwrap())
    };
    let (first, summary) = run("a");
    let (second, again) = run("b");
    assert_eq!(first, second);
    assert_eq!(summary, again);
    assert!(summary.lines().count() > 1);
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(braids(tmp.path(), &["fit", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(braids(tmp.path(), &["fit"]).status.code(), Some(1));
    fs::write(tmp.path().join("bad.toml"), "[mcmc]\nn_draw = 10\n").unwrap();
    assert_eq!(braids(tmp.path(), &["fit", "--config", "bad.toml", "--data", TOY]).status.code(), Some(1));
    let greedy = braids(tmp.path(), &["subgroups", "--data", TOY, "--lambda", "0,1", "--mode", "greedy"]);
    assert_eq!(greedy.status.code(), Some(1));
    assert_eq!(braids(tmp.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn computation_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    // No draws have been fitted yet.
    let missing = braids(tmp.path(), &["subgroups", "--data", TOY, "--output", "out"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
    // A minimum leaf no split can satisfy.
    fitted(tmp.path(), "50");
    let infeasible = braids(tmp.path(), &["subgroups", "--data", TOY, "--output", "out", "--mode", "exact", "--min-leaf", "1000"]);
    assert_eq!(infeasible.status.code(), Some(2));
}
