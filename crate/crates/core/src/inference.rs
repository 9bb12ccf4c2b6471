//! Posterior summaries of selected subgroups and the AIPW subgroup estimator.

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::draws::PosteriorDraws;
use crate::error::{Error, Result};
use crate::tree::{Partition, SubgroupTree};
use crate::utility::{group_mean_draws, mean};

/// Type-7 sample quantile (linear interpolation between order statistics).
/// `sorted` must be in ascending order.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    /// Equal-tailed `1 − alpha` interval of a sample.
    pub fn equal_tailed(values: &[f64], alpha: f64) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Interval {
            lo: quantile_sorted(&v, alpha / 2.0),
            hi: quantile_sorted(&v, 1.0 - alpha / 2.0),
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

fn frac_below(v: &[f64], t: f64) -> f64 {
    v.iter().filter(|&&x| x < t).count() as f64 / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    /// 1-based group label.
    pub group: usize,
    pub size: usize,
    pub tau_hat: f64,
    pub interval: Interval,
    /// Draws of `Δ_k = τ(G_k) − τ(𝒳)`.
    pub delta_draws: Vec<f64>,
    pub delta_mean: f64,
    pub delta_interval: Interval,
    /// `P(Δ_k < 0 | D)`
    pub prob_delta_negative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupSummary {
    pub alpha: f64,
    pub groups: Vec<GroupSummary>,
}

impl SubgroupSummary {
    pub fn write_table(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Malformed(e.to_string()))?;
        let err = |e: csv::Error| Error::Malformed(e.to_string());
        w.write_record([
            "group", "size", "tau_hat", "tau_lo", "tau_hi", "delta_mean", "delta_lo", "delta_hi", "prob_delta_negative",
        ])
        .map_err(err)?;
        for g in &self.groups {
            w.write_record(&[
                g.group.to_string(),
                g.size.to_string(),
                g.tau_hat.to_string(),
                g.interval.lo.to_string(),
                g.interval.hi.to_string(),
                g.delta_mean.to_string(),
                g.delta_interval.lo.to_string(),
                g.delta_interval.hi.to_string(),
                g.prob_delta_negative.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Posterior summaries for the cells of a partition.
pub fn partition_summary(draws: &PosteriorDraws, part: &Partition, alpha: f64) -> Result<SubgroupSummary> {
    check_alpha(alpha)?;
    let gm = group_mean_draws(draws, part)?;
    let ate = draws.ate();
    let groups = (0..part.k())
        .map(|k| {
            let tau = gm.column(k);
            let delta: Vec<f64> = tau.iter().zip(ate).map(|(t, a)| t - a).collect();
            GroupSummary {
                group: k + 1,
                size: part.sizes()[k],
                tau_hat: mean(&tau),
                interval: Interval::equal_tailed(&tau, alpha),
                delta_mean: mean(&delta),
                delta_interval: Interval::equal_tailed(&delta, alpha),
                prob_delta_negative: frac_below(&delta, 0.0),
                delta_draws: delta,
            }
        })
        .collect();
    Ok(SubgroupSummary { alpha, groups })
}

/// Posterior summaries for the leaves of `tree`.
pub fn subgroup_summary(draws: &PosteriorDraws, tree: &SubgroupTree, d: &Dataset, alpha: f64) -> Result<SubgroupSummary> {
    partition_summary(draws, &tree.partition(d)?, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastSummary {
    pub k1: usize,
    pub k2: usize,
    /// Draws of `τ(G_k1) − τ(G_k2)`.
    pub draws: Vec<f64>,
    pub mean: f64,
    pub interval: Interval,
    pub prob_negative: f64,
}

/// Posterior of the difference between two groups (1-based labels).
pub fn partition_contrast(draws: &PosteriorDraws, part: &Partition, k1: usize, k2: usize, alpha: f64) -> Result<ContrastSummary> {
    check_alpha(alpha)?;
    if k1 == k2 {
        return Err(Error::invalid("a contrast needs two distinct groups"));
    }
    for k in [k1, k2] {
        if k == 0 || k > part.k() {
            return Err(Error::invalid(format!("group {k} does not exist (K = {})", part.k())));
        }
    }
    let gm = group_mean_draws(draws, part)?;
    let diff: Vec<f64> = (0..gm.rows).map(|s| gm.get(s, k1 - 1) - gm.get(s, k2 - 1)).collect();
    Ok(ContrastSummary {
        k1,
        k2,
        mean: mean(&diff),
        interval: Interval::equal_tailed(&diff, alpha),
        prob_negative: frac_below(&diff, 0.0),
        draws: diff,
    })
}

pub fn subgroup_contrast(draws: &PosteriorDraws, tree: &SubgroupTree, d: &Dataset, k1: usize, k2: usize, alpha: f64) -> Result<ContrastSummary> {
    partition_contrast(draws, &tree.partition(d)?, k1, k2, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AipwEstimate {
    pub estimate: f64,
    pub se: f64,
    pub interval: Interval,
    pub n: usize,
    pub influence: Vec<f64>,
}

/// `μ̂1(X_i) − μ̂0(X_i) + (A_i − e_i)(Y_i − μ̂_{A_i}(X_i)) / {e_i (1 − e_i)}`
pub fn aipw_influence(d: &Dataset, mu0: &[f64], mu1: &[f64]) -> Result<Vec<f64>> {
    if mu0.len() != d.n() || mu1.len() != d.n() {
        return Err(Error::invalid("one regression prediction per unit and arm is required"));
    }
    (0..d.n())
        .map(|i| {
            let e = d.propensity(i);
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::InvalidPropensity {
                    row: i,
                    value: e,
                    lo: 0.0,
                    hi: 1.0,
                });
            }
            let a = d.treatment()[i];
            let fitted = if a == 1 { mu1[i] } else { mu0[i] };
            Ok(mu1[i] - mu0[i] + (a as f64 - e) * (d.y()[i] - fitted) / (e * (1.0 - e)))
        })
        .collect()
}

fn summarize_influence(influence: Vec<f64>) -> Result<AipwEstimate> {
    let n = influence.len();
    if n == 0 {
        return Err(Error::EmptySubgroup(0));
    }
    let estimate = mean(&influence);
    let se = if n > 1 {
        let ss: f64 = influence.iter().map(|v| (v - estimate).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
    } else {
        f64::NAN
    };
    let z = Normal::standard().inverse_cdf(0.975);
    Ok(AipwEstimate {
        estimate,
        se,
        interval: Interval {
            lo: estimate - z * se,
            hi: estimate + z * se,
        },
        n,
        influence,
    })
}

/// AIPW estimate of the effect in the units selected by `mask`.
pub fn aipw_subgroup(d: &Dataset, mu0: &[f64], mu1: &[f64], mask: &[bool]) -> Result<AipwEstimate> {
    if mask.len() != d.n() {
        return Err(Error::invalid("mask length does not match the data set"));
    }
    let all = aipw_influence(d, mu0, mu1)?;
    summarize_influence(all.into_iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).collect())
}

/// AIPW estimate for each cell of a partition.
pub fn aipw_by_group(d: &Dataset, mu0: &[f64], mu1: &[f64], part: &Partition) -> Result<Vec<AipwEstimate>> {
    if part.n() != d.n() {
        return Err(Error::invalid("partition does not match the data set"));
    }
    let all = aipw_influence(d, mu0, mu1)?;
    (0..part.k())
        .map(|k| {
            let vals: Vec<f64> = part.members(k).into_iter().map(|i| all[i]).collect();
            summarize_influence(vals).map_err(|_| Error::EmptySubgroup(k + 1))
        })
        .collect()
}

/// Gaussian kernel density estimate on an evenly spaced grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub bandwidth: f64,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

impl Density {
    /// Silverman's rule-of-thumb bandwidth; the grid extends three bandwidths
    /// past the sample range.
    pub fn estimate(values: &[f64], grid_points: usize) -> Result<Self> {
        if values.len() < 2 || grid_points < 2 {
            return Err(Error::invalid("density needs at least 2 values and 2 grid points"));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let m = mean(&sorted);
        let sd = (sorted.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
        let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
        let mut bandwidth = 0.9 * spread * n.powf(-0.2);
        if bandwidth <= 0.0 {
            bandwidth = 1e-3 * m.abs().max(1.0);
        }
        let (lo, hi) = (sorted[0] - 3.0 * bandwidth, sorted[sorted.len() - 1] + 3.0 * bandwidth);
        let step = (hi - lo) / (grid_points - 1) as f64;
        let norm = 1.0 / (n * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
        let x: Vec<f64> = (0..grid_points).map(|g| lo + step * g as f64).collect();
        let density = x
            .iter()
            .map(|&g| norm * sorted.iter().map(|v| (-0.5 * ((g - v) / bandwidth).powi(2)).exp()).sum::<f64>())
            .collect();
        Ok(Density { bandwidth, x, density })
    }

    pub fn write_csv(&self, path: &Path, label: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Malformed(e.to_string()))?;
        let err = |e: csv::Error| Error::Malformed(e.to_string());
        w.write_record(["series", "bandwidth", "x", "density"]).map_err(err)?;
        for (x, f) in self.x.iter().zip(&self.density) {
            w.write_record(&[label.to_string(), self.bandwidth.to_string(), x.to_string(), f.to_string()])
                .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// Chain diagnostics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub parameter: String,
    pub mean: f64,
    pub sd: f64,
    /// Lag-1 sample autocorrelation; `NaN` for a constant chain.
    pub lag1: f64,
}

impl TraceSummary {
    pub fn of(parameter: impl Into<String>, chain: &[f64]) -> Result<Self> {
        if chain.len() < 2 {
            return Err(Error::invalid("a trace needs at least 2 draws"));
        }
        let m = mean(chain);
        let ss: f64 = chain.iter().map(|v| (v - m) * (v - m)).sum();
        let cross: f64 = chain.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
        Ok(TraceSummary {
            parameter: parameter.into(),
            mean: m,
            sd: (ss / (chain.len() - 1) as f64).sqrt(),
            lag1: if ss > 0.0 { cross / ss } else { f64::NAN },
        })
    }
}

/// Trace summaries of the ATE, the two scale parameters and, when stored,
/// every coefficient.
pub fn trace_summaries(draws: &PosteriorDraws) -> Result<Vec<TraceSummary>> {
    let mut out = vec![TraceSummary::of("ate", draws.ate())?];
    let hyper = draws.hyper();
    if hyper.len() == draws.n_draws() {
        let sigma: Vec<f64> = hyper.iter().map(|h| h.sigma).collect();
        let sigma_tau: Vec<f64> = hyper.iter().map(|h| h.sigma_tau).collect();
        out.push(TraceSummary::of("sigma", &sigma)?);
        out.push(TraceSummary::of("sigma_tau", &sigma_tau)?);
    }
    if let Some(c) = draws.coefficients() {
        for (j, name) in c.names.iter().enumerate() {
            out.push(TraceSummary::of(name.clone(), &c.values.column(j))?);
        }
    }
    Ok(out)
}

pub fn write_trace_summaries(rows: &[TraceSummary], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Malformed(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Malformed(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_summary_of_alternating_chain() {
        let t = TraceSummary::of("x", &[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_eq!(t.mean, 0.0);
        assert!((t.sd - (4.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((t.lag1 + 0.75).abs() < 1e-12);
        assert!(TraceSummary::of("c", &[2.0, 2.0]).unwrap().lag1.is_nan());
    }
    use crate::data::{Covariate, Propensity};
    use crate::tree::{Node, Split};
    use nalgebra::DMatrix;

    fn four() -> (Dataset, PosteriorDraws, SubgroupTree) {
        let d = Dataset::new(
            vec![0.0; 4],
            vec![0, 1, 0, 1],
            DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]),
            vec![Covariate::continuous("x1")],
            Propensity::Constant(0.5),
        )
        .unwrap();
        let draws = PosteriorDraws::from_rows(&[vec![2.0, 2.0, 0.0, 0.0], vec![2.0, 2.0, 0.0, 0.0]]).unwrap();
        let tree = SubgroupTree::from_shape(&Node::split(
            Split::Threshold {
                column: 0,
                threshold: 2.5,
            },
            Node::Leaf(()),
            Node::Leaf(()),
        ));
        (d, draws, tree)
    }

    #[test]
    fn type7_quantiles() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert!((quantile(&v, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn zero_variance_summary_and_contrast() {
        let (d, draws, tree) = four();
        let s = subgroup_summary(&draws, &tree, &d, 0.05).unwrap();
        assert_eq!(s.groups[0].delta_mean, 1.0);
        assert_eq!(s.groups[1].delta_mean, -1.0);
        assert_eq!(s.groups[0].delta_interval, Interval { lo: 1.0, hi: 1.0 });
        assert_eq!(s.groups[1].prob_delta_negative, 1.0);
        let c = subgroup_contrast(&draws, &tree, &d, 1, 2, 0.05).unwrap();
        assert_eq!(c.mean, 2.0);
        assert!(subgroup_contrast(&draws, &tree, &d, 1, 1, 0.05).is_err());
        assert!(subgroup_contrast(&draws, &tree, &d, 1, 3, 0.05).is_err());
    }

    #[test]
    fn single_group_has_zero_deviation() {
        let (d, draws, _) = four();
        let s = subgroup_summary(&draws, &SubgroupTree::trivial(), &d, 0.1).unwrap();
        assert!(s.groups[0].delta_draws.iter().all(|&v| v == 0.0));
        assert_eq!(s.groups[0].delta_interval, Interval { lo: 0.0, hi: 0.0 });
    }

    #[test]
    fn aipw_ipw_form() {
        let d = Dataset::new(
            vec![2.0],
            vec![1],
            DMatrix::zeros(1, 0),
            vec![],
            Propensity::Constant(0.5),
        )
        .unwrap();
        let inf = aipw_influence(&d, &[0.0], &[0.0]).unwrap();
        assert_eq!(inf, vec![4.0]);
    }

    #[test]
    fn aipw_exact_outcome_model_recovers_effects() {
        let d = Dataset::new(
            vec![1.0, 3.5, -1.0],
            vec![0, 1, 1],
            DMatrix::zeros(3, 0),
            vec![],
            Propensity::PerUnit(vec![0.3, 0.6, 0.2]),
        )
        .unwrap();
        let mu0 = [1.0, 0.5, -2.0];
        let mu1 = [2.0, 3.5, -1.0];
        let inf = aipw_influence(&d, &mu0, &mu1).unwrap();
        for i in 0..3 {
            assert!((inf[i] - (mu1[i] - mu0[i])).abs() < 1e-14);
        }
        let est = aipw_subgroup(&d, &mu0, &mu1, &[true, true, false]).unwrap();
        assert_eq!(est.n, 2);
        assert!((est.estimate - 2.0).abs() < 1e-14);
    }

    #[test]
    fn density_integrates_to_one() {
        let v: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 / 50.0).collect();
        let dens = Density::estimate(&v, 512).unwrap();
        let step = dens.x[1] - dens.x[0];
        let area: f64 = dens.density.iter().sum::<f64>() * step;
        assert!((area - 1.0).abs() < 1e-2, "{area}");
    }
}
