//! Posterior expected utilities of partitions and treatment policies.
//!
//! For a partition `G = {G_1, …, G_K}` of the units and risk parameter `λ`,
//! the expected utility (up to a constant that does not depend on `G`) is
//!
//! ```text
//! R(G) = (1/N) Σ_k N_k (1 − λ) Var{τ(G_k) | D}  −  (1/N) Σ_i {τ̂(X_i) − τ̂(G_(i))}²
//! ```
//!
//! `λ < 1` is risk seeking, `λ = 1` risk neutral and `λ > 1` risk averse.
//! Posterior moments are plug-in moments of the draws (denominator `S`).

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::draws::{Matrix, PosteriorDraws};
use crate::error::{Error, Result};
use crate::tree::{Action, Partition, PolicyTree, SubgroupTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupUtility {
    /// 1-based group label.
    pub group: usize,
    pub size: usize,
    /// Posterior mean `τ̂(G_k)`.
    pub tau_hat: f64,
    /// Posterior variance `Var{τ(G_k) | D}`.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub lambda: f64,
    /// `(1 − λ)·var_term − within_sse`.
    pub value: f64,
    pub groups: Vec<GroupUtility>,
    /// `(1/N) Σ_i {τ̂(X_i) − τ̂(G_(i))}²`
    pub within_sse: f64,
    /// `(1/N) Σ_k N_k Var{τ(G_k) | D}`
    pub var_term: f64,
}

fn check_shapes(draws: &PosteriorDraws, part: &Partition) -> Result<()> {
    if draws.n_units() != part.n() {
        return Err(Error::invalid(format!(
            "draws cover {} units but the partition has {}",
            draws.n_units(),
            part.n()
        )));
    }
    if let Some(k) = part.first_empty() {
        return Err(Error::EmptySubgroup(k + 1));
    }
    Ok(())
}

/// `S × K` matrix whose entry `(s, k)` is the mean of draw `s` over group `k`.
pub fn group_mean_draws(draws: &PosteriorDraws, part: &Partition) -> Result<Matrix> {
    check_shapes(draws, part)?;
    let (s_n, k) = (draws.n_draws(), part.k());
    let mut out = Matrix::zeros(s_n, k);
    let groups = part.groups();
    let mut acc = vec![0.0; k];
    for s in 0..s_n {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (v, &g) in draws.row(s).iter().zip(groups) {
            acc[g] += v;
        }
        for (g, &total) in acc.iter().enumerate() {
            out.set(s, g, total / part.sizes()[g] as f64);
        }
    }
    Ok(out)
}

/// Per-draw subgroup effects `τ(G_k)` for the leaves of `tree` on `d`.
pub fn subgroup_tau_draws(draws: &PosteriorDraws, tree: &SubgroupTree, d: &Dataset) -> Result<Matrix> {
    group_mean_draws(draws, &tree.partition(d)?)
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Plug-in variance (denominator = length).
pub(crate) fn plugin_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

fn within_sse(tau_hat: &[f64], part: &Partition, group_hat: &[f64]) -> f64 {
    tau_hat
        .iter()
        .zip(part.groups())
        .map(|(t, &g)| (t - group_hat[g]).powi(2))
        .sum::<f64>()
        / part.n() as f64
}

struct GroupMoments {
    hat: Vec<f64>,
    var: Vec<f64>,
}

fn group_moments(gm: &Matrix) -> GroupMoments {
    let (hat, var) = (0..gm.cols)
        .map(|k| {
            let col = gm.column(k);
            (mean(&col), plugin_var(&col))
        })
        .unzip();
    GroupMoments { hat, var }
}

/// Risk-parameterized expected utility of a partition.
pub fn expected_utility(draws: &PosteriorDraws, part: &Partition, lambda: f64) -> Result<UtilityReport> {
    if draws.n_draws() < 2 {
        return Err(Error::invalid("at least 2 draws are needed"));
    }
    let gm = group_mean_draws(draws, part)?;
    let GroupMoments { hat, var } = group_moments(&gm);
    let tau_hat = draws.posterior_mean();
    let n = part.n() as f64;
    let within = within_sse(&tau_hat, part, &hat);
    let var_term = part
        .sizes()
        .iter()
        .zip(&var)
        .map(|(&nk, v)| nk as f64 * v)
        .sum::<f64>()
        / n;
    Ok(UtilityReport {
        lambda,
        value: (1.0 - lambda) * var_term - within,
        groups: (0..part.k())
            .map(|k| GroupUtility {
                group: k + 1,
                size: part.sizes()[k],
                tau_hat: hat[k],
                variance: var[k],
            })
            .collect(),
        within_sse: within,
        var_term,
    })
}

/// [`expected_utility`] for the leaves of a subgroup tree.
pub fn expected_utility_braids(draws: &PosteriorDraws, tree: &SubgroupTree, d: &Dataset, lambda: f64) -> Result<UtilityReport> {
    expected_utility(draws, &tree.partition(d)?, lambda)
}

/// Expected utility when group `k` is reported with prediction `t[k]` rather
/// than its posterior mean:
/// `(1/N) Σ_k N_k [(1 − λ) Var_k − λ (τ̂(G_k) − t_k)²] − within_sse`.
pub fn expected_utility_with_predictions(draws: &PosteriorDraws, part: &Partition, lambda: f64, t: &[f64]) -> Result<f64> {
    if t.len() != part.k() {
        return Err(Error::invalid("one prediction per group is required"));
    }
    let report = expected_utility(draws, part, lambda)?;
    let penalty = report
        .groups
        .iter()
        .zip(t)
        .map(|(g, tk)| g.size as f64 * (g.tau_hat - tk).powi(2))
        .sum::<f64>()
        / part.n() as f64;
    Ok(report.value - lambda * penalty)
}

/// The risk-seeking (`λ = 0`) utility two ways.
///
/// `form_a` is the direct posterior expectation
/// `(1/N) Σ_k N_k [{τ̂(G_k) − τ̂(𝒳)}² + Var{τ(G_k) − τ(𝒳) | D}]`;
/// `form_b` is [`expected_utility`] at `λ = 0`. Their difference depends only
/// on the draws, not on the partition.
pub fn expected_utility_rs_decomposed(draws: &PosteriorDraws, part: &Partition) -> Result<(f64, f64)> {
    let gm = group_mean_draws(draws, part)?;
    let ate = draws.ate();
    let ate_hat = mean(ate);
    let n = part.n() as f64;
    let mut form_a = 0.0;
    let mut diff = vec![0.0; gm.rows];
    for k in 0..gm.cols {
        let col = gm.column(k);
        for (s, d) in diff.iter_mut().enumerate() {
            *d = col[s] - ate[s];
        }
        let nk = part.sizes()[k] as f64;
        form_a += nk * ((mean(&col) - ate_hat).powi(2) + plugin_var(&diff));
    }
    form_a /= n;
    let form_b = expected_utility(draws, part, 0.0)?.value;
    Ok((form_a, form_b))
}

fn check_actions(draws: &PosteriorDraws, actions: &[Action]) -> Result<()> {
    if actions.len() != draws.n_units() {
        return Err(Error::invalid("one action per unit is required"));
    }
    Ok(())
}

/// `Σ_i V(X_i) {τ̂(X_i) − δ}` for per-unit actions.
pub fn welfare_of_actions(draws: &PosteriorDraws, actions: &[Action], delta: f64) -> Result<f64> {
    check_actions(draws, actions)?;
    Ok(draws
        .posterior_mean()
        .iter()
        .zip(actions)
        .filter(|(_, a)| a.treats())
        .map(|(t, _)| t - delta)
        .sum())
}

/// Posterior probability `Π{τ(X_i) ≥ δ | D}` for every unit.
pub fn efficacy_probabilities(draws: &PosteriorDraws, delta: f64) -> Vec<f64> {
    let mut counts = vec![0usize; draws.n_units()];
    for s in 0..draws.n_draws() {
        for (c, &v) in counts.iter_mut().zip(draws.row(s)) {
            if v >= delta {
                *c += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|c| c as f64 / draws.n_draws() as f64)
        .collect()
}

/// `Σ_i V(X_i) [Π{τ(X_i) ≥ δ | D} − c]` for per-unit actions.
pub fn efficacy_of_actions(draws: &PosteriorDraws, actions: &[Action], delta: f64, c: f64) -> Result<f64> {
    check_actions(draws, actions)?;
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::invalid(format!("false-positive tolerance c = {c} is outside [0, 1]")));
    }
    Ok(efficacy_probabilities(draws, delta)
        .iter()
        .zip(actions)
        .filter(|(_, a)| a.treats())
        .map(|(p, _)| p - c)
        .sum())
}

/// Expected welfare of a policy tree with per-unit cost `delta`.
pub fn expected_welfare(draws: &PosteriorDraws, policy: &PolicyTree, d: &Dataset, delta: f64) -> Result<f64> {
    welfare_of_actions(draws, &policy.actions(d)?, delta)
}

/// Expected efficacy of a policy tree at threshold `delta` and tolerance `c`.
pub fn expected_efficacy(draws: &PosteriorDraws, policy: &PolicyTree, d: &Dataset, delta: f64, c: f64) -> Result<f64> {
    efficacy_of_actions(draws, &policy.actions(d)?, delta, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_var_draws() -> PosteriorDraws {
        PosteriorDraws::from_rows(&[vec![1.0, 1.0, -1.0, -1.0], vec![1.0, 1.0, -1.0, -1.0]]).unwrap()
    }

    #[test]
    fn group_means_by_hand() {
        let p = Partition::new(vec![0, 0, 1, 1], 2).unwrap();
        let gm = group_mean_draws(&zero_var_draws(), &p).unwrap();
        assert_eq!(gm.data, vec![1.0, -1.0, 1.0, -1.0]);
        let pooled = group_mean_draws(&zero_var_draws(), &Partition::pooled(4)).unwrap();
        assert_eq!(pooled.column(0), zero_var_draws().ate());
    }

    #[test]
    fn perfect_and_pooled_partitions() {
        let d = zero_var_draws();
        let perfect = Partition::new(vec![0, 0, 1, 1], 2).unwrap();
        for lambda in [0.0, 1.0, 2.0] {
            assert_eq!(expected_utility(&d, &perfect, lambda).unwrap().value, 0.0);
            let pooled = expected_utility(&d, &Partition::pooled(4), lambda).unwrap();
            assert_eq!(pooled.value, -1.0);
            assert_eq!(pooled.within_sse, 1.0);
        }
        let (a, b) = expected_utility_rs_decomposed(&d, &perfect).unwrap();
        assert_eq!((a, b), (1.0, 0.0));
        let (a, _) = expected_utility_rs_decomposed(&d, &Partition::pooled(4)).unwrap();
        assert_eq!(a, 0.0);
    }

    #[test]
    fn variance_contribution_of_two_unit_group() {
        // units 0,1 have group mean draws (1, −1); units 2,3 are fixed.
        let d = PosteriorDraws::from_rows(&[vec![1.0, 1.0, 0.0, 0.0], vec![-1.0, -1.0, 0.0, 0.0]]).unwrap();
        let p = Partition::new(vec![0, 0, 1, 1], 2).unwrap();
        for lambda in [0.0, 0.5, 2.0] {
            let r = expected_utility(&d, &p, lambda).unwrap();
            assert_eq!(r.groups[0].variance, 1.0);
            assert!((r.value - (1.0 - lambda) * 2.0 / 4.0).abs() < 1e-15);
        }
        let r = expected_utility(&d, &p, 1.0).unwrap();
        assert_eq!(r.value, -r.within_sse);
    }

    #[test]
    fn empty_group_is_an_error() {
        let p = Partition::new(vec![0, 0, 0, 0], 2).unwrap();
        assert!(matches!(expected_utility(&zero_var_draws(), &p, 1.0), Err(Error::EmptySubgroup(2))));
    }

    #[test]
    fn welfare_and_efficacy() {
        let d = PosteriorDraws::from_rows(&[vec![0.5, -0.2], vec![0.5, -0.2]]).unwrap();
        let all = [Action::Treat, Action::Treat];
        let none = [Action::Control, Action::Control];
        assert!((welfare_of_actions(&d, &all, 0.0).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(welfare_of_actions(&d, &none, 0.0).unwrap(), 0.0);
        let one = PosteriorDraws::from_rows(&[vec![0.1], vec![0.2], vec![-0.1], vec![0.3]]).unwrap();
        assert_eq!(efficacy_probabilities(&one, 0.0), vec![0.75]);
        assert_eq!(efficacy_of_actions(&one, &[Action::Treat], 0.0, 0.0).unwrap(), 0.75);
        assert_eq!(efficacy_probabilities(&one, 1.0), vec![0.0]);
        assert!(efficacy_of_actions(&one, &[Action::Treat], 0.0, 1.5).is_err());
    }
}
