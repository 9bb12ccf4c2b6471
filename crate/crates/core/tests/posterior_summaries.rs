//! Summaries of posterior draws against direct computation.

mod common;

use braids::cutpoints::build_cutpoints;
use braids::data::{Covariate, Dataset, Propensity};
use braids::draws::PosteriorDraws;
use braids::inference::{partition_contrast, partition_summary, quantile, Interval};
use braids::search::{evaluate_prespecified, search_exact, search_greedy_rn, PrespecifiedPartition, SearchConfig, SearchMode};
use braids::tree::{Action, Partition};
use braids::utility::{efficacy_of_actions, group_mean_draws, welfare_of_actions};
use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn draws_and_partition() -> impl Strategy<Value = (PosteriorDraws, Partition)> {
    (2usize..40, 2usize..30, 1usize..5).prop_flat_map(|(n, s, k)| {
        let k = k.min(n);
        (
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, n), s),
            prop::collection::vec(0..k, n - k),
            Just(k),
        )
            .prop_map(|(rows, rest, k)| {
                let mut labels: Vec<usize> = (0..k).collect();
                labels.extend(rest);
                (PosteriorDraws::from_rows(&rows).unwrap(), Partition::new(labels, k).unwrap())
            })
    })
}

proptest! {
    #[test]
    fn group_means_match_direct_sums((draws, part) in draws_and_partition()) {
        let gm = group_mean_draws(&draws, &part).unwrap();
        for s in 0..draws.n_draws() {
            for k in 0..part.k() {
                let members = part.members(k);
                let direct = members.iter().map(|&i| draws.get(s, i)).sum::<f64>() / members.len() as f64;
                prop_assert!((gm.get(s, k) - direct).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn contrast_is_the_difference_of_group_deviations((draws, part) in draws_and_partition()) {
        prop_assume!(part.k() >= 2);
        let summary = partition_summary(&draws, &part, 0.1).unwrap();
        let c = partition_contrast(&draws, &part, part.k(), 1, 0.1).unwrap();
        let last = &summary.groups[part.k() - 1].delta_draws;
        let first = &summary.groups[0].delta_draws;
        for s in 0..draws.n_draws() {
            prop_assert!((c.draws[s] - (last[s] - first[s])).abs() <= 1e-12);
        }
        let reverse = partition_contrast(&draws, &part, 1, part.k(), 0.1).unwrap();
        prop_assert!((c.mean + reverse.mean).abs() <= 1e-12);
    }

    #[test]
    fn quantiles_match_order_statistics(values in prop::collection::vec(-10.0f64..10.0, 1..200), p in 0.0f64..=1.0) {
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let h = (sorted.len() - 1) as f64 * p;
        let (lo, frac) = (h.floor() as usize, h - h.floor());
        let want = if frac == 0.0 { sorted[lo] } else { sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac };
        prop_assert!((quantile(&values, p) - want).abs() <= 1e-12 * (1.0 + want.abs()));
        let iv = Interval::equal_tailed(&values, 0.1);
        prop_assert!(iv.lo <= iv.hi);
    }

    #[test]
    fn policy_values_are_posterior_means_of_per_draw_values(
        rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 12), 2..30),
        treat in prop::collection::vec(any::<bool>(), 12),
        delta in -1.0f64..1.0,
    ) {
        let draws = PosteriorDraws::from_rows(&rows).unwrap();
        let actions: Vec<Action> = treat.iter().map(|&t| if t { Action::Treat } else { Action::Control }).collect();
        let s = rows.len() as f64;
        let per_draw_welfare: f64 = rows
            .iter()
            .map(|r| r.iter().zip(&treat).filter(|(_, &t)| t).map(|(v, _)| v - delta).sum::<f64>())
            .sum::<f64>() / s;
        prop_assert!((welfare_of_actions(&draws, &actions, delta).unwrap() - per_draw_welfare).abs() <= 1e-12 * (1.0 + per_draw_welfare.abs()));
        let per_draw_efficacy: f64 = rows
            .iter()
            .map(|r| r.iter().zip(&treat).filter(|(_, &t)| t).map(|(v, _)| f64::from(u8::from(*v >= delta)) - 0.3).sum::<f64>())
            .sum::<f64>() / s;
        prop_assert!((efficacy_of_actions(&draws, &actions, delta, 0.3).unwrap() - per_draw_efficacy).abs() <= 1e-12 * (1.0 + per_draw_efficacy.abs()));
    }
}

#[test]
fn greedy_and_exact_agree_at_depth_one() {
    let mut rng = rng(505);
    for _ in 0..40 {
        let n = rng.random_range(10..=40);
        let d = random_dataset(&mut rng, n, 3);
        let draws = random_draws(&mut rng, n, 30);
        let grid = build_cutpoints(&d, 2, 8);
        let cfg = SearchConfig { max_depth: 1, min_leaf: 2, mode: SearchMode::Exact, lambda: 1.0, depth_penalty: 0.0 };
        let exact = search_exact(&draws, &d, &grid, &cfg).unwrap();
        let greedy = search_greedy_rn(&draws.posterior_mean(), &d, &grid, &cfg).unwrap();
        let exact_labels = canonical_labels(&exact.tree.assign(&d).unwrap());
        let greedy_labels = canonical_labels(&greedy.assign(&d).unwrap());
        assert_eq!(exact_labels, greedy_labels);
    }
}

/// Two three-level factors; the effect depends on the first only.
fn factor_data(rng: &mut impl Rng, n: usize) -> (Dataset, PosteriorDraws) {
    let x = DMatrix::from_fn(n, 2, |_, _| f64::from(rng.random_range(0..3u8)));
    let d = Dataset::new(
        vec![0.0; n],
        (0..n).map(|i| (i % 2) as u8).collect(),
        x.clone(),
        vec![Covariate::categorical("f1", 3), Covariate::categorical("f2", 3)],
        Propensity::Constant(0.5),
    )
    .unwrap();
    let unit: Vec<f64> = (0..n).map(|i| 0.25 * x[(i, 0)] + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let rows: Vec<Vec<f64>> = (0..200)
        .map(|_| {
            let shared: f64 = StandardNormal.sample(rng);
            (0..n)
                .map(|i| unit[i] + 0.2 * shared + 0.3 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    (d, PosteriorDraws::from_rows(&rows).unwrap())
}

#[test]
fn effect_driving_factor_outranks_noise_factor() {
    let mut rng = rng(606);
    let groups = [
        PrespecifiedPartition { name: "f1".into(), factors: vec!["f1".into()] },
        PrespecifiedPartition { name: "f2".into(), factors: vec!["f2".into()] },
    ];
    let mut wins = 0;
    for _ in 0..100 {
        let (d, draws) = factor_data(&mut rng, 90);
        let rows = evaluate_prespecified(&draws, &d, &groups, &[1.0]).unwrap();
        if rows[0].rank == Some(1) {
            wins += 1;
        }
    }
    println!("f1 ranked first in {wins} of 100 runs");
    assert!(wins >= 95, "{wins} of 100");
}
