//! Miss ratios, hindsight optimum, regret and cross-run decile bands.

use serde::{Deserialize, Serialize};

use crate::catalog::{CatalogConfig, CumulativeCounts, RequestBatch, TieBreak, TopC};
use crate::error::{invalid, Result};
use crate::estimators::BoundParams;

/// Per-slot costs of one (policy, run).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeries {
    pub policy: String,
    pub run: usize,
    pub costs: Vec<u64>,
}

impl RunSeries {
    pub fn total_cost(&self) -> u64 {
        self.costs.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub cumulative_cost: u64,
    pub opt_cost: u64,
    /// `cumulative_cost - opt_cost`; may be negative for a single run.
    pub empirical_regret: i64,
    pub theoretical_bound: Option<f64>,
}

/// Cumulative mean miss ratio: entry `t` is `sum(cost[..=t]) / (B * (t + 1))`.
pub fn average_miss_ratio(costs: &[u64], batch: usize) -> Vec<f64> {
    let mut total = 0u64;
    costs
        .iter()
        .enumerate()
        .map(|(t, &c)| {
            total += c;
            total as f64 / (batch as f64 * (t + 1) as f64)
        })
        .collect()
}

/// Cost of the best static cache in hindsight: the requests for files
/// outside the top-C of the total counts.
pub fn opt_cost(batches: &[RequestBatch], cfg: &CatalogConfig) -> Result<u64> {
    let mut totals = vec![0u64; cfg.files];
    for b in batches {
        if b.files() != cfg.files {
            return Err(invalid("batch catalog size does not match config"));
        }
        for &(i, c) in b.entries() {
            totals[i as usize] += u64::from(c);
        }
    }
    let score: Vec<f64> = totals.iter().map(|&v| v as f64).collect();
    let x = TopC::new(cfg.files).select(&score, cfg.cache, TieBreak::LowestIndex)?;
    Ok(totals
        .iter()
        .enumerate()
        .filter(|&(i, _)| x.is_missing(i))
        .map(|(_, &v)| v)
        .sum())
}

pub fn empirical_regret(series: &RunSeries, opt: u64, bound: Option<f64>) -> RegretReport {
    let total = series.total_cost();
    RegretReport {
        cumulative_cost: total,
        opt_cost: opt,
        empirical_regret: total as i64 - opt as i64,
        theoretical_bound: bound,
    }
}

/// `2 * sqrt(r_hat * a_hat * D * T)`.
pub fn bound_value(bounds: &BoundParams, horizon: usize) -> f64 {
    2.0 * (bounds.r_hat * bounds.a_hat * bounds.diameter * horizon as f64).sqrt()
}

/// Hindsight comparison under estimated counts: `<r̂, M(r̂)>` against
/// `<r̂, M(r)>`, where `r̂` / `r` are the estimated / exact totals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatedOpt {
    pub estimated_opt: f64,
    pub true_opt_estimated: f64,
    /// `<r̂, M(r̂)> <= <r̂, M(r)>` established without rounding.
    pub holds: bool,
}

/// Evaluates the estimated-opt inequality exactly. The two caches differ on
/// equally sized file sets; sorting the estimated values on both sides and
/// checking them pairwise proves the sum inequality without comparing
/// rounded sums. If the pairwise check fails the (rounded) sums decide.
pub fn estimated_opt_pair(
    estimated: &CumulativeCounts,
    exact: &CumulativeCounts,
    cfg: &CatalogConfig,
) -> Result<EstimatedOpt> {
    let mut topc = TopC::new(cfg.files);
    let est_opt = topc.select(estimated.totals(), cfg.cache, TieBreak::LowestIndex)?;
    let true_opt = topc.select(exact.totals(), cfg.cache, TieBreak::LowestIndex)?;
    let r_hat = estimated.totals();
    let lhs = est_opt.dot(r_hat)?;
    let rhs = true_opt.dot(r_hat)?;

    let mut only_est: Vec<f64> = Vec::new();
    let mut only_true: Vec<f64> = Vec::new();
    for (i, &v) in r_hat.iter().enumerate() {
        match (est_opt.is_missing(i), true_opt.is_missing(i)) {
            (true, false) => only_est.push(v),
            (false, true) => only_true.push(v),
            _ => {}
        }
    }
    only_est.sort_by(f64::total_cmp);
    only_true.sort_by(f64::total_cmp);
    let dominated =
        only_est.len() == only_true.len() && only_est.iter().zip(&only_true).all(|(a, b)| a <= b);
    Ok(EstimatedOpt {
        estimated_opt: lhs,
        true_opt_estimated: rhs,
        holds: dominated || lhs <= rhs,
    })
}

/// Per-slot mean and nearest-rank first/ninth deciles across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileBand {
    pub mean: Vec<f64>,
    pub d1: Vec<f64>,
    pub d9: Vec<f64>,
}

impl DecileBand {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Nearest rank `ceil(tenths * m / 10)` (1-based), computed in integers.
fn decile_rank(tenths: usize, m: usize) -> usize {
    (tenths * m).div_ceil(10).max(1)
}

pub fn decile_band(runs: &[Vec<f64>]) -> Result<DecileBand> {
    let Some(first) = runs.first() else {
        return Err(invalid("decile band needs at least one run"));
    };
    let len = first.len();
    if runs.iter().any(|r| r.len() != len) {
        return Err(invalid("runs have different lengths"));
    }
    let m = runs.len();
    let (r1, r9) = (decile_rank(1, m) - 1, decile_rank(9, m) - 1);
    let mut band = DecileBand {
        mean: Vec::with_capacity(len),
        d1: Vec::with_capacity(len),
        d9: Vec::with_capacity(len),
    };
    let mut column = Vec::with_capacity(m);
    for t in 0..len {
        column.clear();
        column.extend(runs.iter().map(|r| r[t]));
        band.mean.push(column.iter().sum::<f64>() / m as f64);
        column.sort_by(f64::total_cmp);
        band.d1.push(column[r1]);
        band.d9.push(column[r9]);
    }
    Ok(band)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{cost, DecisionVector};
    use crate::estimators::{estimate, EstimatorSpec};
    use crate::traces::{batch_trace, generate_round_robin, RoundRobinConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn miss_ratio_examples() {
        assert_eq!(average_miss_ratio(&[200, 0], 200), vec![1.0, 0.5]);
        assert_eq!(average_miss_ratio(&[0, 0, 0], 7), vec![0.0; 3]);
        assert_eq!(average_miss_ratio(&[7, 7, 7], 7), vec![1.0; 3]);
    }

    #[test]
    fn opt_cost_examples() {
        let cfg = CatalogConfig::new(3, 2, 10, 1).unwrap();
        assert_eq!(
            opt_cost(&[RequestBatch::from_counts(&[5, 3, 2])], &cfg).unwrap(),
            2
        );

        let trace = generate_round_robin(&RoundRobinConfig {
            files: 1000,
            requests: 100_000,
        })
        .unwrap();
        let batches = batch_trace(&trace, 200).unwrap();
        let cfg = CatalogConfig::new(1000, 100, 200, batches.len()).unwrap();
        let opt = opt_cost(&batches, &cfg).unwrap();
        assert_eq!(opt, 90_000);
        assert_eq!(opt as f64 / 100_000.0, 0.9);
    }

    #[test]
    fn regret_examples() {
        let series = RunSeries {
            policy: "x".into(),
            run: 0,
            costs: vec![3, 4, 5],
        };
        let r = empirical_regret(&series, 12, None);
        assert_eq!(r.empirical_regret, 0);
        let r = empirical_regret(&series, 13, Some(1.0));
        assert_eq!(r.empirical_regret, -1);
        assert_eq!(r.theoretical_bound, Some(1.0));
    }

    #[test]
    fn bound_value_examples() {
        let exact = BoundParams {
            a_hat: 200.0,
            r_hat: 200.0,
            diameter: 200.0,
        };
        let expected = 2.0 * 2f64.sqrt() * 200.0 * (100.0f64 * 500.0).sqrt();
        assert!((bound_value(&exact, 500) - expected).abs() < 1e-6);
        assert!((bound_value(&exact, 500) - 126_491.106).abs() < 1e-3);
        let var = BoundParams {
            a_hat: 400.0,
            r_hat: 400.0,
            diameter: 200.0,
        };
        assert!((bound_value(&var, 500) - 252_982.213).abs() < 1e-3);
        let unit = BoundParams {
            a_hat: 1.0,
            r_hat: 1.0,
            diameter: 1.0,
        };
        assert_eq!(bound_value(&unit, 1), 2.0);
    }

    #[test]
    fn decile_examples() {
        let single = vec![vec![0.1, 0.2, 0.3]];
        let band = decile_band(&single).unwrap();
        assert_eq!(band.mean, single[0]);
        assert_eq!(band.d1, single[0]);
        assert_eq!(band.d9, single[0]);

        let runs: Vec<Vec<f64>> = (1..=10).rev().map(|v| vec![v as f64]).collect();
        let band = decile_band(&runs).unwrap();
        assert_eq!((band.d1[0], band.d9[0], band.mean[0]), (1.0, 9.0, 5.5));

        let constant = vec![vec![0.4, 0.5]; 7];
        let band = decile_band(&constant).unwrap();
        assert_eq!(band.d1, band.d9);

        assert!(decile_band(&[]).is_err());
        assert!(decile_band(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn decile_ranks() {
        assert_eq!((decile_rank(1, 1), decile_rank(9, 1)), (1, 1));
        assert_eq!((decile_rank(1, 10), decile_rank(9, 10)), (1, 9));
        assert_eq!((decile_rank(1, 50), decile_rank(9, 50)), (5, 45));
        assert_eq!((decile_rank(1, 11), decile_rank(9, 11)), (2, 10));
    }

    #[test]
    fn opt_cost_is_optimal_small_catalog() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = CatalogConfig::new(6, 2, 5, 4).unwrap();
        for _ in 0..100 {
            let batches: Vec<RequestBatch> = (0..4)
                .map(|_| {
                    let ev: Vec<u32> = (0..5).map(|_| rng.random_range(0..6u32)).collect();
                    RequestBatch::from_indices(6, &ev).unwrap()
                })
                .collect();
            let opt = opt_cost(&batches, &cfg).unwrap();
            for a in 0..6 {
                for b in a + 1..6 {
                    let y = DecisionVector::from_cached(6, [a, b]).unwrap();
                    let c: u64 = batches.iter().map(|r| cost(r, &y).unwrap()).sum();
                    assert!(opt <= c);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn estimated_opt_never_exceeds_true_opt_under_estimates(
            seed in any::<u64>(),
            rate in 0.05f64..=1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = CatalogConfig::new(10, 3, 8, 12).unwrap();
            let mut est = CumulativeCounts::zeros(10);
            let mut exact = CumulativeCounts::zeros(10);
            for _ in 0..12 {
                let ev: Vec<u32> = (0..8).map(|_| rng.random_range(0..10u32)).collect();
                let b = RequestBatch::from_indices(10, &ev).unwrap();
                exact.add_batch(&b).unwrap();
                let e = estimate(&EstimatorSpec::Bernoulli { rate }, &b, &mut rng).unwrap();
                est.accumulate(&e.values()).unwrap();
            }
            let check = estimated_opt_pair(&est, &exact, &cfg).unwrap();
            prop_assert!(check.holds);
            // rounding aside, the sums agree with the exact verdict
            prop_assert!(check.estimated_opt <= check.true_opt_estimated * (1.0 + 1e-12));
        }

        #[test]
        fn miss_ratio_in_unit_interval(costs in prop::collection::vec(0u64..=50, 1..100)) {
            for r in average_miss_ratio(&costs, 50) {
                prop_assert!((0.0..=1.0).contains(&r));
            }
        }
    }
}
