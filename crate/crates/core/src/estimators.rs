//! Unbiased estimators of a batch's request counts.
//!
//! Sampling works on the individual request events of a batch. Events are
//! never materialised: a sampled event index is mapped back to its file
//! through the batch's cumulative counts.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{CatalogConfig, RequestBatch};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "estimator", rename_all = "kebab-case")]
pub enum EstimatorSpec {
    /// The true counts.
    Exact,
    /// `sample` of the `B` events drawn without replacement, scaled by `B / sample`.
    FixedSubsample { sample: usize },
    /// Each event kept independently with probability `rate`, scaled by `1 / rate`.
    Bernoulli { rate: f64 },
}

impl EstimatorSpec {
    pub fn validate(&self, batch: usize) -> Result<()> {
        match *self {
            EstimatorSpec::Exact => Ok(()),
            EstimatorSpec::FixedSubsample { sample } if sample == 0 || sample > batch => Err(
                invalid(format!("sub-batch size {sample} must lie in 1..={batch}")),
            ),
            EstimatorSpec::FixedSubsample { .. } => Ok(()),
            EstimatorSpec::Bernoulli { rate } if !(rate > 0.0 && rate <= 1.0) => Err(invalid(
                format!("sampling probability {rate} must lie in (0, 1]"),
            )),
            EstimatorSpec::Bernoulli { .. } => Ok(()),
        }
    }

    /// Fixed-size estimator keeping a `rate` fraction of each batch, at least
    /// one request.
    pub fn fixed_from_rate(rate: f64, batch: usize) -> Result<Self> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(invalid(format!("sampling rate {rate} must lie in (0, 1]")));
        }
        let sample = ((rate * batch as f64).round() as usize).clamp(1, batch);
        Ok(EstimatorSpec::FixedSubsample { sample })
    }
}

/// Sparse estimate `r̂_t`: `(file index, value)` with increasing indices.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyEstimate {
    files: usize,
    entries: Vec<(u32, f64)>,
}

impl NoisyEstimate {
    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn values(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.files];
        for &(i, v) in &self.entries {
            dense[i as usize] = v;
        }
        dense
    }

    pub fn l1_norm(&self) -> f64 {
        self.entries.iter().map(|&(_, v)| v).sum()
    }
}

/// Constants bounding the estimates: `a_hat = sup ||r̂||_1`,
/// `r_hat = sup <r̂, x>` and the decision-set diameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub a_hat: f64,
    pub r_hat: f64,
    pub diameter: f64,
}

pub fn bound_params(spec: &EstimatorSpec, cfg: &CatalogConfig) -> BoundParams {
    let batch = cfg.batch as f64;
    let l1 = match *spec {
        EstimatorSpec::Exact | EstimatorSpec::FixedSubsample { .. } => batch,
        EstimatorSpec::Bernoulli { rate } => batch / rate,
    };
    BoundParams {
        a_hat: l1,
        r_hat: l1,
        diameter: cfg.diameter() as f64,
    }
}

pub fn estimate<R: Rng + ?Sized>(
    spec: &EstimatorSpec,
    batch: &RequestBatch,
    rng: &mut R,
) -> Result<NoisyEstimate> {
    let total = batch.total() as usize;
    spec.validate(total)?;
    let entries = match *spec {
        EstimatorSpec::Exact => batch
            .entries()
            .iter()
            .map(|&(i, c)| (i, f64::from(c)))
            .collect(),
        EstimatorSpec::FixedSubsample { sample } => {
            let scale = total as f64 / sample as f64;
            let mut hits = vec![0u32; batch.entries().len()];
            // upper[k] = number of events belonging to entries 0..=k
            let upper: Vec<usize> = batch
                .entries()
                .iter()
                .scan(0usize, |acc, &(_, c)| {
                    *acc += c as usize;
                    Some(*acc)
                })
                .collect();
            for event in index::sample(rng, total, sample).into_iter() {
                hits[upper.partition_point(|&u| u <= event)] += 1;
            }
            batch
                .entries()
                .iter()
                .zip(hits)
                .filter(|(_, h)| *h > 0)
                .map(|(&(i, _), h)| (i, scale * f64::from(h)))
                .collect()
        }
        EstimatorSpec::Bernoulli { rate } => batch
            .entries()
            .iter()
            .filter_map(|&(i, c)| {
                let kept = (0..c).filter(|_| rng.random_bool(rate)).count();
                (kept > 0).then(|| (i, kept as f64 / rate))
            })
            .collect(),
    };
    Ok(NoisyEstimate {
        files: batch.files(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(counts: &[u32]) -> RequestBatch {
        RequestBatch::from_counts(counts)
    }

    #[test]
    fn exact_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let est = estimate(&EstimatorSpec::Exact, &batch(&[3, 1]), &mut rng).unwrap();
        assert_eq!(est.values(), vec![3.0, 1.0]);
    }

    #[test]
    fn full_samples_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = batch(&[4, 0, 7, 1, 0, 3]);
        for _ in 0..50 {
            let fixed = estimate(&EstimatorSpec::FixedSubsample { sample: 15 }, &b, &mut rng);
            let bern = estimate(&EstimatorSpec::Bernoulli { rate: 1.0 }, &b, &mut rng);
            assert_eq!(fixed.unwrap().values(), b.to_f64());
            assert_eq!(bern.unwrap().values(), b.to_f64());
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = batch(&[2, 2]);
        for spec in [
            EstimatorSpec::FixedSubsample { sample: 0 },
            EstimatorSpec::FixedSubsample { sample: 5 },
            EstimatorSpec::Bernoulli { rate: 0.0 },
            EstimatorSpec::Bernoulli { rate: 1.5 },
            EstimatorSpec::Bernoulli { rate: f64::NAN },
        ] {
            assert!(estimate(&spec, &b, &mut rng).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn empty_bernoulli_sample_is_zero() {
        // with rate tiny and a single request, most draws keep nothing
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est = estimate(
            &EstimatorSpec::Bernoulli { rate: 1e-9 },
            &batch(&[0, 1]),
            &mut rng,
        )
        .unwrap();
        assert_eq!(est.values(), vec![0.0, 0.0]);
        assert_eq!(est.l1_norm(), 0.0);
    }

    #[test]
    fn bound_params_examples() {
        let cfg = CatalogConfig::new(10_000, 100, 200, 500).unwrap();
        let exact = bound_params(&EstimatorSpec::Exact, &cfg);
        assert_eq!(
            (exact.a_hat, exact.r_hat, exact.diameter),
            (200.0, 200.0, 200.0)
        );
        let var = bound_params(&EstimatorSpec::Bernoulli { rate: 0.5 }, &cfg);
        assert_eq!((var.a_hat, var.r_hat), (400.0, 400.0));
        let fix = bound_params(&EstimatorSpec::FixedSubsample { sample: 20 }, &cfg);
        assert_eq!((fix.a_hat, fix.r_hat), (200.0, 200.0));
    }

    #[test]
    fn fixed_from_rate_rounds_and_clamps() {
        assert_eq!(
            EstimatorSpec::fixed_from_rate(0.01, 200).unwrap(),
            EstimatorSpec::FixedSubsample { sample: 2 }
        );
        assert_eq!(
            EstimatorSpec::fixed_from_rate(0.001, 200).unwrap(),
            EstimatorSpec::FixedSubsample { sample: 1 }
        );
        assert_eq!(
            EstimatorSpec::fixed_from_rate(1.0, 200).unwrap(),
            EstimatorSpec::FixedSubsample { sample: 200 }
        );
        assert!(EstimatorSpec::fixed_from_rate(0.0, 200).is_err());
    }

    /// Monte Carlo means against analytically computed standard errors:
    /// hypergeometric variance for the fixed-size sampler, binomial for
    /// Bernoulli.
    #[test]
    fn samplers_are_unbiased() {
        let r = [3u32, 2, 1, 0];
        let b = batch(&r);
        let big_b = 6.0;
        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(12345);

        let small_b = 2.0;
        let mut sums = [0.0; 4];
        for _ in 0..draws {
            let est = estimate(&EstimatorSpec::FixedSubsample { sample: 2 }, &b, &mut rng).unwrap();
            for (s, v) in sums.iter_mut().zip(est.values()) {
                *s += v;
            }
        }
        for (i, &ri) in r.iter().enumerate() {
            let p = f64::from(ri) / big_b;
            let var_d = small_b * p * (1.0 - p) * (big_b - small_b) / (big_b - 1.0);
            let se = ((big_b / small_b).powi(2) * var_d / draws as f64).sqrt();
            let mean = sums[i] / draws as f64;
            assert!(
                (mean - f64::from(ri)).abs() <= 3.0 * se + 1e-12,
                "fix[{i}] {mean}"
            );
        }

        let f = 0.5;
        let mut sums = [0.0; 4];
        for _ in 0..draws {
            let est = estimate(&EstimatorSpec::Bernoulli { rate: f }, &b, &mut rng).unwrap();
            for (s, v) in sums.iter_mut().zip(est.values()) {
                *s += v;
            }
        }
        for (i, &ri) in r.iter().enumerate() {
            let se = (f64::from(ri) * (1.0 - f) / f / draws as f64).sqrt();
            let mean = sums[i] / draws as f64;
            assert!(
                (mean - f64::from(ri)).abs() <= 3.0 * se + 1e-12,
                "var[{i}] {mean}"
            );
        }
    }

    proptest! {
        #[test]
        fn fixed_subsample_conserves_l1(
            counts in prop::collection::vec(0u32..20, 1..12),
            frac in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            let b = batch(&counts);
            let total = b.total() as usize;
            prop_assume!(total > 0);
            let sample = 1 + ((total - 1) as f64 * frac) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let est = estimate(&EstimatorSpec::FixedSubsample { sample }, &b, &mut rng).unwrap();
            prop_assert!((est.l1_norm() - total as f64).abs() <= 1e-9 * total as f64);
            for (i, v) in est.values().into_iter().enumerate() {
                prop_assert!(v >= 0.0);
                prop_assert!(v == 0.0 || counts[i] > 0);
            }
        }

        #[test]
        fn bernoulli_within_l1_bound(
            counts in prop::collection::vec(0u32..20, 1..12),
            rate in 0.01f64..=1.0,
            seed in any::<u64>(),
        ) {
            let b = batch(&counts);
            let total = b.total() as f64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let est = estimate(&EstimatorSpec::Bernoulli { rate }, &b, &mut rng).unwrap();
            prop_assert!(est.l1_norm() <= total / rate * (1.0 + 1e-12));
            for (i, v) in est.values().into_iter().enumerate() {
                prop_assert!(v >= 0.0);
                prop_assert!(v == 0.0 || counts[i] > 0);
            }
        }
    }
}
