//! Experiment orchestration.
//!
//! An experiment builds one trace, batches it, and runs every policy over
//! it. Stochastic policies are repeated for `runs` seeds; deterministic ones
//! run once. Every random stream is derived from `(base_seed, run, stream)`,
//! so results do not depend on scheduling: with the `parallel` feature the
//! (policy, run) tasks are spread over a rayon pool and merged back in
//! index order.

use std::path::PathBuf;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{CatalogConfig, CumulativeCounts, DecisionVector, RequestBatch};
use crate::error::{invalid, Result};
use crate::estimators::{bound_params, EstimatorSpec};
use crate::metrics::{
    average_miss_ratio, bound_value, decile_band, estimated_opt_pair, opt_cost, DecileBand,
    RunSeries,
};
use crate::policies::{Policy, PolicyKind, PolicySpec};
use crate::traces::{
    batch_trace, generate_round_robin, generate_zipf, read_trace_file, RoundRobinConfig, Trace,
    ZipfConfig,
};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "NFPL_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Noise = 0,
    Sampling = 1,
    Trace = 2,
}

/// Derives independent, reproducible ChaCha streams from a base seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPlan {
    pub base_seed: u64,
}

impl SeedPlan {
    pub fn new(base_seed: u64) -> Self {
        Self { base_seed }
    }

    pub fn rng(&self, run: usize, stream: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.base_seed);
        rng.set_stream(((run as u64) << 2) | stream as u64);
        rng
    }

    /// Seed for trace generation, shared by all runs.
    pub fn trace_seed(&self) -> u64 {
        self.rng(0, Stream::Trace).next_u64()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TraceSource {
    Zipf {
        alpha: f64,
        requests: usize,
        /// Defaults to the seed plan's trace stream.
        seed: Option<u64>,
    },
    RoundRobin {
        requests: usize,
    },
    File {
        path: PathBuf,
        remap: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub label: String,
    pub spec: PolicySpec,
}

impl PolicyEntry {
    pub fn new(label: impl Into<String>, spec: PolicySpec) -> Self {
        Self {
            label: label.into(),
            spec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Catalog size; for file traces `None` means "as observed".
    pub files: Option<usize>,
    pub cache: usize,
    pub batch: usize,
    pub runs: usize,
    pub base_seed: u64,
    pub trace: TraceSource,
    pub policies: Vec<PolicyEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise falls
    /// back to sequential execution.
    #[default]
    Parallel,
}

/// A trace batched for one experiment; the horizon equals the batch count.
#[derive(Debug, Clone)]
pub struct Workload {
    pub trace: Trace,
    pub batches: Vec<RequestBatch>,
    pub catalog: CatalogConfig,
}

impl Workload {
    pub fn new(trace: Trace, cache: usize, batch: usize) -> Result<Self> {
        let batches = batch_trace(&trace, batch)?;
        let catalog = CatalogConfig::new(trace.files(), cache, batch, batches.len())?;
        Ok(Self {
            trace,
            batches,
            catalog,
        })
    }

    /// The first `slots` batches of this workload as a workload of its own.
    pub fn prefix(&self, slots: usize) -> Result<Self> {
        let trace = self.trace.prefix(slots * self.catalog.batch);
        Self::new(trace, self.catalog.cache, self.catalog.batch)
    }

    /// Same trace with a different cache size.
    pub fn with_cache(&self, cache: usize) -> Result<Self> {
        let catalog = CatalogConfig::new(
            self.catalog.files,
            cache,
            self.catalog.batch,
            self.catalog.horizon,
        )?;
        Ok(Self {
            trace: self.trace.clone(),
            batches: self.batches.clone(),
            catalog,
        })
    }

    pub fn events(&self, slot: usize) -> &[u32] {
        let b = self.catalog.batch;
        &self.trace.events()[slot * b..(slot + 1) * b]
    }

    pub fn exact_totals(&self) -> CumulativeCounts {
        let mut totals = CumulativeCounts::zeros(self.catalog.files);
        for b in &self.batches {
            totals
                .add_batch(b)
                .expect("batches share the workload catalog");
        }
        totals
    }
}

pub fn load_trace(cfg: &ExperimentConfig) -> Result<Trace> {
    let seeds = SeedPlan::new(cfg.base_seed);
    let need_files = || {
        cfg.files
            .ok_or_else(|| invalid("synthetic traces need a catalog size"))
    };
    match &cfg.trace {
        TraceSource::Zipf {
            alpha,
            requests,
            seed,
        } => generate_zipf(&ZipfConfig {
            files: need_files()?,
            alpha: *alpha,
            requests: *requests,
            seed: seed.unwrap_or_else(|| seeds.trace_seed()),
        }),
        TraceSource::RoundRobin { requests } => generate_round_robin(&RoundRobinConfig {
            files: need_files()?,
            requests: *requests,
        }),
        TraceSource::File { path, remap } => read_trace_file(path, *remap, cfg.files),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep every slot's decision (memory `T * N`).
    pub record_decisions: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub series: RunSeries,
    pub decisions: Option<Vec<DecisionVector>>,
    /// Final accumulator of leader-based policies.
    pub accumulator: Option<CumulativeCounts>,
}

/// Runs one policy once over the workload with the streams of `run`.
pub fn run_policy(
    entry: &PolicyEntry,
    workload: &Workload,
    seeds: &SeedPlan,
    run: usize,
    options: RunOptions,
) -> Result<RunOutcome> {
    let mut policy = Policy::build(&entry.spec, &workload.catalog, &workload.batches)?;
    let mut noise = seeds.rng(run, Stream::Noise);
    let mut sampling = seeds.rng(run, Stream::Sampling);
    let mut costs = Vec::with_capacity(workload.batches.len());
    let mut decisions = options.record_decisions.then(Vec::new);
    for (t, batch) in workload.batches.iter().enumerate() {
        let out = policy.step(batch, workload.events(t), &mut noise, &mut sampling)?;
        costs.push(out.cost);
        if let Some(d) = decisions.as_mut() {
            d.push(out.decision);
        }
    }
    Ok(RunOutcome {
        series: RunSeries {
            policy: entry.label.clone(),
            run,
            costs,
        },
        decisions,
        accumulator: policy.accumulator().cloned(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyReport {
    pub label: String,
    pub spec: PolicySpec,
    pub eta: Option<f64>,
    pub bound: Option<f64>,
    pub runs: Vec<RunSeries>,
    pub band: DecileBand,
    pub mean_cumulative_cost: f64,
    pub mean_regret: f64,
    /// Whether `<r̂, M(r̂)> <= <r̂, M(r)>` held on every run (leader policies).
    pub proof_step_holds: bool,
}

impl PolicyReport {
    pub fn final_ratio(&self) -> (f64, f64, f64) {
        let last = self.band.len() - 1;
        (self.band.mean[last], self.band.d1[last], self.band.d9[last])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub catalog: CatalogConfig,
    pub opt_cost: u64,
    pub policies: Vec<PolicyReport>,
}

impl ExperimentReport {
    pub fn policy(&self, label: &str) -> Option<&PolicyReport> {
        self.policies.iter().find(|p| p.label == label)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, execution: Execution) -> Result<ExperimentReport> {
    if cfg.runs == 0 {
        return Err(invalid("run count must be at least 1"));
    }
    let trace = load_trace(cfg)?;
    let workload = Workload::new(trace, cfg.cache, cfg.batch)?;
    run_on_workload(
        &workload,
        &cfg.policies,
        cfg.runs,
        &SeedPlan::new(cfg.base_seed),
        execution,
    )
}

/// Runs `policies` over an already prepared workload.
pub fn run_on_workload(
    workload: &Workload,
    policies: &[PolicyEntry],
    runs: usize,
    seeds: &SeedPlan,
    execution: Execution,
) -> Result<ExperimentReport> {
    if policies.is_empty() {
        return Err(invalid("experiment needs at least one policy"));
    }
    if runs == 0 {
        return Err(invalid("run count must be at least 1"));
    }
    for p in policies {
        p.spec.validate(&workload.catalog)?;
    }
    let catalog = workload.catalog;
    let opt = opt_cost(&workload.batches, &catalog)?;
    let exact_totals = workload.exact_totals();

    let tasks: Vec<(usize, usize)> = policies
        .iter()
        .enumerate()
        .flat_map(|(p, entry)| {
            let n = if entry.spec.kind.is_stochastic() {
                runs
            } else {
                1
            };
            (0..n).map(move |r| (p, r))
        })
        .collect();

    let task = |&(p, run): &(usize, usize)| -> Result<(RunSeries, bool)> {
        let out = run_policy(&policies[p], workload, seeds, run, RunOptions::default())?;
        let holds = match &out.accumulator {
            Some(acc) => estimated_opt_pair(acc, &exact_totals, &catalog)?.holds,
            None => true,
        };
        Ok((out.series, holds))
    };
    let results = map_tasks(&tasks, task, execution)?;

    let mut grouped: Vec<(Vec<RunSeries>, bool)> = vec![(Vec::new(), true); policies.len()];
    for (&(p, _), (series, holds)) in tasks.iter().zip(results) {
        grouped[p].0.push(series);
        grouped[p].1 &= holds;
    }
    let reports = policies
        .iter()
        .zip(grouped)
        .map(|(entry, (series, holds))| summarise(entry, &catalog, opt, series, holds))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        catalog,
        opt_cost: opt,
        policies: reports,
    })
}

fn summarise(
    entry: &PolicyEntry,
    catalog: &CatalogConfig,
    opt: u64,
    runs: Vec<RunSeries>,
    proof_step_holds: bool,
) -> Result<PolicyReport> {
    let ratios: Vec<Vec<f64>> = runs
        .iter()
        .map(|s| average_miss_ratio(&s.costs, catalog.batch))
        .collect();
    let band = decile_band(&ratios)?;
    let mean_cumulative_cost =
        runs.iter().map(|s| s.total_cost() as f64).sum::<f64>() / runs.len() as f64;
    let eta = entry.spec.resolve_eta(catalog)?;
    let bound = entry
        .spec
        .kind
        .estimator()
        .map(|est: EstimatorSpec| bound_value(&bound_params(&est, catalog), catalog.horizon));
    Ok(PolicyReport {
        label: entry.label.clone(),
        spec: entry.spec,
        eta,
        bound,
        runs,
        band,
        mean_cumulative_cost,
        mean_regret: mean_cumulative_cost - opt as f64,
        proof_step_holds,
    })
}

/// Maps `f` over `tasks`, keeping task order in the output.
pub fn map_tasks<T, U, F>(tasks: &[T], f: F, execution: Execution) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    match execution {
        Execution::Sequential => tasks.iter().map(f).collect(),
        Execution::Parallel => par_map(tasks, f),
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, U, F>(tasks: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    use rayon::prelude::*;

    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| invalid(format!("cannot build thread pool: {e}")))?;
            pool.install(|| tasks.par_iter().map(&f).collect())
        }
        None => tasks.par_iter().map(&f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, U, F>(tasks: &[T], f: F) -> Result<Vec<U>>
where
    F: Fn(&T) -> Result<U>,
{
    tasks.iter().map(f).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepVariant {
    Fix,
    Var,
}

impl SweepVariant {
    pub fn name(&self) -> &'static str {
        match self {
            SweepVariant::Fix => "fix",
            SweepVariant::Var => "var",
        }
    }

    pub fn estimator(&self, rate: f64, batch: usize) -> Result<EstimatorSpec> {
        match self {
            SweepVariant::Fix => EstimatorSpec::fixed_from_rate(rate, batch),
            SweepVariant::Var => {
                let spec = EstimatorSpec::Bernoulli { rate };
                spec.validate(batch)?;
                Ok(spec)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: SweepVariant,
    pub rate: f64,
    pub cache: usize,
    pub eta: f64,
    pub mean: f64,
    pub d1: f64,
    pub d9: f64,
    /// Estimated-leader inequality held on every run.
    pub proof_step_holds: bool,
}

/// How the sweep picks the perturbation scale of each variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SweepEta {
    /// The scale derived for exact requests, shared by every rate.
    #[default]
    Exact,
    /// Each estimator's own derived scale (grows as `1/f` for Bernoulli).
    Derived,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub variants: Vec<SweepVariant>,
    pub rates: Vec<f64>,
    pub caches: Vec<usize>,
    pub eta: SweepEta,
}

/// Final average miss ratio of NFPL for every (cache, variant, rate).
pub fn run_sweep(
    workload: &Workload,
    sweep: &SweepConfig,
    runs: usize,
    seeds: &SeedPlan,
    execution: Execution,
) -> Result<Vec<SweepRow>> {
    if sweep.variants.is_empty() || sweep.rates.is_empty() || sweep.caches.is_empty() {
        return Err(invalid(
            "sweep needs at least one variant, rate and cache size",
        ));
    }
    for &rate in &sweep.rates {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(invalid(format!("sampling rate {rate} must lie in (0, 1]")));
        }
    }
    let mut rows = Vec::new();
    for &cache in &sweep.caches {
        let w = workload.with_cache(cache)?;
        let mut entries = Vec::new();
        let mut keys = Vec::new();
        for &variant in &sweep.variants {
            for &rate in &sweep.rates {
                let est = variant.estimator(rate, w.catalog.batch)?;
                let mut spec = PolicySpec::new(PolicyKind::Nfpl(est));
                spec.eta = match sweep.eta {
                    SweepEta::Exact => PolicySpec::new(PolicyKind::Fpl).resolve_eta(&w.catalog)?,
                    SweepEta::Derived => None,
                    SweepEta::Fixed(eta) => Some(eta),
                };
                entries.push(PolicyEntry::new(
                    format!("nfpl-{}-{rate}", variant.name()),
                    spec,
                ));
                keys.push((variant, rate));
            }
        }
        let report = run_on_workload(&w, &entries, runs, seeds, execution)?;
        for ((variant, rate), p) in keys.into_iter().zip(&report.policies) {
            let (mean, d1, d9) = p.final_ratio();
            rows.push(SweepRow {
                variant,
                rate,
                cache,
                eta: p.eta.expect("nfpl has eta"),
                mean,
                d1,
                d9,
                proof_step_holds: p.proof_step_holds,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{cost, TieBreakRule};
    use rand::Rng;

    fn zipf_workload(requests: usize) -> Workload {
        let trace = generate_zipf(&ZipfConfig {
            files: 200,
            alpha: 1.0,
            requests,
            seed: 4,
        })
        .unwrap();
        Workload::new(trace, 20, 50).unwrap()
    }

    #[test]
    fn seed_streams_are_distinct_and_reproducible() {
        let plan = SeedPlan::new(42);
        let draw = |run, s| plan.rng(run, s).random::<u64>();
        assert_eq!(draw(3, Stream::Noise), draw(3, Stream::Noise));
        assert_ne!(draw(3, Stream::Noise), draw(3, Stream::Sampling));
        assert_ne!(draw(3, Stream::Noise), draw(4, Stream::Noise));
        assert_ne!(
            draw(0, Stream::Noise),
            SeedPlan::new(43).rng(0, Stream::Noise).random::<u64>()
        );
    }

    #[test]
    fn static_opt_run_costs_opt() {
        let w = zipf_workload(5000);
        let entry = PolicyEntry::new("opt", PolicySpec::new(PolicyKind::StaticOpt));
        let out = run_policy(&entry, &w, &SeedPlan::new(0), 0, RunOptions::default()).unwrap();
        assert_eq!(
            out.series.total_cost(),
            opt_cost(&w.batches, &w.catalog).unwrap()
        );
    }

    #[test]
    fn zero_eta_fpl_equals_lowest_index_ftl() {
        let w = zipf_workload(10_000);
        let seeds = SeedPlan::new(9);
        let fpl = PolicyEntry::new("fpl", PolicySpec::new(PolicyKind::Fpl).with_eta(0.0));
        let ftl = PolicyEntry::new(
            "ftl",
            PolicySpec::new(PolicyKind::Ftl).with_tiebreak(TieBreakRule::LowestIndex),
        );
        let a = run_policy(&fpl, &w, &seeds, 0, RunOptions::default()).unwrap();
        let b = run_policy(&ftl, &w, &seeds, 0, RunOptions::default()).unwrap();
        assert_eq!(a.series.costs, b.series.costs);
    }

    #[test]
    fn recorded_decisions_reproduce_costs() {
        let w = zipf_workload(10_000);
        let entry = PolicyEntry::new(
            "var",
            PolicySpec::new(PolicyKind::Nfpl(EstimatorSpec::Bernoulli { rate: 0.3 })),
        );
        let options = RunOptions {
            record_decisions: true,
        };
        let out = run_policy(&entry, &w, &SeedPlan::new(1), 2, options).unwrap();
        let decisions = out.decisions.unwrap();
        let recomputed: Vec<u64> = w
            .batches
            .iter()
            .zip(&decisions)
            .map(|(b, x)| cost(b, x).unwrap())
            .collect();
        assert_eq!(recomputed, out.series.costs);
    }

    fn entries() -> Vec<PolicyEntry> {
        vec![
            PolicyEntry::new("lru", PolicySpec::new(PolicyKind::Lru)),
            PolicyEntry::new("fpl", PolicySpec::new(PolicyKind::Fpl)),
            PolicyEntry::new(
                "fix",
                PolicySpec::new(PolicyKind::Nfpl(EstimatorSpec::FixedSubsample {
                    sample: 5,
                })),
            ),
            PolicyEntry::new("opt", PolicySpec::new(PolicyKind::StaticOpt)),
        ]
    }

    #[test]
    fn experiment_is_deterministic_across_execution_modes() {
        let w = zipf_workload(10_000);
        let seeds = SeedPlan::new(77);
        let a = run_on_workload(&w, &entries(), 4, &seeds, Execution::Sequential).unwrap();
        let b = run_on_workload(&w, &entries(), 4, &seeds, Execution::Parallel).unwrap();
        for (x, y) in a.policies.iter().zip(&b.policies) {
            assert_eq!(x.runs, y.runs);
            assert_eq!(x.band, y.band);
        }
        assert_eq!(a.policy("lru").unwrap().runs.len(), 1);
        assert_eq!(a.policy("fpl").unwrap().runs.len(), 4);
        assert_eq!(a.policy("opt").unwrap().mean_regret, 0.0);
        assert!(a.policies.iter().all(|p| p.proof_step_holds));
    }

    #[test]
    fn single_deterministic_run_is_reported_verbatim() {
        let w = zipf_workload(5000);
        let e = vec![PolicyEntry::new("lru", PolicySpec::new(PolicyKind::Lru))];
        let r = run_on_workload(&w, &e, 1, &SeedPlan::new(0), Execution::Parallel).unwrap();
        let p = &r.policies[0];
        let ratios = average_miss_ratio(&p.runs[0].costs, w.catalog.batch);
        assert_eq!(p.band.mean, ratios);
        assert_eq!(p.band.d1, ratios);
        assert_eq!(p.band.d9, ratios);
    }

    #[test]
    fn run_permutation_leaves_band_unchanged() {
        let w = zipf_workload(5000);
        let r =
            run_on_workload(&w, &entries(), 5, &SeedPlan::new(3), Execution::Sequential).unwrap();
        let fpl = r.policy("fpl").unwrap();
        let mut ratios: Vec<Vec<f64>> = fpl
            .runs
            .iter()
            .map(|s| average_miss_ratio(&s.costs, w.catalog.batch))
            .collect();
        ratios.reverse();
        let band = decile_band(&ratios).unwrap();
        assert_eq!(band.d1, fpl.band.d1);
        assert_eq!(band.d9, fpl.band.d9);
        for (a, b) in band.mean.iter().zip(&fpl.band.mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sweep_cardinality_and_full_rate_identity() {
        let w = zipf_workload(10_000);
        let sweep = SweepConfig {
            variants: vec![SweepVariant::Fix, SweepVariant::Var],
            rates: vec![0.01, 0.1, 0.5, 1.0],
            caches: vec![10, 20],
            eta: SweepEta::Exact,
        };
        let seeds = SeedPlan::new(5);
        let rows = run_sweep(&w, &sweep, 3, &seeds, Execution::Parallel).unwrap();
        assert_eq!(rows.len(), 16);
        for &cache in &[10, 20] {
            let wc = w.with_cache(cache).unwrap();
            let fpl = vec![PolicyEntry::new("fpl", PolicySpec::new(PolicyKind::Fpl))];
            let r = run_on_workload(&wc, &fpl, 3, &seeds, Execution::Parallel).unwrap();
            let (mean, d1, d9) = r.policies[0].final_ratio();
            for row in rows.iter().filter(|r| r.cache == cache && r.rate == 1.0) {
                assert_eq!((row.mean, row.d1, row.d9), (mean, d1, d9));
            }
        }
        let bad = SweepConfig {
            rates: vec![1.5],
            ..sweep
        };
        assert!(run_sweep(&w, &bad, 1, &seeds, Execution::Sequential).is_err());
    }

    #[test]
    fn experiment_rejects_empty_inputs() {
        let w = zipf_workload(1000);
        let seeds = SeedPlan::new(0);
        assert!(run_on_workload(&w, &[], 1, &seeds, Execution::Sequential).is_err());
        assert!(run_on_workload(&w, &entries(), 0, &seeds, Execution::Sequential).is_err());
        let short = ExperimentConfig {
            files: Some(10),
            cache: 2,
            batch: 100,
            runs: 1,
            base_seed: 0,
            trace: TraceSource::RoundRobin { requests: 50 },
            policies: entries(),
        };
        assert!(run_experiment(&short, Execution::Sequential).is_err());
    }
}
