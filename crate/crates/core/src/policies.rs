//! Online caching policies.
//!
//! Batch-updating policies (FTL, FPL, NFPL, static optimum) follow a
//! decide / pay / observe cycle per slot: the cache for slot `t` is fixed
//! before the slot's requests are revealed. LRU and per-request LFU update
//! on every event inside the slot.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{
    cost, CatalogConfig, CumulativeCounts, DecisionVector, RequestBatch, TieBreak, TieBreakRule,
    TopC,
};
use crate::error::{invalid, Result};
use crate::estimators::{bound_params, estimate, BoundParams, EstimatorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PolicyKind {
    Lru,
    /// Per-request LFU: on a miss, evicts the cached file with the fewest
    /// requests so far.
    Lfu,
    /// Follow-the-leader on exact counts; LFU when `B = 1`.
    Ftl,
    /// Perturbed leader on exact counts.
    Fpl,
    /// Perturbed leader on estimated counts.
    Nfpl(EstimatorSpec),
    /// Best static cache in hindsight.
    StaticOpt,
}

impl PolicyKind {
    pub fn is_stochastic(&self) -> bool {
        matches!(self, PolicyKind::Fpl | PolicyKind::Nfpl(_))
    }

    /// Estimator feeding the accumulator, for the perturbed policies.
    pub fn estimator(&self) -> Option<EstimatorSpec> {
        match *self {
            PolicyKind::Fpl => Some(EstimatorSpec::Exact),
            PolicyKind::Nfpl(spec) => Some(spec),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub tiebreak: TieBreakRule,
    /// Overrides the perturbation scale otherwise derived from the horizon.
    pub eta: Option<f64>,
}

impl PolicySpec {
    /// Spec with the default tie-break for `kind`: most-recent for FTL (so it
    /// behaves like a recency-aware LFU), lowest-index elsewhere.
    pub fn new(kind: PolicyKind) -> Self {
        let tiebreak = match kind {
            PolicyKind::Ftl | PolicyKind::Lfu => TieBreakRule::MostRecent,
            _ => TieBreakRule::LowestIndex,
        };
        Self {
            kind,
            tiebreak,
            eta: None,
        }
    }

    pub fn with_tiebreak(mut self, tiebreak: TieBreakRule) -> Self {
        self.tiebreak = tiebreak;
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = Some(eta);
        self
    }

    pub fn validate(&self, cfg: &CatalogConfig) -> Result<()> {
        if let Some(est) = self.kind.estimator() {
            est.validate(cfg.batch)?;
        }
        if let Some(eta) = self.eta {
            if !(eta.is_finite() && eta >= 0.0) {
                return Err(invalid(format!(
                    "eta must be finite and nonnegative, got {eta}"
                )));
            }
        }
        Ok(())
    }

    /// Perturbation scale for the perturbed policies: the override if set,
    /// otherwise [`compute_eta`] with the horizon of `cfg`.
    pub fn resolve_eta(&self, cfg: &CatalogConfig) -> Result<Option<f64>> {
        let Some(est) = self.kind.estimator() else {
            return Ok(None);
        };
        match self.eta {
            Some(eta) => Ok(Some(eta)),
            None => compute_eta(&bound_params(&est, cfg), cfg.horizon).map(Some),
        }
    }
}

/// `sqrt(r_hat * a_hat * T / D)`.
pub fn compute_eta(bounds: &BoundParams, horizon: usize) -> Result<f64> {
    if horizon == 0 {
        return Err(invalid("horizon must be at least 1"));
    }
    if bounds.diameter <= 0.0 {
        return Err(invalid(
            "decision set has zero diameter (cache holds the whole catalog)",
        ));
    }
    Ok((bounds.r_hat * bounds.a_hat * horizon as f64 / bounds.diameter).sqrt())
}

/// Accumulated counts shared by FTL, FPL and NFPL.
#[derive(Debug, Clone)]
pub struct LeaderState {
    cfg: CatalogConfig,
    accumulator: CumulativeCounts,
    /// Position (1-based, global) of each file's latest request; 0 = never.
    recency: Vec<u64>,
    events_seen: u64,
    slot: usize,
    topc: TopC,
    perturbed: Vec<f64>,
}

impl LeaderState {
    pub fn new(cfg: &CatalogConfig) -> Self {
        Self {
            cfg: *cfg,
            accumulator: CumulativeCounts::zeros(cfg.files),
            recency: vec![0; cfg.files],
            events_seen: 0,
            slot: 0,
            topc: TopC::new(cfg.files),
            perturbed: vec![0.0; cfg.files],
        }
    }

    pub fn accumulator(&self) -> &CumulativeCounts {
        &self.accumulator
    }

    /// Number of batches observed so far.
    pub fn slot(&self) -> usize {
        self.slot
    }

    /// Cache of the `C` files with the largest accumulated counts.
    pub fn ftl_decide(&mut self, tiebreak: TieBreakRule) -> Result<DecisionVector> {
        let tb = match tiebreak {
            TieBreakRule::LowestIndex => TieBreak::LowestIndex,
            TieBreakRule::MostRecent => TieBreak::MostRecent(&self.recency),
        };
        self.topc
            .select(self.accumulator.totals(), self.cfg.cache, tb)
    }

    /// Draws a fresh `γ ~ U[0, eta]^N` and returns the leader of the
    /// perturbed counts.
    pub fn nfpl_decide<R: Rng + ?Sized>(
        &mut self,
        eta: f64,
        rng: &mut R,
    ) -> Result<DecisionVector> {
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(invalid(format!(
                "eta must be finite and nonnegative, got {eta}"
            )));
        }
        for (p, &acc) in self.perturbed.iter_mut().zip(self.accumulator.totals()) {
            let u: f64 = rng.random();
            *p = acc + eta * u;
        }
        self.topc
            .select(&self.perturbed, self.cfg.cache, TieBreak::LowestIndex)
    }

    /// Adds the estimate of `batch` to the accumulator. `events` are the
    /// batch's raw 1-based ids in arrival order, used for recency.
    pub fn nfpl_observe<R: Rng + ?Sized>(
        &mut self,
        batch: &RequestBatch,
        events: &[u32],
        spec: &EstimatorSpec,
        rng: &mut R,
    ) -> Result<()> {
        if batch.files() != self.cfg.files {
            return Err(invalid("batch catalog size does not match policy"));
        }
        match spec {
            EstimatorSpec::Exact => self.accumulator.add_batch(batch)?,
            _ => {
                let est = estimate(spec, batch, rng)?;
                self.accumulator.add_sparse(est.entries());
            }
        }
        for &e in events {
            self.events_seen += 1;
            let i = e as usize - 1;
            if i >= self.cfg.files {
                return Err(invalid(format!("event id {e} out of range")));
            }
            self.recency[i] = self.events_seen;
        }
        self.slot += 1;
        Ok(())
    }
}

const NIL: u32 = u32::MAX;

/// Per-request LRU over a fixed catalog, O(1) per event.
#[derive(Debug, Clone)]
pub struct LruCache {
    capacity: usize,
    prev: Vec<u32>,
    next: Vec<u32>,
    cached: Vec<bool>,
    len: usize,
    /// least recent
    head: u32,
    /// most recent
    tail: u32,
}

impl LruCache {
    pub fn empty(files: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 || capacity > files {
            return Err(invalid(format!(
                "cache capacity {capacity} must lie in 1..={files}"
            )));
        }
        Ok(Self {
            capacity,
            prev: vec![NIL; files],
            next: vec![NIL; files],
            cached: vec![false; files],
            len: 0,
            head: NIL,
            tail: NIL,
        })
    }

    /// Cache holding files `1..=C`, file `C` most recent.
    pub fn warm(cfg: &CatalogConfig) -> Result<Self> {
        let mut lru = Self::empty(cfg.files, cfg.cache)?;
        for i in 0..cfg.cache as u32 {
            lru.push_back(i);
        }
        Ok(lru)
    }

    pub fn contains(&self, file: usize) -> bool {
        self.cached[file]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn decision(&self) -> DecisionVector {
        DecisionVector::from_missing(self.cached.iter().map(|&c| !c).collect())
    }

    fn unlink(&mut self, i: u32) {
        let (p, n) = (self.prev[i as usize], self.next[i as usize]);
        if p == NIL {
            self.head = n;
        } else {
            self.next[p as usize] = n;
        }
        if n == NIL {
            self.tail = p;
        } else {
            self.prev[n as usize] = p;
        }
        self.prev[i as usize] = NIL;
        self.next[i as usize] = NIL;
        self.cached[i as usize] = false;
        self.len -= 1;
    }

    fn push_back(&mut self, i: u32) {
        self.prev[i as usize] = self.tail;
        self.next[i as usize] = NIL;
        if self.tail == NIL {
            self.head = i;
        } else {
            self.next[self.tail as usize] = i;
        }
        self.tail = i;
        self.cached[i as usize] = true;
        self.len += 1;
    }

    /// Serves one request (1-based id); returns true on a miss.
    pub fn request(&mut self, file: u32) -> Result<bool> {
        let files = self.cached.len();
        if file == 0 || file as usize > files {
            return Err(invalid(format!("event id {file} out of range 1..={files}")));
        }
        let i = file - 1;
        if self.cached[i as usize] {
            self.unlink(i);
            self.push_back(i);
            return Ok(false);
        }
        if self.len == self.capacity {
            let victim = self.head;
            self.unlink(victim);
        }
        self.push_back(i);
        Ok(true)
    }

    /// Serves a batch's events in arrival order and returns the miss count.
    pub fn process_batch(&mut self, events: &[u32]) -> Result<u64> {
        let mut misses = 0;
        for &e in events {
            misses += u64::from(self.request(e)?);
        }
        Ok(misses)
    }
}

/// Per-request LFU with global counts, `O(log C)` per event. Among equally
/// frequent files the tie-break picks the victim: the least recently
/// requested for `MostRecent`, the highest index for `LowestIndex`.
#[derive(Debug, Clone)]
pub struct LfuCache {
    capacity: usize,
    tiebreak: TieBreakRule,
    counts: Vec<u64>,
    last_use: Vec<u64>,
    cached: Vec<bool>,
    /// (count, tie key, index) of cached files; the first entry is evicted.
    order: BTreeSet<(u64, u64, u32)>,
    clock: u64,
}

impl LfuCache {
    /// Cache holding files `1..=C` with zero counts.
    pub fn warm(cfg: &CatalogConfig, tiebreak: TieBreakRule) -> Result<Self> {
        cfg.validate()?;
        let mut lfu = Self {
            capacity: cfg.cache,
            tiebreak,
            counts: vec![0; cfg.files],
            last_use: vec![0; cfg.files],
            cached: vec![false; cfg.files],
            order: BTreeSet::new(),
            clock: 0,
        };
        for i in 0..cfg.cache as u32 {
            lfu.insert(i);
        }
        Ok(lfu)
    }

    fn key(&self, i: u32) -> (u64, u64, u32) {
        let tie = match self.tiebreak {
            TieBreakRule::MostRecent => self.last_use[i as usize],
            TieBreakRule::LowestIndex => u64::from(u32::MAX - i),
        };
        (self.counts[i as usize], tie, i)
    }

    fn insert(&mut self, i: u32) {
        self.cached[i as usize] = true;
        self.order.insert(self.key(i));
    }

    pub fn contains(&self, file: usize) -> bool {
        self.cached[file]
    }

    pub fn decision(&self) -> DecisionVector {
        DecisionVector::from_missing(self.cached.iter().map(|&c| !c).collect())
    }

    /// Serves one request (1-based id); returns true on a miss.
    pub fn request(&mut self, file: u32) -> Result<bool> {
        let files = self.cached.len();
        if file == 0 || file as usize > files {
            return Err(invalid(format!("event id {file} out of range 1..={files}")));
        }
        let i = file - 1;
        self.clock += 1;
        let hit = self.cached[i as usize];
        if hit {
            self.order.remove(&self.key(i));
        } else if self.order.len() == self.capacity {
            let (_, _, victim) = self.order.pop_first().expect("cache is full");
            self.cached[victim as usize] = false;
        }
        self.counts[i as usize] += 1;
        self.last_use[i as usize] = self.clock;
        self.insert(i);
        Ok(!hit)
    }

    pub fn process_batch(&mut self, events: &[u32]) -> Result<u64> {
        let mut misses = 0;
        for &e in events {
            misses += u64::from(self.request(e)?);
        }
        Ok(misses)
    }
}

/// Hindsight-optimal static cache: the leader of the total counts.
pub fn static_opt_decision(
    batches: &[RequestBatch],
    cfg: &CatalogConfig,
    tiebreak: TieBreak<'_>,
) -> Result<DecisionVector> {
    let mut totals = CumulativeCounts::zeros(cfg.files);
    for b in batches {
        totals.add_batch(b)?;
    }
    TopC::new(cfg.files).select(totals.totals(), cfg.cache, tiebreak)
}

/// Result of one slot.
#[derive(Debug, Clone)]
pub struct SlotOutcome {
    pub cost: u64,
    /// Cache used during the slot; LRU and LFU report their state after it.
    pub decision: DecisionVector,
}

/// A runnable policy instance, exclusively owned by one run.
#[derive(Debug, Clone)]
pub enum Policy {
    Lru(LruCache),
    Lfu(LfuCache),
    Ftl {
        state: LeaderState,
        tiebreak: TieBreakRule,
    },
    Perturbed {
        state: LeaderState,
        eta: f64,
        estimator: EstimatorSpec,
    },
    Static(DecisionVector),
}

impl Policy {
    /// Instantiates `spec`; the static optimum needs the whole batch
    /// sequence up front.
    pub fn build(spec: &PolicySpec, cfg: &CatalogConfig, batches: &[RequestBatch]) -> Result<Self> {
        cfg.validate()?;
        spec.validate(cfg)?;
        Ok(match spec.kind {
            PolicyKind::Lru => Policy::Lru(LruCache::warm(cfg)?),
            PolicyKind::Lfu => Policy::Lfu(LfuCache::warm(cfg, spec.tiebreak)?),
            PolicyKind::Ftl => Policy::Ftl {
                state: LeaderState::new(cfg),
                tiebreak: spec.tiebreak,
            },
            PolicyKind::Fpl | PolicyKind::Nfpl(_) => Policy::Perturbed {
                state: LeaderState::new(cfg),
                eta: spec.resolve_eta(cfg)?.expect("perturbed policy has eta"),
                estimator: spec
                    .kind
                    .estimator()
                    .expect("perturbed policy has estimator"),
            },
            PolicyKind::StaticOpt => {
                // MostRecent over a whole trace: latest request position per file
                let tb_recency;
                let tb = match spec.tiebreak {
                    TieBreakRule::LowestIndex => TieBreak::LowestIndex,
                    TieBreakRule::MostRecent => {
                        tb_recency = batch_recency(batches, cfg.files);
                        TieBreak::MostRecent(&tb_recency)
                    }
                };
                Policy::Static(static_opt_decision(batches, cfg, tb)?)
            }
        })
    }

    /// Accumulated (estimated) counts, for leader-based policies.
    pub fn accumulator(&self) -> Option<&CumulativeCounts> {
        match self {
            Policy::Ftl { state, .. } | Policy::Perturbed { state, .. } => {
                Some(state.accumulator())
            }
            _ => None,
        }
    }

    /// Runs one slot: decide, pay `<r_t, x_t>`, observe. `noise` feeds the
    /// perturbation and `sampling` the estimator.
    pub fn step<N, S>(
        &mut self,
        batch: &RequestBatch,
        events: &[u32],
        noise: &mut N,
        sampling: &mut S,
    ) -> Result<SlotOutcome>
    where
        N: Rng + ?Sized,
        S: Rng + ?Sized,
    {
        match self {
            Policy::Lru(lru) => {
                let misses = lru.process_batch(events)?;
                Ok(SlotOutcome {
                    cost: misses,
                    decision: lru.decision(),
                })
            }
            Policy::Lfu(lfu) => {
                let misses = lfu.process_batch(events)?;
                Ok(SlotOutcome {
                    cost: misses,
                    decision: lfu.decision(),
                })
            }
            Policy::Ftl { state, tiebreak } => {
                let x = state.ftl_decide(*tiebreak)?;
                let paid = cost(batch, &x)?;
                state.nfpl_observe(batch, events, &EstimatorSpec::Exact, sampling)?;
                Ok(SlotOutcome {
                    cost: paid,
                    decision: x,
                })
            }
            Policy::Perturbed {
                state,
                eta,
                estimator,
            } => {
                let x = state.nfpl_decide(*eta, noise)?;
                let paid = cost(batch, &x)?;
                state.nfpl_observe(batch, events, estimator, sampling)?;
                Ok(SlotOutcome {
                    cost: paid,
                    decision: x,
                })
            }
            Policy::Static(x) => Ok(SlotOutcome {
                cost: cost(batch, x)?,
                decision: x.clone(),
            }),
        }
    }
}

/// Last-request position of every file over consecutive batches, where
/// events inside a batch are taken in index order.
fn batch_recency(batches: &[RequestBatch], files: usize) -> Vec<u64> {
    let mut recency = vec![0; files];
    for (t, b) in batches.iter().enumerate() {
        for &(i, _) in b.entries() {
            recency[i as usize] = t as u64 + 1;
        }
    }
    recency
}
