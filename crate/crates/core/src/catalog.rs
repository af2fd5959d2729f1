//! Catalog dimensions, cache decisions, request batches and the top-C oracle.
//!
//! Files are addressed by a zero-based index internally. Anything that
//! crosses an I/O boundary (trace files, CSV output) uses 1-based ids.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Catalog size `N`, cache capacity `C`, batch size `B` and horizon `T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogConfig {
    pub files: usize,
    pub cache: usize,
    pub batch: usize,
    pub horizon: usize,
}

impl CatalogConfig {
    pub fn new(files: usize, cache: usize, batch: usize, horizon: usize) -> Result<Self> {
        let cfg = Self {
            files,
            cache,
            batch,
            horizon,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.files == 0 {
            return Err(invalid("catalog must contain at least one file"));
        }
        if self.cache == 0 || self.cache > self.files {
            return Err(invalid(format!(
                "cache capacity {} must lie in 1..={}",
                self.cache, self.files
            )));
        }
        if self.batch == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(invalid("horizon must be at least 1"));
        }
        Ok(())
    }

    /// Number of files left out of the cache, `N - C`.
    pub fn missing(&self) -> usize {
        self.files - self.cache
    }

    /// l1 diameter of the decision set: two caches differ in at most
    /// `min(C, N - C)` files, each contributing 2.
    pub fn diameter(&self) -> usize {
        2 * self.cache.min(self.files - self.cache)
    }
}

/// How the oracle orders files whose scores are exactly equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreakRule {
    /// Prefer the file with the smaller index.
    #[default]
    LowestIndex,
    /// Prefer the file requested most recently, then the smaller index.
    MostRecent,
}

/// Tie-break information handed to [`oracle_minimize`].
///
/// `MostRecent` carries, per file, the position of its last request
/// (0 = never requested, larger = more recent).
#[derive(Debug, Clone, Copy)]
pub enum TieBreak<'a> {
    LowestIndex,
    MostRecent(&'a [u64]),
}

/// Binary indicator of the files missing from the cache (`true` = not cached).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DecisionVector {
    missing: Vec<bool>,
}

impl DecisionVector {
    /// Decision that caches exactly the given file indices.
    pub fn from_cached(files: usize, cached: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut missing = vec![true; files];
        for i in cached {
            if i >= files {
                return Err(invalid(format!("file index {i} out of range 0..{files}")));
            }
            missing[i] = false;
        }
        Ok(Self { missing })
    }

    pub fn from_missing(missing: Vec<bool>) -> Self {
        Self { missing }
    }

    pub fn len(&self) -> usize {
        self.missing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn is_missing(&self, file: usize) -> bool {
        self.missing[file]
    }

    pub fn is_cached(&self, file: usize) -> bool {
        !self.missing[file]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.missing
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    /// Indices of cached files in increasing order.
    pub fn cached(&self) -> impl Iterator<Item = usize> + '_ {
        self.missing
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (!m).then_some(i))
    }

    /// True iff the vector is a member of the feasible set for `cfg`.
    pub fn is_feasible(&self, cfg: &CatalogConfig) -> bool {
        self.len() == cfg.files && self.missing_count() == cfg.missing()
    }

    /// `<score, x>`, summed in index order.
    pub fn dot(&self, score: &[f64]) -> Result<f64> {
        if score.len() != self.len() {
            return Err(invalid(format!(
                "score length {} does not match decision length {}",
                score.len(),
                self.len()
            )));
        }
        Ok(self
            .missing
            .iter()
            .zip(score)
            .filter(|(&m, _)| m)
            .map(|(_, &s)| s)
            .sum())
    }
}

/// Per-file request counts of one time slot, stored sparsely.
///
/// Entries are `(file index, count)` with strictly increasing indices and
/// nonzero counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestBatch {
    files: usize,
    entries: Vec<(u32, u32)>,
    total: u64,
}

impl RequestBatch {
    pub fn from_counts(counts: &[u32]) -> Self {
        let entries: Vec<(u32, u32)> = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (i as u32, c))
            .collect();
        let total = entries.iter().map(|&(_, c)| u64::from(c)).sum();
        Self {
            files: counts.len(),
            entries,
            total,
        }
    }

    /// Counts zero-based file indices.
    pub fn from_indices(files: usize, indices: &[u32]) -> Result<Self> {
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        let mut entries: Vec<(u32, u32)> = Vec::new();
        for idx in sorted {
            if idx as usize >= files {
                return Err(invalid(format!("file index {idx} out of range 0..{files}")));
            }
            match entries.last_mut() {
                Some((last, c)) if *last == idx => *c += 1,
                _ => entries.push((idx, 1)),
            }
        }
        Ok(Self {
            files,
            entries,
            total: indices.len() as u64,
        })
    }

    pub fn files(&self) -> usize {
        self.files
    }

    /// Total number of requests in the batch.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }

    pub fn count(&self, file: usize) -> u32 {
        self.entries
            .binary_search_by_key(&(file as u32), |&(i, _)| i)
            .map(|pos| self.entries[pos].1)
            .unwrap_or(0)
    }

    pub fn counts(&self) -> Vec<u32> {
        let mut dense = vec![0; self.files];
        for &(i, c) in &self.entries {
            dense[i as usize] = c;
        }
        dense
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.counts().into_iter().map(f64::from).collect()
    }
}

/// Running element-wise sum of (possibly fractional) request vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeCounts {
    totals: Vec<f64>,
}

impl CumulativeCounts {
    pub fn zeros(files: usize) -> Self {
        Self {
            totals: vec![0.0; files],
        }
    }

    pub fn from_totals(totals: Vec<f64>) -> Result<Self> {
        if totals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("cumulative totals must be finite and nonnegative"));
        }
        Ok(Self { totals })
    }

    pub fn totals(&self) -> &[f64] {
        &self.totals
    }

    pub fn len(&self) -> usize {
        self.totals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.totals.is_empty()
    }

    /// Adds a dense nonnegative vector.
    pub fn accumulate(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.totals.len() {
            return Err(invalid(format!(
                "delta length {} does not match accumulator length {}",
                delta.len(),
                self.totals.len()
            )));
        }
        if delta.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("delta entries must be finite and nonnegative"));
        }
        for (t, d) in self.totals.iter_mut().zip(delta) {
            *t += d;
        }
        Ok(())
    }

    /// Adds sparse `(index, value)` entries; callers guarantee valid indices
    /// and nonnegative values.
    pub(crate) fn add_sparse(&mut self, entries: &[(u32, f64)]) {
        for &(i, v) in entries {
            self.totals[i as usize] += v;
        }
    }

    pub fn add_batch(&mut self, batch: &RequestBatch) -> Result<()> {
        if batch.files() != self.totals.len() {
            return Err(invalid(format!(
                "batch catalog size {} does not match accumulator length {}",
                batch.files(),
                self.totals.len()
            )));
        }
        for &(i, c) in batch.entries() {
            self.totals[i as usize] += f64::from(c);
        }
        Ok(())
    }
}

/// Number of misses `<r, x>` paid by decision `x` on batch `r`.
pub fn cost(batch: &RequestBatch, x: &DecisionVector) -> Result<u64> {
    if batch.files() != x.len() {
        return Err(invalid(format!(
            "batch catalog size {} does not match decision length {}",
            batch.files(),
            x.len()
        )));
    }
    Ok(batch
        .entries()
        .iter()
        .filter(|&&(i, _)| x.is_missing(i as usize))
        .map(|&(_, c)| u64::from(c))
        .sum())
}

/// Returns a minimiser of `<score, x>` over the feasible set: the `C` files
/// with the largest scores are cached, ties resolved by `tiebreak`.
pub fn oracle_minimize(
    score: &[f64],
    cfg: &CatalogConfig,
    tiebreak: TieBreak<'_>,
) -> Result<DecisionVector> {
    let mut oracle = TopC::new(cfg.files);
    oracle.select(score, cfg.cache, tiebreak)
}

/// Reusable top-C selector; holds the index scratch buffer so per-slot calls
/// do not allocate it again.
#[derive(Debug, Clone)]
pub struct TopC {
    order: Vec<u32>,
}

impl TopC {
    pub fn new(files: usize) -> Self {
        Self {
            order: (0..files as u32).collect(),
        }
    }

    pub fn select(
        &mut self,
        score: &[f64],
        cache: usize,
        tiebreak: TieBreak<'_>,
    ) -> Result<DecisionVector> {
        let files = self.order.len();
        if score.len() != files {
            return Err(invalid(format!(
                "score length {} does not match catalog size {files}",
                score.len()
            )));
        }
        if let Some(i) = score.iter().position(|s| !s.is_finite()) {
            return Err(invalid(format!("score entry {i} is not finite")));
        }
        if cache == 0 || cache > files {
            return Err(invalid(format!(
                "cache capacity {cache} must lie in 1..={files}"
            )));
        }
        if let TieBreak::MostRecent(recency) = tiebreak {
            if recency.len() != files {
                return Err(invalid(format!(
                    "recency length {} does not match catalog size {files}",
                    recency.len()
                )));
            }
        }

        // "Better" files sort first.
        let better = |a: &u32, b: &u32| -> Ordering {
            let (ia, ib) = (*a as usize, *b as usize);
            score[ib]
                .total_cmp(&score[ia])
                .then_with(|| match tiebreak {
                    TieBreak::LowestIndex => Ordering::Equal,
                    TieBreak::MostRecent(recency) => recency[ib].cmp(&recency[ia]),
                })
                .then_with(|| ia.cmp(&ib))
        };

        if cache < files {
            self.order.select_nth_unstable_by(cache - 1, better);
        }
        let mut missing = vec![true; files];
        for &i in &self.order[..cache] {
            missing[i as usize] = false;
        }
        Ok(DecisionVector::from_missing(missing))
    }
}
