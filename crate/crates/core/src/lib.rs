//! Online caching with follow-the-perturbed-leader policies driven by exact or
//! sampled request counts.
//!
//! The crate is organised bottom-up:
//!
//! * [`catalog`]: catalog/cache dimensions, decision vectors, request batches
//!   and the top-C minimisation oracle shared by every policy.
//! * [`traces`]: synthetic (Zipf, round-robin) and file-backed request traces.
//! * [`estimators`]: unbiased request estimators (exact, fixed-size and
//!   Bernoulli subsampling).
//! * [`policies`]: LRU, FTL/LFU, FPL, NFPL and the hindsight static optimum.
//! * [`metrics`]: miss ratios, hindsight optimum, regret and decile bands.
//! * [`engine`]: seeded multi-run experiments, parallel when the `parallel`
//!   feature is enabled.
//! * [`cli`]: config parsing and the `generate`/`run`/`sweep` commands.

pub mod catalog;
pub mod cli;
pub mod engine;
pub mod error;
pub mod estimators;
pub mod metrics;
pub mod policies;
pub mod traces;

pub use catalog::{
    oracle_minimize, CatalogConfig, CumulativeCounts, DecisionVector, RequestBatch, TieBreakRule,
};
pub use error::{Error, Result};
