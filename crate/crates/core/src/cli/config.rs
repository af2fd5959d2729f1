//! TOML experiment configuration.
//!
//! ```toml
//! [experiment]
//! files = 1000        # catalog size (optional for file traces)
//! cache = 100
//! batch = 200
//! runs = 10
//! seed = 2024
//! horizon = 500       # optional; must equal the trace's batch count
//!
//! [trace]
//! kind = "zipf"       # "zipf" | "round-robin" | "file"
//! requests = 500000
//! alpha = 1.0
//! seed = 7            # optional, zipf only
//! # path = "trace.txt"; remap = true   (file traces)
//!
//! [policies.nfpl-var] # one table per policy, label = table name
//! kind = "nfpl"       # "lru" | "lfu" | "ftl" | "fpl" | "nfpl" | "static-opt"
//! estimator = "bernoulli"   # "exact" | "fixed" | "bernoulli"
//! rate = 0.5          # bernoulli probability, or fixed fraction of B
//! # sample = 20       # fixed sub-batch size (instead of rate)
//! # tiebreak = "most-recent" | "lowest-index"
//! # eta = 316.2       # overrides the derived perturbation scale
//!
//! [sweep]             # optional, used by `nfpl sweep`
//! variants = ["fix", "var"]
//! rates = [0.01, 0.1, 0.5, 1.0]
//! caches = [10, 200]
//! eta = "exact"       # "exact" | "derived" | <number>
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::catalog::TieBreakRule;
use crate::engine::{
    ExperimentConfig, PolicyEntry, SeedPlan, SweepConfig, SweepEta, SweepVariant, TraceSource,
};
use crate::error::{file_error, Error, Result};
use crate::estimators::EstimatorSpec;
use crate::policies::{PolicyKind, PolicySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<usize>,
    pub cache: usize,
    pub batch: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
}

fn default_runs() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceKind {
    Zipf,
    RoundRobin,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSection {
    pub kind: TraceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remap: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKindName {
    Lru,
    Ftl,
    Lfu,
    Fpl,
    Nfpl,
    StaticOpt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorName {
    Exact,
    Fixed,
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub kind: PolicyKindName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<EstimatorName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tiebreak: Option<TieBreakRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepEtaValue {
    Named(String),
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variants: Option<Vec<SweepVariant>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caches: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<SweepEtaValue>,
}

/// The config file as written, before resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub experiment: ExperimentSection,
    pub trace: TraceSection,
    #[serde(default)]
    pub policies: toml::Table,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

fn config_err(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let key = e
                .span()
                .map(|s| locate_key(text, s.start))
                .unwrap_or_default();
            config_err(key, message)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(file_error(path))?;
        Self::parse(&text)
    }

    /// Policies in file order.
    pub fn policy_entries(&self) -> Result<Vec<PolicyEntry>> {
        if self.policies.is_empty() {
            return Err(config_err("policies", "at least one policy is required"));
        }
        self.policies
            .iter()
            .map(|(label, value)| {
                let key = format!("policies.{label}");
                let section: PolicySection = value
                    .clone()
                    .try_into()
                    .map_err(|e: toml::de::Error| config_err(&key, e.message()))?;
                let spec = section.to_spec(self.experiment.batch, &key)?;
                Ok(PolicyEntry::new(label.clone(), spec))
            })
            .collect()
    }

    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        let exp = &self.experiment;
        if exp.runs == 0 {
            return Err(config_err("experiment.runs", "must be at least 1"));
        }
        let t = &self.trace;
        let need_requests = || {
            t.requests
                .ok_or_else(|| config_err("trace.requests", "required for synthetic traces"))
        };
        let need_files = || {
            exp.files
                .ok_or_else(|| config_err("experiment.files", "required for synthetic traces"))
        };
        let trace = match t.kind {
            TraceKind::Zipf => {
                need_files()?;
                let alpha = t
                    .alpha
                    .ok_or_else(|| config_err("trace.alpha", "required for zipf traces"))?;
                if !(alpha.is_finite() && alpha > 0.0) {
                    return Err(config_err("trace.alpha", "must be positive"));
                }
                TraceSource::Zipf {
                    alpha,
                    requests: need_requests()?,
                    seed: t.seed,
                }
            }
            TraceKind::RoundRobin => {
                need_files()?;
                TraceSource::RoundRobin {
                    requests: need_requests()?,
                }
            }
            TraceKind::File => TraceSource::File {
                path: t
                    .path
                    .clone()
                    .ok_or_else(|| config_err("trace.path", "required for file traces"))?,
                remap: t.remap.unwrap_or(true),
            },
        };
        Ok(ExperimentConfig {
            files: exp.files,
            cache: exp.cache,
            batch: exp.batch,
            runs: exp.runs,
            base_seed: exp.seed,
            trace,
            policies: self.policy_entries()?,
        })
    }

    /// Sweep settings; command-line values take precedence over the file.
    pub fn sweep_config(
        &self,
        variants: Option<Vec<SweepVariant>>,
        rates: Option<Vec<f64>>,
        caches: Option<Vec<usize>>,
    ) -> Result<SweepConfig> {
        let section = self.sweep.clone().unwrap_or(SweepSection {
            variants: None,
            rates: None,
            caches: None,
            eta: None,
        });
        let variants = variants
            .or(section.variants)
            .unwrap_or_else(|| vec![SweepVariant::Fix, SweepVariant::Var]);
        let rates = rates
            .or(section.rates)
            .ok_or_else(|| config_err("sweep.rates", "no sampling rates given"))?;
        if let Some(bad) = rates.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(config_err(
                "sweep.rates",
                format!("rate {bad} outside (0, 1]"),
            ));
        }
        let caches = caches
            .or(section.caches)
            .unwrap_or_else(|| vec![self.experiment.cache]);
        let eta = match section.eta {
            None => SweepEta::Exact,
            Some(SweepEtaValue::Named(s)) if s == "exact" => SweepEta::Exact,
            Some(SweepEtaValue::Named(s)) if s == "derived" => SweepEta::Derived,
            Some(SweepEtaValue::Value(v)) if v.is_finite() && v >= 0.0 => SweepEta::Fixed(v),
            Some(other) => {
                return Err(config_err(
                    "sweep.eta",
                    format!(
                        "expected \"exact\", \"derived\" or a nonnegative number, got {other:?}"
                    ),
                ))
            }
        };
        Ok(SweepConfig {
            variants,
            rates,
            caches,
            eta,
        })
    }
}

impl PolicySection {
    fn to_spec(&self, batch: usize, key: &str) -> Result<PolicySpec> {
        let kind = match self.kind {
            PolicyKindName::Lru => PolicyKind::Lru,
            PolicyKindName::Ftl => PolicyKind::Ftl,
            PolicyKindName::Lfu => PolicyKind::Lfu,
            PolicyKindName::Fpl => PolicyKind::Fpl,
            PolicyKindName::StaticOpt => PolicyKind::StaticOpt,
            PolicyKindName::Nfpl => PolicyKind::Nfpl(self.estimator_spec(batch, key)?),
        };
        if self.kind != PolicyKindName::Nfpl
            && (self.estimator.is_some() || self.rate.is_some() || self.sample.is_some())
        {
            return Err(config_err(
                format!("{key}.estimator"),
                "estimator settings only apply to nfpl policies",
            ));
        }
        if self.eta.is_some() && !kind.is_stochastic() {
            return Err(config_err(
                format!("{key}.eta"),
                "eta only applies to fpl/nfpl",
            ));
        }
        if let Some(eta) = self.eta {
            if !(eta.is_finite() && eta >= 0.0) {
                return Err(config_err(
                    format!("{key}.eta"),
                    "must be finite and nonnegative",
                ));
            }
        }
        let mut spec = PolicySpec::new(kind);
        if let Some(tb) = self.tiebreak {
            spec.tiebreak = tb;
        }
        spec.eta = self.eta;
        Ok(spec)
    }

    fn estimator_spec(&self, batch: usize, key: &str) -> Result<EstimatorSpec> {
        let est = self
            .estimator
            .ok_or_else(|| config_err(format!("{key}.estimator"), "required for nfpl"))?;
        let spec = match est {
            EstimatorName::Exact => EstimatorSpec::Exact,
            EstimatorName::Bernoulli => EstimatorSpec::Bernoulli {
                rate: self
                    .rate
                    .ok_or_else(|| config_err(format!("{key}.rate"), "required for bernoulli"))?,
            },
            EstimatorName::Fixed => match (self.sample, self.rate) {
                (Some(sample), None) => EstimatorSpec::FixedSubsample { sample },
                (None, Some(rate)) => EstimatorSpec::fixed_from_rate(rate, batch)
                    .map_err(|e| config_err(format!("{key}.rate"), e.to_string()))?,
                _ => {
                    return Err(config_err(
                        format!("{key}.sample"),
                        "fixed estimator needs exactly one of `sample` or `rate`",
                    ))
                }
            },
        };
        spec.validate(batch)
            .map_err(|e| config_err(format!("{key}.estimator"), e.to_string()))?;
        Ok(spec)
    }

    /// Fully explicit section for a resolved policy.
    pub fn resolved(spec: &PolicySpec, eta: Option<f64>) -> Self {
        let (kind, estimator, rate, sample) = match spec.kind {
            PolicyKind::Lru => (PolicyKindName::Lru, None, None, None),
            PolicyKind::Lfu => (PolicyKindName::Lfu, None, None, None),
            PolicyKind::Ftl => (PolicyKindName::Ftl, None, None, None),
            PolicyKind::Fpl => (PolicyKindName::Fpl, None, None, None),
            PolicyKind::StaticOpt => (PolicyKindName::StaticOpt, None, None, None),
            PolicyKind::Nfpl(EstimatorSpec::Exact) => {
                (PolicyKindName::Nfpl, Some(EstimatorName::Exact), None, None)
            }
            PolicyKind::Nfpl(EstimatorSpec::Bernoulli { rate }) => (
                PolicyKindName::Nfpl,
                Some(EstimatorName::Bernoulli),
                Some(rate),
                None,
            ),
            PolicyKind::Nfpl(EstimatorSpec::FixedSubsample { sample }) => (
                PolicyKindName::Nfpl,
                Some(EstimatorName::Fixed),
                None,
                Some(sample),
            ),
        };
        Self {
            kind,
            estimator,
            rate,
            sample,
            tiebreak: Some(spec.tiebreak),
            eta,
        }
    }
}

/// Best-effort dotted key path of the table/key enclosing byte `offset`.
fn locate_key(text: &str, offset: usize) -> String {
    let mut table = String::new();
    let mut key = String::new();
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        if pos > offset {
            break;
        }
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            table = trimmed
                .trim_matches(|c| c == '[' || c == ']')
                .trim()
                .to_string();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = k.trim().to_string();
        }
        pos += line.len();
    }
    match (table.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

/// Resolved configuration written next to the results; parsing it back
/// reproduces the run exactly.
pub fn echo_config(
    file: &ConfigFile,
    files: usize,
    horizon: usize,
    resolved_policies: &[(PolicyEntry, Option<f64>)],
) -> Result<String> {
    let mut echo = file.clone();
    echo.experiment.files = Some(files);
    echo.experiment.horizon = Some(horizon);
    if echo.trace.kind == TraceKind::Zipf && echo.trace.seed.is_none() {
        echo.trace.seed = Some(SeedPlan::new(file.experiment.seed).trace_seed());
    }
    if echo.trace.kind == TraceKind::File && echo.trace.remap.is_none() {
        echo.trace.remap = Some(true);
    }
    let mut policies = toml::Table::new();
    for (entry, eta) in resolved_policies {
        let section = PolicySection::resolved(&entry.spec, *eta);
        let value = toml::Value::try_from(section)
            .map_err(|e| config_err(format!("policies.{}", entry.label), e.to_string()))?;
        policies.insert(entry.label.clone(), value);
    }
    echo.policies = policies;
    toml::to_string(&echo).map_err(|e| config_err("", e.to_string()))
}
