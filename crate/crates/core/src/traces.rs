//! Request traces: synthetic generators, a plain-text reader/writer and
//! batching into [`RequestBatch`] slots.
//!
//! Trace file format: one request per line holding a nonnegative integer
//! file id. Blank lines and lines starting with `#` are skipped; anything
//! after a first `,` (e.g. a timestamp) is ignored.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::RequestBatch;
use crate::error::{file_error, invalid, Error, Result};

/// i.i.d. requests with `P(file i) ∝ i^-alpha`, `i = 1..=files`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZipfConfig {
    pub files: usize,
    pub alpha: f64,
    pub requests: usize,
    pub seed: u64,
}

impl ZipfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.files == 0 {
            return Err(invalid("zipf catalog must contain at least one file"));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(invalid(format!(
                "zipf exponent must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Normalised popularity of every file, most popular first.
    pub fn probabilities(&self) -> Vec<f64> {
        let weights: Vec<f64> = (1..=self.files)
            .map(|i| (i as f64).powf(-self.alpha))
            .collect();
        let total: f64 = weights.iter().sum();
        weights.into_iter().map(|w| w / total).collect()
    }
}

/// Event `k` (1-based) requests file `((k - 1) mod files) + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRobinConfig {
    pub files: usize,
    pub requests: usize,
}

/// Ordered request events with 1-based file ids in `1..=files`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    files: usize,
    events: Vec<u32>,
}

impl Trace {
    pub fn new(files: usize, events: Vec<u32>) -> Result<Self> {
        if files == 0 {
            return Err(invalid("trace catalog must contain at least one file"));
        }
        if let Some(bad) = events.iter().find(|&&e| e == 0 || e as usize > files) {
            return Err(invalid(format!("event id {bad} out of range 1..={files}")));
        }
        Ok(Self { files, events })
    }

    pub fn files(&self) -> usize {
        self.files
    }

    pub fn events(&self) -> &[u32] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// The first `len` events (or the whole trace if shorter).
    pub fn prefix(&self, len: usize) -> Trace {
        Trace {
            files: self.files,
            events: self.events[..len.min(self.events.len())].to_vec(),
        }
    }

    pub fn write_to(&self, mut out: impl Write) -> io::Result<()> {
        let mut buf = io::BufWriter::new(&mut out);
        for e in &self.events {
            writeln!(buf, "{e}")?;
        }
        buf.flush()
    }
}

pub fn generate_zipf(cfg: &ZipfConfig) -> Result<Trace> {
    cfg.validate()?;
    let mut cdf = cfg.probabilities();
    let mut acc = 0.0;
    for p in cdf.iter_mut() {
        acc += *p;
        *p = acc;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let last = cfg.files - 1;
    let events = (0..cfg.requests)
        .map(|_| {
            let u: f64 = rng.random();
            // first index whose cumulative probability exceeds u; the clamp
            // covers rounding in the final cdf entry
            let i = cdf.partition_point(|&c| c <= u).min(last);
            (i + 1) as u32
        })
        .collect();
    Ok(Trace {
        files: cfg.files,
        events,
    })
}

pub fn generate_round_robin(cfg: &RoundRobinConfig) -> Result<Trace> {
    if cfg.files == 0 {
        return Err(invalid(
            "round-robin catalog must contain at least one file",
        ));
    }
    let events = (0..cfg.requests)
        .map(|k| (k % cfg.files + 1) as u32)
        .collect();
    Ok(Trace {
        files: cfg.files,
        events,
    })
}

/// Reads a trace file.
///
/// With `remap`, ids are relabelled densely `1..=distinct` in order of first
/// appearance. Without it ids are used as-is and must lie in `1..=files`.
/// `files` overrides the catalog size; it defaults to the distinct id count
/// (remap) or the largest id (passthrough).
pub fn read_trace_file(path: &Path, remap: bool, files: Option<usize>) -> Result<Trace> {
    let text = fs::read_to_string(path).map_err(file_error(path))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut raw: Vec<(usize, u64)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let field = line.split(',').next().unwrap_or("").trim();
        let id: u64 = field
            .parse()
            .map_err(|_| parse_err(lineno + 1, format!("invalid file id `{field}`")))?;
        raw.push((lineno + 1, id));
    }
    if raw.is_empty() {
        return Err(invalid(format!(
            "trace file {} has no requests",
            path.display()
        )));
    }

    let events: Vec<u32> = if remap {
        let mut ids: HashMap<u64, u32> = HashMap::new();
        raw.iter()
            .map(|&(_, id)| {
                let next = ids.len() as u32 + 1;
                *ids.entry(id).or_insert(next)
            })
            .collect()
    } else {
        let limit = files.unwrap_or(u32::MAX as usize) as u64;
        raw.iter()
            .map(|&(line, id)| {
                if id == 0 {
                    Err(parse_err(line, "file ids are 1-based; got 0".into()))
                } else if id > limit {
                    Err(parse_err(
                        line,
                        format!("file id {id} exceeds catalog size {limit}"),
                    ))
                } else {
                    Ok(id as u32)
                }
            })
            .collect::<Result<_>>()?
    };

    let observed = *events.iter().max().expect("non-empty") as usize;
    let files = match files {
        Some(n) if n < observed => {
            return Err(invalid(format!(
                "trace has {observed} distinct files but catalog size {n} was declared"
            )))
        }
        Some(n) => n,
        None => observed,
    };
    Trace::new(files, events)
}

/// Splits a trace into `floor(len / batch)` slots of exactly `batch`
/// requests; a trailing partial slot is dropped.
pub fn batch_trace(trace: &Trace, batch: usize) -> Result<Vec<RequestBatch>> {
    if batch == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    if trace.len() < batch {
        return Err(invalid(format!(
            "trace has {} requests, fewer than one batch of {batch}",
            trace.len()
        )));
    }
    let mut indices = Vec::with_capacity(batch);
    trace
        .events
        .chunks_exact(batch)
        .map(|chunk| {
            indices.clear();
            indices.extend(chunk.iter().map(|&e| e - 1));
            RequestBatch::from_indices(trace.files, &indices)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn zipf_single_file() {
        let t = generate_zipf(&ZipfConfig {
            files: 1,
            alpha: 1.3,
            requests: 100,
            seed: 5,
        })
        .unwrap();
        assert!(t.events().iter().all(|&e| e == 1));
    }

    #[test]
    fn zipf_two_files_frequency() {
        let n = 100_000;
        let t = generate_zipf(&ZipfConfig {
            files: 2,
            alpha: 1.0,
            requests: n,
            seed: 17,
        })
        .unwrap();
        let p = 2.0 / 3.0;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let freq = t.events().iter().filter(|&&e| e == 1).count() as f64 / n as f64;
        assert!((freq - p).abs() < 3.0 * sigma, "freq {freq}");
    }

    #[test]
    fn zipf_rejects_bad_alpha() {
        let cfg = ZipfConfig {
            files: 3,
            alpha: 0.0,
            requests: 1,
            seed: 0,
        };
        assert!(generate_zipf(&cfg).is_err());
    }

    #[test]
    fn zipf_reproducible() {
        let cfg = ZipfConfig {
            files: 50,
            alpha: 0.8,
            requests: 1000,
            seed: 99,
        };
        assert_eq!(generate_zipf(&cfg).unwrap(), generate_zipf(&cfg).unwrap());
        let other = ZipfConfig { seed: 100, ..cfg };
        assert_ne!(generate_zipf(&cfg).unwrap(), generate_zipf(&other).unwrap());
    }

    #[test]
    fn round_robin_cycles() {
        let t = generate_round_robin(&RoundRobinConfig {
            files: 3,
            requests: 5,
        })
        .unwrap();
        assert_eq!(t.events(), &[1, 2, 3, 1, 2]);

        let t = generate_round_robin(&RoundRobinConfig {
            files: 10_000,
            requests: 1_000_000,
        })
        .unwrap();
        assert_eq!(t.events()[10_000], 1);
        assert_eq!(t.events().iter().filter(|&&e| e == 10_000).count(), 100);
    }

    #[test]
    fn read_with_remap() {
        let f = write_tmp("7\n7\n3\n");
        let t = read_trace_file(f.path(), true, None).unwrap();
        assert_eq!(t.events(), &[1, 1, 2]);
        assert_eq!(t.files(), 2);
    }

    #[test]
    fn read_passthrough() {
        let f = write_tmp("# header\n1\n\n2,1700000000\n1\n");
        let t = read_trace_file(f.path(), false, Some(2)).unwrap();
        assert_eq!(t.events(), &[1, 2, 1]);
        assert_eq!(t.files(), 2);
    }

    #[test]
    fn read_errors() {
        for bad in ["1\n0\n", "1\n-4\n", "1\nabc\n"] {
            let f = write_tmp(bad);
            match read_trace_file(f.path(), false, None) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
                other => panic!("expected parse error, got {other:?}"),
            }
        }
        let f = write_tmp("# only a comment\n\n");
        assert!(matches!(
            read_trace_file(f.path(), true, None),
            Err(Error::InvalidInput(_))
        ));
        let f = write_tmp("1\n3\n");
        assert!(read_trace_file(f.path(), false, Some(2)).is_err());
    }

    #[test]
    fn batching_examples() {
        let t = Trace::new(3, vec![1, 2, 1, 3]).unwrap();
        let b = batch_trace(&t, 2).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].counts(), vec![1, 1, 0]);
        assert_eq!(b[1].counts(), vec![1, 0, 1]);

        let rr = generate_round_robin(&RoundRobinConfig {
            files: 3,
            requests: 6,
        })
        .unwrap();
        let b = batch_trace(&rr, 3).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.counts() == vec![1, 1, 1]));

        assert!(batch_trace(&t, 5).is_err());
        assert!(batch_trace(&t, 0).is_err());
    }

    #[test]
    fn batching_zipf_sums() {
        let t = generate_zipf(&ZipfConfig {
            files: 1000,
            alpha: 1.0,
            requests: 100_000,
            seed: 1,
        })
        .unwrap();
        let b = batch_trace(&t, 200).unwrap();
        assert_eq!(b.len(), 500);
        assert!(b.iter().all(|x| x.total() == 200));
    }

    proptest! {
        #[test]
        fn batches_conserve_truncated_totals(
            events in prop::collection::vec(1u32..=8, 1..300),
            batch in 1usize..20,
        ) {
            prop_assume!(events.len() >= batch);
            let t = Trace::new(8, events.clone()).unwrap();
            let batches = batch_trace(&t, batch).unwrap();
            prop_assert_eq!(batches.len(), events.len() / batch);
            let mut expected = vec![0u32; 8];
            for &e in &events[..batches.len() * batch] {
                expected[e as usize - 1] += 1;
            }
            let mut got = vec![0u32; 8];
            for b in &batches {
                prop_assert_eq!(b.total(), batch as u64);
                for (g, c) in got.iter_mut().zip(b.counts()) {
                    *g += c;
                }
            }
            prop_assert_eq!(got, expected);
        }
    }
}
