//! Accuracy and cost of the lattice across beam widths and pruning
//! thresholds, scored by Jensen-Shannon divergence against a reference
//! configuration.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{byte_stream, BeamParams, ByteStream};
use crate::error::{BldError, Result};
use crate::model::LanguageModel;
use crate::prob::{jsd_unchecked, ByteDistribution};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub ks: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub reference: BeamParams,
    pub workers: usize,
    /// Timing passes per configuration; the fastest is reported.
    pub repeats: usize,
    pub batch_size: usize,
}

impl SweepConfig {
    pub fn new(ks: Vec<usize>, epsilons: Vec<f64>) -> Self {
        Self {
            ks,
            epsilons,
            reference: BeamParams {
                k: 100,
                epsilon: 1e-6,
                batch_size: super::DEFAULT_QUERY_BATCH,
            },
            workers: 1,
            repeats: 1,
            batch_size: super::DEFAULT_QUERY_BATCH,
        }
    }
}

/// One `(K, epsilon)` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub k: usize,
    pub epsilon: f64,
    pub median_jsd: f64,
    pub mean_jsd: f64,
    pub seconds_per_sample: f64,
    /// Slowest timing pass, for judging measurement noise.
    pub seconds_per_sample_max: f64,
    pub queries_per_sample: f64,
    pub mean_max_alive: f64,
    pub positions: usize,
    pub failures: usize,
    /// Largest `|sum - 1|` over every distribution produced by this row.
    pub max_normalization_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub reference: BeamParams,
    pub samples: usize,
    pub reference_failures: usize,
    pub records: Vec<SweepRecord>,
}

impl SweepReport {
    pub fn record(&self, k: usize, epsilon: f64) -> Option<&SweepRecord> {
        self.records
            .iter()
            .find(|r| r.k == k && r.epsilon == epsilon)
    }

    /// One JSON object per line, one line per record.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| BldError::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| BldError::io(path, e))
    }

    pub fn read_records(path: &Path) -> Result<Vec<SweepRecord>> {
        let f = std::fs::File::open(path).map_err(|e| BldError::io(path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| BldError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| BldError::Parse {
                what: "sweep record",
                line: i + 1,
                reason: e.to_string(),
            })?);
        }
        Ok(out)
    }
}

fn run_all<M: LanguageModel + ?Sized>(
    model: &M,
    corpus: &[Vec<u8>],
    params: BeamParams,
) -> Vec<Result<ByteStream>> {
    corpus
        .par_iter()
        .map(|s| byte_stream(model, s, params))
        .collect()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn norm_error(dists: &[ByteDistribution]) -> f64 {
    dists
        .iter()
        .map(|d| (d.sum() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Runs every `(K, epsilon)` pair over the corpus. Samples whose reference
/// pass fails are excluded; failures of a swept configuration are counted
/// per row.
pub fn sweep<M: LanguageModel + ?Sized>(
    model: &M,
    corpus: &[Vec<u8>],
    config: &SweepConfig,
) -> Result<SweepReport> {
    if corpus.is_empty() {
        return Err(BldError::EmptyInput("sweep corpus"));
    }
    if config.ks.is_empty() || config.epsilons.is_empty() {
        return Err(BldError::Config(
            "sweep needs at least one K and one epsilon".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| BldError::Config(format!("cannot start worker pool: {e}")))?;
    let reference = config.reference.with_batch_size(config.batch_size);
    reference.validate()?;
    let refs = pool.install(|| run_all(model, corpus, reference));
    let reference_failures = refs.iter().filter(|r| r.is_err()).count();

    let grid: Vec<BeamParams> = config
        .ks
        .iter()
        .flat_map(|&k| config.epsilons.iter().map(move |&e| (k, e)))
        .map(|(k, e)| Ok(BeamParams::new(k, e)?.with_batch_size(config.batch_size)))
        .collect::<Result<_>>()?;
    // Timing passes sweep the whole grid once per repeat, so slow drift of
    // the machine affects every row alike instead of whichever row ran
    // during it.
    let mut times = vec![Vec::with_capacity(config.repeats.max(1)); grid.len()];
    let mut outputs: Vec<Option<Vec<Result<ByteStream>>>> = grid.iter().map(|_| None).collect();
    for _ in 0..config.repeats.max(1) {
        for (i, &params) in grid.iter().enumerate() {
            let start = Instant::now();
            let out = pool.install(|| run_all(model, corpus, params));
            times[i].push(start.elapsed().as_secs_f64() / corpus.len() as f64);
            outputs[i].get_or_insert(out);
        }
    }

    let mut records = Vec::new();
    for ((params, times), streams) in grid.iter().zip(&times).zip(outputs) {
        let (k, epsilon) = (params.k, params.epsilon);
        let streams = streams.expect("at least one pass");
        let mut divergences = Vec::new();
        let mut failures = 0;
        let mut queries = 0usize;
        let mut alive = 0usize;
        let mut ok = 0usize;
        let mut norm: f64 = 0.0;
        for (approx, reference) in streams.iter().zip(&refs) {
            let Ok(reference) = reference else { continue };
            match approx {
                Ok(s) => {
                    ok += 1;
                    queries += s.queries;
                    alive += s.max_alive;
                    norm = norm.max(norm_error(&s.dists));
                    for (p, q) in s.dists.iter().zip(&reference.dists) {
                        divergences.push(jsd_unchecked(p.probs(), q.probs()));
                    }
                }
                Err(_) => failures += 1,
            }
        }
        divergences.sort_by(f64::total_cmp);
        let mean_jsd = if divergences.is_empty() {
            f64::NAN
        } else {
            divergences.iter().sum::<f64>() / divergences.len() as f64
        };
        records.push(SweepRecord {
            k,
            epsilon,
            median_jsd: median(&divergences),
            mean_jsd,
            seconds_per_sample: times.iter().copied().fold(f64::INFINITY, f64::min),
            seconds_per_sample_max: times.iter().copied().fold(0.0, f64::max),
            queries_per_sample: queries as f64 / ok.max(1) as f64,
            mean_max_alive: alive as f64 / ok.max(1) as f64,
            positions: divergences.len(),
            failures,
            max_normalization_error: norm,
        });
    }
    Ok(SweepReport {
        reference,
        samples: corpus.len(),
        reference_failures,
        records,
    })
}
