//! Offline computation of teacher byte conditionals, one shard per
//! contiguous slice of the corpus.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::shard::{write_atomic, ProbShard, ShardHeader, ShardRecord};
use crate::beam::{byte_stream, BeamParams};
use crate::error::{BldError, Result};
use crate::model::LanguageModel;
use crate::prob::ByteDistribution;
use crate::tokenizer::Vocabulary;

/// Assignment of sample indices to shards. Shard `s` of `S` over `n`
/// samples holds indices `s*n/S .. (s+1)*n/S`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlan {
    ranges: Vec<Range<usize>>,
    workers: usize,
}

impl ShardPlan {
    pub fn new(n_samples: usize, n_shards: usize, workers: usize) -> Result<Self> {
        if n_shards == 0 || workers == 0 {
            return Err(BldError::Config(
                "shard and worker counts must be positive".into(),
            ));
        }
        if n_shards > n_samples {
            return Err(BldError::Config(format!(
                "{n_shards} shards for {n_samples} samples would leave shards empty"
            )));
        }
        let ranges = (0..n_shards)
            .map(|s| s * n_samples / n_shards..(s + 1) * n_samples / n_shards)
            .collect();
        Ok(Self { ranges, workers })
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn num_shards(&self) -> usize {
        self.ranges.len()
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn num_samples(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }
}

pub fn shard_path(dir: &Path, shard: usize) -> PathBuf {
    dir.join(format!("shard-{shard:05}.bldp"))
}

/// Per-sample failures of one shard, one `id<TAB>message` line each.
pub fn error_log_path(dir: &Path, shard: usize) -> PathBuf {
    dir.join(format!("shard-{shard:05}.errors"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputeSummary {
    pub shards: Vec<PathBuf>,
    /// `(sample id, message)` of every sample the beam could not process.
    pub failures: Vec<(u64, String)>,
    pub positions: usize,
    /// Largest `|sum - 1|` over the emitted distributions before storage.
    pub max_normalization_error: f64,
}

struct ShardOutcome {
    path: PathBuf,
    failures: Vec<(u64, String)>,
    positions: usize,
    norm_error: f64,
}

fn run_shard<M: LanguageModel + ?Sized>(
    corpus: &[Vec<u8>],
    teacher: &M,
    params: BeamParams,
    header: ShardHeader,
    range: Range<usize>,
    index: usize,
    out_dir: &Path,
) -> Result<ShardOutcome> {
    let mut records = Vec::with_capacity(range.len());
    let mut failures = Vec::new();
    let mut positions = 0;
    let mut norm_error: f64 = 0.0;
    for id in range {
        match byte_stream(teacher, &corpus[id], params) {
            Ok(stream) => {
                positions += stream.dists.len();
                for d in &stream.dists {
                    norm_error = norm_error.max((d.sum() - 1.0).abs());
                }
                records.push(ShardRecord::from_dists(id as u64, &stream.dists));
            }
            Err(e) => failures.push((id as u64, e.to_string())),
        }
    }
    let path = shard_path(out_dir, index);
    ProbShard { header, records }.write(&path)?;
    let mut log = String::new();
    for (id, msg) in &failures {
        writeln!(log, "{id}\t{msg}").expect("writing to a string");
    }
    write_atomic(&error_log_path(out_dir, index), log.as_bytes())?;
    Ok(ShardOutcome {
        path,
        failures,
        positions,
        norm_error,
    })
}

/// Runs a fresh lattice over every sample and writes one shard per plan
/// range. Shards are independent jobs, so their contents do not depend on
/// the worker count.
pub fn precompute<M: LanguageModel + ?Sized>(
    corpus: &[Vec<u8>],
    teacher: &M,
    params: BeamParams,
    plan: &ShardPlan,
    out_dir: &Path,
) -> Result<PrecomputeSummary> {
    params.validate()?;
    if plan.num_samples() != corpus.len() {
        return Err(BldError::Config(format!(
            "plan covers {} samples, corpus has {}",
            plan.num_samples(),
            corpus.len()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| BldError::io(out_dir, e))?;
    let header = ShardHeader::new(teacher.vocab(), params);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.workers())
        .build()
        .map_err(|e| BldError::Config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<ShardOutcome> = pool.install(|| {
        plan.ranges()
            .par_iter()
            .enumerate()
            .map(|(i, r)| run_shard(corpus, teacher, params, header, r.clone(), i, out_dir))
            .collect::<Result<_>>()
    })?;
    let mut summary = PrecomputeSummary {
        shards: Vec::with_capacity(outcomes.len()),
        failures: Vec::new(),
        positions: 0,
        max_normalization_error: 0.0,
    };
    for o in outcomes {
        summary.shards.push(o.path);
        summary.failures.extend(o.failures);
        summary.positions += o.positions;
        summary.max_normalization_error = summary.max_normalization_error.max(o.norm_error);
    }
    Ok(summary)
}

/// Reads every shard file in `dir` (sorted by name) and returns the stored
/// conditionals keyed by sample id.
pub fn load_shards(
    dir: &Path,
    vocab: &Vocabulary,
) -> Result<(ShardHeader, BTreeMap<u64, Vec<ByteDistribution>>)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| BldError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bldp"))
        .collect();
    paths.sort();
    let mut header = None;
    let mut out = BTreeMap::new();
    for p in &paths {
        let shard = ProbShard::read(p, vocab)?;
        match header {
            None => header = Some(shard.header),
            Some(h) if h != shard.header => {
                return Err(BldError::Config(format!(
                    "{} was produced with different beam settings",
                    p.display()
                )))
            }
            Some(_) => {}
        }
        for r in &shard.records {
            out.insert(r.id, r.distributions()?);
        }
    }
    let header = header.ok_or_else(|| {
        BldError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no shard files"),
        )
    })?;
    Ok((header, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_partitions_contiguously() {
        let plan = ShardPlan::new(10, 3, 2).unwrap();
        assert_eq!(plan.ranges(), &[0..3, 3..6, 6..10]);
        assert_eq!(plan.num_samples(), 10);
        assert!(ShardPlan::new(2, 3, 1).is_err());
        assert!(ShardPlan::new(2, 1, 0).is_err());
    }
}
