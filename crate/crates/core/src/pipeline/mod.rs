//! Corpus ingestion, sharded precomputation of teacher byte conditionals,
//! run configuration, reports and the command-line front end.

pub mod cli;
pub mod config;
pub mod ingest;
pub mod precompute;
pub mod report;
pub mod shard;
pub mod synthetic;

pub use config::{RunConfig, TeacherKind, CONFIG_ENV};
pub use ingest::{ingest, parse_corpus, write_corpus, Corpus};
pub use precompute::{
    error_log_path, load_shards, precompute, shard_path, PrecomputeSummary, ShardPlan,
};
pub use report::{emit_report, LinePlot, ReportInput, Series};
pub use shard::{ProbShard, ShardHeader, ShardRecord, SHARD_MAGIC, SHARD_VERSION};
pub use synthetic::SyntheticLanguage;
