//! The `bld` command line. Every subcommand reads the run configuration
//! (`--config`, else `$BLD_CONFIG`, else defaults) and applies its flags on
//! top. Failures print the stage that failed and exit with status 1; usage
//! errors exit with status 2.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand, ValueEnum};

use super::config::{RunConfig, TeacherKind};
use super::ingest::ingest;
use super::precompute::{load_shards, precompute, ShardPlan};
use super::report::{emit_report, ReportInput};
use super::synthetic::SyntheticLanguage;
use crate::beam::{sweep, BeamLattice, SweepConfig, SweepReport};
use crate::distill::{
    byte_only_sft, evaluate, naive_ctd_token_probs, train, BeamConditionals, BeamTargets,
    ByteConditionals, ByteSftConfig, ExactConditionals, LossWeights, PrecomputedTargets,
    SupervisionTargets, TargetProvider,
};
use crate::exact::ExactOracle;
use crate::model::{BigramLm, LanguageModel, RandomLm, StudentModel, UniformLm};
use crate::prob::{ByteDistribution, EOS_SLOT};
use crate::tokenizer::{escape_bytes, MergeRules, TokenId, Tokenizer, Vocabulary};

#[derive(Debug, Parser)]
#[command(
    name = "bld",
    version,
    about = "Byte-level cross-tokenizer distillation toolkit"
)]
struct Cli {
    /// Run configuration file (TOML); defaults to $BLD_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps and precomputation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Vocabulary construction.
    Vocab {
        #[command(subcommand)]
        command: VocabCommand,
    },
    /// Tokenize a string and print ids and pieces.
    Tokenize(TokenizeArgs),
    /// Teacher next-byte conditionals for every prefix of an input.
    Byteprobs {
        #[command(subcommand)]
        command: ByteprobsCommand,
    },
    /// JSD and runtime of the beam over a grid of widths and thresholds.
    Sweep(SweepArgs),
    /// Write teacher byte conditionals of a corpus to shard files.
    Precompute(PrecomputeArgs),
    /// Train a student with byte-level distillation (or plain fine-tuning).
    Distill(DistillArgs),
    /// Fine-tune the byte head and backbone with the byte loss alone.
    ByteSft(ByteSftArgs),
    /// Student-token probabilities rebuilt from teacher byte conditionals.
    NaiveCtd(NaiveCtdArgs),
    /// Tables and plots from a record file.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
enum VocabCommand {
    /// Build a vocabulary and merge list and write them to a directory.
    Build(VocabBuildArgs),
}

#[derive(Debug, Subcommand)]
enum ByteprobsCommand {
    /// Exact marginalization over all coverings.
    Exact(ByteprobsExactArgs),
    /// Beam-approximated conditionals.
    Beam(ByteprobsBeamArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SyntheticSide {
    /// Prefix-chain merges (teacher side).
    A,
    /// Suffix-chain merges (student side).
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Arm {
    /// Token cross-entropy plus byte cross-entropy and teacher KL.
    Bld,
    /// Token cross-entropy only.
    Sft,
}

#[derive(Debug, Args)]
struct VocabArgs {
    /// `toy`, `char`, `synthetic-a`, `synthetic-b` or a vocabulary file.
    #[arg(long)]
    vocab: Option<String>,
    /// Merge list for a vocabulary file.
    #[arg(long)]
    merges: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StudentVocabArgs {
    /// Student vocabulary, in the same forms as `--vocab`.
    #[arg(long)]
    student_vocab: Option<String>,
    /// Merge list for a student vocabulary file.
    #[arg(long)]
    student_merges: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BeamArgs {
    /// Beam width; 0 means unbounded.
    #[arg(long)]
    k: Option<usize>,
    /// Pruning threshold relative to the heaviest hypothesis.
    #[arg(long)]
    eps: Option<f64>,
    /// Token-distribution queries per model call.
    #[arg(long)]
    query_batch: Option<usize>,
}

#[derive(Debug, Args)]
struct CorpusArgs {
    /// Line-delimited corpus; a synthetic corpus is drawn when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Size of the synthetic corpus.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Debug, Args)]
struct VocabBuildArgs {
    /// Derive merges from the synthetic language.
    #[arg(long, value_enum, conflicts_with = "merges")]
    synthetic: Option<SyntheticSide>,
    /// Merged tokens to create for a synthetic vocabulary.
    #[arg(long)]
    tokens: Option<usize>,
    /// Existing merge list to build from.
    #[arg(long)]
    merges: Option<PathBuf>,
    /// Output directory for `vocab.txt` and `merges.txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TokenizeArgs {
    #[command(flatten)]
    vocab: VocabArgs,
    #[arg(long)]
    input: String,
}

#[derive(Debug, Args)]
struct ByteprobsExactArgs {
    #[command(flatten)]
    vocab: VocabArgs,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    input: String,
    /// Limit on enumerated coverings.
    #[arg(long)]
    cap: Option<usize>,
}

#[derive(Debug, Args)]
struct ByteprobsBeamArgs {
    #[command(flatten)]
    vocab: VocabArgs,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    beam: BeamArgs,
    #[arg(long)]
    input: String,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    vocab: VocabArgs,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Beam widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    /// Pruning thresholds, comma separated.
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f64>,
    /// Timing passes per configuration.
    #[arg(long)]
    repeats: Option<usize>,
    /// Report directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PrecomputeArgs {
    #[command(flatten)]
    vocab: VocabArgs,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    beam: BeamArgs,
    #[arg(long)]
    shards: Option<usize>,
    /// Output directory for shard files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    warmup_steps: Option<usize>,
}

#[derive(Debug, Args)]
struct DistillArgs {
    #[command(flatten)]
    vocab: VocabArgs,
    #[command(flatten)]
    student: StudentVocabArgs,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    beam: BeamArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, value_enum, default_value = "bld")]
    arm: Arm,
    /// Precomputed shards; teacher targets are computed on the fly when
    /// absent.
    #[arg(long)]
    shards: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics trace to write (line-delimited JSON).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ByteSftArgs {
    #[command(flatten)]
    student: StudentVocabArgs,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    epochs: Option<usize>,
    /// Starting checkpoint; a fresh model when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for the per-epoch records and report.
    #[arg(long)]
    report_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct NaiveCtdArgs {
    #[command(flatten)]
    vocab: VocabArgs,
    #[command(flatten)]
    student: StudentVocabArgs,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    beam: BeamArgs,
    /// Text preceding the predicted student token.
    #[arg(long, default_value = "")]
    prefix: String,
    /// Use exact conditionals instead of the beam.
    #[arg(long)]
    exact: bool,
    /// Tokens to print.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Sweep records, a metrics trace or byte-only fine-tuning epochs.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// File name prefix; the input's stem by default.
    #[arg(long)]
    prefix: Option<String>,
}

/// A failure tagged with the pipeline stage that produced it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: anyhow::Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} failed: {:#}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|e| StageError {
            stage,
            error: e.into(),
        })
    }
}

type CliResult<T = ()> = Result<T, StageError>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, &mut std::io::stdout()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("bld: {e}");
            1
        }
    }
}

/// Like [`run_cli`] but captures standard output, for tests and embedding.
pub fn run_cli_captured<I, T>(args: I) -> (i32, String)
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => return (if e.use_stderr() { 2 } else { 0 }, e.to_string()),
    };
    let mut out = Vec::new();
    let code = match run(cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            out.extend_from_slice(format!("bld: {e}\n").as_bytes());
            1
        }
    };
    (code, String::from_utf8_lossy(&out).into_owned())
}

struct Ctx<'w> {
    cfg: RunConfig,
    out: &'w mut dyn std::io::Write,
}

macro_rules! say {
    ($ctx:expr, $($arg:tt)*) => {
        writeln!($ctx.out, $($arg)*).stage("output")?
    };
}

fn run(cli: Cli, out: &mut dyn std::io::Write) -> CliResult {
    let mut cfg = RunConfig::resolve(cli.config.as_deref()).stage("config")?;
    if let Some(s) = cli.seed {
        cfg.seeds.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.pipeline.workers = w;
    }
    cfg.validate().stage("config")?;
    let mut ctx = Ctx { cfg, out };
    match cli.command {
        Command::Vocab {
            command: VocabCommand::Build(a),
        } => vocab_build(&mut ctx, a),
        Command::Tokenize(a) => tokenize(&mut ctx, a),
        Command::Byteprobs {
            command: ByteprobsCommand::Exact(a),
        } => byteprobs_exact(&mut ctx, a),
        Command::Byteprobs {
            command: ByteprobsCommand::Beam(a),
        } => byteprobs_beam(&mut ctx, a),
        Command::Sweep(a) => run_sweep(&mut ctx, a),
        Command::Precompute(a) => run_precompute(&mut ctx, a),
        Command::Distill(a) => distill(&mut ctx, a),
        Command::ByteSft(a) => byte_sft(&mut ctx, a),
        Command::NaiveCtd(a) => naive_ctd(&mut ctx, a),
        Command::Report(a) => report(&mut ctx, a),
    }
}

// ---- shared resources -------------------------------------------------

/// A tokenizer plus, for the toy vocabulary, the tokens its teacher uses.
struct NamedTokenizer {
    name: String,
    tokenizer: Tokenizer,
    support: Option<Vec<TokenId>>,
}

impl NamedTokenizer {
    fn vocab(&self) -> Arc<Vocabulary> {
        Arc::new(self.tokenizer.vocab().clone())
    }
}

fn language(cfg: &RunConfig) -> crate::Result<SyntheticLanguage> {
    Ok(SyntheticLanguage::new(cfg.synthetic.words, cfg.seeds.seed)?
        .with_sentence_words(cfg.synthetic.min_words, cfg.synthetic.max_words))
}

fn toy_tokenizer() -> crate::Result<NamedTokenizer> {
    let tokens = [b"a".to_vec(), b"b".to_vec(), b"ab".to_vec()];
    let tokenizer = Tokenizer::build(
        &tokens,
        MergeRules::new(vec![(b"a".to_vec(), b"b".to_vec())]),
    )?;
    let support = tokens
        .iter()
        .map(|t| tokenizer.vocab().id_of(t).expect("toy token present"))
        .collect();
    Ok(NamedTokenizer {
        name: "toy".into(),
        tokenizer,
        support: Some(support),
    })
}

fn load_tokenizer(
    cfg: &RunConfig,
    spec: &str,
    merges: Option<&Path>,
) -> anyhow::Result<NamedTokenizer> {
    let plain = |tokenizer| NamedTokenizer {
        name: spec.to_string(),
        tokenizer,
        support: None,
    };
    Ok(match spec {
        "toy" => toy_tokenizer()?,
        "char" => plain(Tokenizer::bytes_only()),
        "synthetic-a" => plain(language(cfg)?.teacher_tokenizer(cfg.synthetic.teacher_tokens)?),
        "synthetic-b" => plain(language(cfg)?.student_tokenizer(cfg.synthetic.student_tokens)?),
        path => {
            let vocab = Vocabulary::read(Path::new(path))?;
            let merges = match merges {
                Some(m) => MergeRules::read(m)?,
                None => MergeRules::default(),
            };
            plain(Tokenizer::new(vocab, merges)?)
        }
    })
}

fn teacher_tokenizer(ctx: &Ctx<'_>, a: &VocabArgs) -> CliResult<NamedTokenizer> {
    let spec = a
        .vocab
        .clone()
        .or_else(|| ctx.cfg.paths.vocab.clone())
        .unwrap_or_else(|| "synthetic-a".into());
    let merges = a.merges.clone().or_else(|| ctx.cfg.paths.merges.clone());
    load_tokenizer(&ctx.cfg, &spec, merges.as_deref()).stage("vocabulary")
}

fn student_tokenizer(ctx: &Ctx<'_>, a: &StudentVocabArgs) -> CliResult<NamedTokenizer> {
    let spec = a
        .student_vocab
        .clone()
        .or_else(|| ctx.cfg.paths.student_vocab.clone())
        .unwrap_or_else(|| "synthetic-b".into());
    let merges = a
        .student_merges
        .clone()
        .or_else(|| ctx.cfg.paths.student_merges.clone());
    load_tokenizer(&ctx.cfg, &spec, merges.as_deref()).stage("student vocabulary")
}

/// The corpus file if one is configured, else a synthetic corpus.
fn corpus(ctx: &mut Ctx<'_>, a: &CorpusArgs) -> CliResult<(Vec<Vec<u8>>, bool)> {
    if let Some(path) = a.corpus.clone().or_else(|| ctx.cfg.paths.corpus.clone()) {
        let c = ingest(&path).stage("corpus")?;
        if c.skipped > 0 {
            eprintln!(
                "bld: skipped {} empty lines in {}",
                c.skipped,
                path.display()
            );
        }
        return Ok((c.samples, true));
    }
    let n = a.samples.unwrap_or(ctx.cfg.synthetic.samples);
    if n == 0 {
        return Err(anyhow::anyhow!("synthetic corpus size must be positive")).stage("corpus");
    }
    let lang = language(&ctx.cfg).stage("corpus")?;
    Ok((lang.corpus(n, ctx.cfg.seeds.seed.wrapping_add(1)), false))
}

fn teacher(
    ctx: &Ctx<'_>,
    tok: &NamedTokenizer,
    corpus: &[Vec<u8>],
    from_file: bool,
) -> CliResult<Box<dyn LanguageModel>> {
    let t = &ctx.cfg.teacher;
    let kind = match t.kind {
        TeacherKind::Auto if tok.name == "toy" => TeacherKind::Uniform,
        TeacherKind::Auto if tok.name == "char" => TeacherKind::Random,
        TeacherKind::Auto => TeacherKind::Bigram,
        k => k,
    };
    let vocab = tok.vocab();
    let model: Box<dyn LanguageModel> = match kind {
        TeacherKind::Uniform => {
            let support: Vec<TokenId> = match &tok.support {
                Some(s) => s.clone(),
                None => vocab.content_tokens().map(|(id, _)| id).collect(),
            };
            Box::new(UniformLm::over(vocab, &support, t.eos_prob).stage("teacher")?)
        }
        TeacherKind::Random => {
            Box::new(RandomLm::full(vocab, ctx.cfg.seeds.seed).stage("teacher")?)
        }
        TeacherKind::Bigram => {
            let fit: Vec<Vec<u8>> = if from_file {
                corpus.to_vec()
            } else {
                language(&ctx.cfg)
                    .stage("teacher")?
                    .corpus(t.train_samples, ctx.cfg.seeds.seed.wrapping_add(2))
            };
            Box::new(BigramLm::train(&tok.tokenizer, &fit, t.alpha).stage("teacher")?)
        }
        TeacherKind::Auto => unreachable!("resolved above"),
    };
    Ok(model)
}

fn beam_params(ctx: &Ctx<'_>, a: &BeamArgs) -> CliResult<crate::beam::BeamParams> {
    let mut cfg = ctx.cfg.clone();
    if let Some(k) = a.k {
        cfg.beam.k = k;
    }
    if let Some(e) = a.eps {
        cfg.beam.epsilon = e;
    }
    if let Some(b) = a.query_batch {
        cfg.beam.batch_size = b;
    }
    cfg.beam_params().stage("config")
}

fn format_dist(d: &ByteDistribution) -> String {
    let mut parts = Vec::new();
    for (i, &p) in d.probs().iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let label = if i == EOS_SLOT {
            "<eos>".to_string()
        } else {
            escape_bytes(&[i as u8]).replace('"', "'")
        };
        parts.push(format!("{label}={p:.12}"));
    }
    parts.join(" ")
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn reports_dir(ctx: &Ctx<'_>, explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| ctx.cfg.paths.reports.clone())
        .unwrap_or_else(|| PathBuf::from("reports"))
}

fn checkpoint_path(ctx: &Ctx<'_>, explicit: Option<PathBuf>, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        ctx.cfg
            .paths
            .checkpoints
            .clone()
            .unwrap_or_else(|| PathBuf::from("checkpoints"))
            .join(name)
    })
}

fn save_model(model: &StudentModel, path: &Path) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).stage("checkpoint")?;
    }
    model.save(path).stage("checkpoint")
}

fn apply_train_args(cfg: &mut RunConfig, a: &TrainArgs) {
    if let Some(s) = a.steps {
        cfg.training.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.training.batch_size = b;
    }
    if let Some(w) = a.warmup_steps {
        cfg.schedule.warmup_steps = w;
    }
}

/// Splits off the last `val_fraction` of the corpus (at least one sample
/// when the fraction is positive and the corpus has two or more).
fn split(n: usize, val_fraction: f64) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = n_val.min(n.saturating_sub(1));
    }
    (0..n - n_val, n - n_val..n)
}

fn supervision(
    tok: &Tokenizer,
    samples: &[Vec<u8>],
    max_tokens: usize,
) -> crate::Result<Vec<SupervisionTargets>> {
    samples
        .iter()
        .map(|s| {
            let mut t = tok.tokenize(s);
            t.truncate(max_tokens);
            SupervisionTargets::new(tok.vocab(), &t)
        })
        .collect()
}

// ---- subcommands ------------------------------------------------------

fn vocab_build(ctx: &mut Ctx<'_>, a: VocabBuildArgs) -> CliResult {
    let tokenizer = match (a.synthetic, &a.merges) {
        (Some(side), _) => {
            let lang = language(&ctx.cfg).stage("vocabulary")?;
            match side {
                SyntheticSide::A => {
                    lang.teacher_tokenizer(a.tokens.unwrap_or(ctx.cfg.synthetic.teacher_tokens))
                }
                SyntheticSide::B => {
                    lang.student_tokenizer(a.tokens.unwrap_or(ctx.cfg.synthetic.student_tokens))
                }
            }
            .stage("vocabulary")?
        }
        (None, Some(m)) => MergeRules::read(m)
            .and_then(Tokenizer::from_merges)
            .stage("vocabulary")?,
        (None, None) => {
            return Err(anyhow::anyhow!("give --synthetic a|b or --merges FILE"))
                .stage("vocabulary")
        }
    };
    std::fs::create_dir_all(&a.out).stage("output")?;
    let vp = a.out.join("vocab.txt");
    let mp = a.out.join("merges.txt");
    tokenizer.vocab().write(&vp).stage("output")?;
    tokenizer.merges().write(&mp).stage("output")?;
    say!(
        ctx,
        "wrote {} tokens ({} merges) to {} and {}",
        tokenizer.vocab().num_content(),
        tokenizer.merges().len(),
        vp.display(),
        mp.display()
    );
    Ok(())
}

fn tokenize(ctx: &mut Ctx<'_>, a: TokenizeArgs) -> CliResult {
    let tok = teacher_tokenizer(ctx, &a.vocab)?;
    let ids = tok.tokenizer.tokenize(a.input.as_bytes());
    let pieces: Vec<String> = ids
        .iter()
        .map(|&t| tok.tokenizer.vocab().bytes(t).map(escape_bytes))
        .collect::<crate::Result<_>>()
        .stage("tokenize")?;
    let ids: Vec<String> = ids.iter().map(u32::to_string).collect();
    say!(ctx, "{}", ids.join(" "));
    say!(ctx, "{}", pieces.join(" "));
    Ok(())
}

fn print_stream(ctx: &mut Ctx<'_>, input: &[u8], dists: &[ByteDistribution]) -> CliResult {
    for (i, d) in dists.iter().enumerate() {
        say!(
            ctx,
            "{i}\t{}\t{}",
            escape_bytes(&input[..i]),
            format_dist(d)
        );
    }
    Ok(())
}

fn byteprobs_exact(ctx: &mut Ctx<'_>, a: ByteprobsExactArgs) -> CliResult {
    let tok = teacher_tokenizer(ctx, &a.vocab)?;
    let (samples, from_file) = corpus(ctx, &a.corpus)?;
    let model = teacher(ctx, &tok, &samples, from_file)?;
    let mut oracle = ExactOracle::new(&model);
    if let Some(cap) = a.cap {
        oracle = oracle.with_cap(cap);
    }
    let input = a.input.as_bytes();
    let dists: Vec<ByteDistribution> = (0..=input.len())
        .map(|i| oracle.next_byte_dist(&input[..i]))
        .collect::<crate::Result<_>>()
        .stage("byteprobs")?;
    print_stream(ctx, input, &dists)
}

fn byteprobs_beam(ctx: &mut Ctx<'_>, a: ByteprobsBeamArgs) -> CliResult {
    let tok = teacher_tokenizer(ctx, &a.vocab)?;
    let (samples, from_file) = corpus(ctx, &a.corpus)?;
    let model = teacher(ctx, &tok, &samples, from_file)?;
    let params = beam_params(ctx, &a.beam)?;
    let input = a.input.as_bytes();
    let mut lattice = BeamLattice::new(&model, params).stage("byteprobs")?;
    let mut dists = Vec::with_capacity(input.len() + 1);
    for (i, &b) in input.iter().enumerate() {
        dists.push(lattice.next_byte_dist().stage("byteprobs")?);
        lattice
            .advance(b)
            .with_context(|| format!("advancing past byte {i}"))
            .stage("byteprobs")?;
    }
    dists.push(lattice.next_byte_dist().stage("byteprobs")?);
    print_stream(ctx, input, &dists)
}

fn run_sweep(ctx: &mut Ctx<'_>, a: SweepArgs) -> CliResult {
    let tok = teacher_tokenizer(ctx, &a.vocab)?;
    let (samples, from_file) = corpus(ctx, &a.corpus)?;
    let model = teacher(ctx, &tok, &samples, from_file)?;
    let b = &ctx.cfg.beam;
    let ks: Vec<usize> = if a.k.is_empty() {
        b.sweep_k.clone()
    } else {
        a.k.clone()
    };
    let ks = ks
        .into_iter()
        .map(|k| if k == 0 { usize::MAX } else { k })
        .collect();
    let eps = if a.eps.is_empty() {
        b.sweep_epsilon.clone()
    } else {
        a.eps.clone()
    };
    let mut sc = SweepConfig::new(ks, eps);
    sc.reference = ctx.cfg.reference_params().stage("config")?;
    sc.workers = ctx.cfg.pipeline.workers;
    sc.repeats = a.repeats.unwrap_or(b.repeats).max(1);
    sc.batch_size = b.batch_size;
    let report: SweepReport = sweep(&model, &samples, &sc).stage("sweep")?;
    let dir = reports_dir(ctx, a.out);
    std::fs::create_dir_all(&dir).stage("report")?;
    report.write(&dir.join("sweep.jsonl")).stage("report")?;
    let input = ReportInput::Sweep(report.records.clone());
    emit_report(&input, &dir, "sweep").stage("report")?;
    say!(ctx, "{}", input.table().trim_end());
    if report.reference_failures > 0 {
        say!(
            ctx,
            "reference failed on {} samples (excluded)",
            report.reference_failures
        );
    }
    Ok(())
}

fn run_precompute(ctx: &mut Ctx<'_>, a: PrecomputeArgs) -> CliResult {
    let tok = teacher_tokenizer(ctx, &a.vocab)?;
    let (samples, from_file) = corpus(ctx, &a.corpus)?;
    let model = teacher(ctx, &tok, &samples, from_file)?;
    let params = beam_params(ctx, &a.beam)?;
    // The configured default shrinks to fit a small corpus; an explicit
    // request for more shards than samples is an error.
    let shards = a
        .shards
        .unwrap_or_else(|| ctx.cfg.pipeline.shards.min(samples.len()));
    let plan =
        ShardPlan::new(samples.len(), shards, ctx.cfg.pipeline.workers).stage("precompute")?;
    let dir = a
        .out
        .or_else(|| ctx.cfg.paths.shards.clone())
        .unwrap_or_else(|| PathBuf::from("shards"));
    let summary = precompute(&samples, &model, params, &plan, &dir).stage("precompute")?;
    say!(
        ctx,
        "wrote {} shards ({} samples, {} positions, {} failures) to {}",
        summary.shards.len(),
        samples.len() - summary.failures.len(),
        summary.positions,
        summary.failures.len(),
        dir.display()
    );
    Ok(())
}

fn distill(ctx: &mut Ctx<'_>, a: DistillArgs) -> CliResult {
    apply_train_args(&mut ctx.cfg, &a.train);
    ctx.cfg.validate().stage("config")?;
    let teacher_tok = teacher_tokenizer(ctx, &a.vocab)?;
    let student_tok = student_tokenizer(ctx, &a.student)?;
    let (samples, from_file) = corpus(ctx, &a.corpus)?;
    let (train_r, val_r) = split(samples.len(), ctx.cfg.training.val_fraction);
    let max_tokens = ctx.cfg.max_tokens();
    let mut tc = ctx.cfg.train_config();
    let n_heads = ctx.cfg.byte_head.n_heads;
    let student_vocab = student_tok.tokenizer.vocab();

    let model = StudentModel::new(ctx.cfg.student_config(student_vocab.len())).stage("distill")?;
    let train_samples = &samples[train_r.clone()];
    let teacher_model;
    let provider: Box<dyn TargetProvider + '_>;
    match a.arm {
        Arm::Sft => {
            tc.weights = LossWeights::sft();
            provider = Box::new(crate::distill::NoTargets(
                supervision(&student_tok.tokenizer, train_samples, max_tokens).stage("distill")?,
            ));
        }
        Arm::Bld => {
            if let Some(dir) = a.shards.clone().or_else(|| ctx.cfg.paths.shards.clone()) {
                let (_, streams) =
                    load_shards(&dir, teacher_tok.tokenizer.vocab()).stage("shards")?;
                let missing = train_r
                    .clone()
                    .filter(|i| !streams.contains_key(&(*i as u64)))
                    .count();
                if missing > 0 {
                    eprintln!("bld: {missing} training samples have no teacher targets");
                }
                let kept: Vec<Option<Vec<ByteDistribution>>> = train_r
                    .clone()
                    .map(|i| streams.get(&(i as u64)).cloned())
                    .collect();
                provider = Box::new(
                    PrecomputedTargets::from_streams(
                        &student_tok.tokenizer,
                        train_samples,
                        &kept,
                        n_heads,
                        max_tokens,
                    )
                    .stage("shards")?,
                );
            } else {
                teacher_model = teacher(ctx, &teacher_tok, &samples, from_file)?;
                provider = Box::new(BeamTargets::new(
                    &teacher_model,
                    &student_tok.tokenizer,
                    train_samples,
                    beam_params(ctx, &a.beam)?,
                    n_heads,
                    max_tokens,
                ));
            }
        }
    }
    let outcome = train(model, provider.as_ref(), &tc).stage("distill")?;
    let out = checkpoint_path(ctx, a.out, "student.bldm");
    save_model(&outcome.model, &out)?;
    let trace = a.trace.unwrap_or_else(|| out.with_extension("trace.jsonl"));
    write_jsonl(&trace, &outcome.trace).stage("output")?;
    if !val_r.is_empty() {
        let val =
            supervision(&student_tok.tokenizer, &samples[val_r], max_tokens).stage("evaluate")?;
        let m = evaluate(&outcome.model, &val).stage("evaluate")?;
        say!(
            ctx,
            "held-out token_ce {:.6} byte_ce {:.6}",
            m.token_ce,
            m.byte_ce
        );
    }
    say!(ctx, "wrote {} and {}", out.display(), trace.display());
    Ok(())
}

fn byte_sft(ctx: &mut Ctx<'_>, a: ByteSftArgs) -> CliResult {
    apply_train_args(&mut ctx.cfg, &a.train);
    ctx.cfg.validate().stage("config")?;
    let tok = student_tokenizer(ctx, &a.student)?;
    let (samples, _) = corpus(ctx, &a.corpus)?;
    let (train_r, val_r) = split(samples.len(), ctx.cfg.training.val_fraction.max(0.05));
    let max_tokens = ctx.cfg.max_tokens();
    let train_set = supervision(&tok.tokenizer, &samples[train_r], max_tokens).stage("byte-sft")?;
    let val_set = supervision(&tok.tokenizer, &samples[val_r], max_tokens).stage("byte-sft")?;
    let model = match &a.init {
        Some(p) => StudentModel::load(p).stage("checkpoint")?,
        None => StudentModel::new(ctx.cfg.student_config(tok.tokenizer.vocab().len()))
            .stage("byte-sft")?,
    };
    let config = ByteSftConfig {
        epochs: a.epochs.unwrap_or(ctx.cfg.training.epochs),
        train: ctx.cfg.train_config(),
    };
    let (model, epochs) = byte_only_sft(model, &train_set, &val_set, &config).stage("byte-sft")?;
    let out = checkpoint_path(ctx, a.out, "byte_sft.bldm");
    save_model(&model, &out)?;
    let dir = reports_dir(ctx, a.report_dir);
    write_jsonl(&dir.join("byte_sft.jsonl"), &epochs).stage("report")?;
    let input = ReportInput::ByteSft(epochs);
    emit_report(&input, &dir, "byte_sft").stage("report")?;
    say!(ctx, "{}", input.table().trim_end());
    Ok(())
}

fn naive_ctd(ctx: &mut Ctx<'_>, a: NaiveCtdArgs) -> CliResult {
    let teacher_tok = teacher_tokenizer(ctx, &a.vocab)?;
    let student_tok = student_tokenizer(ctx, &a.student)?;
    let (samples, from_file) = corpus(ctx, &a.corpus)?;
    let model = teacher(ctx, &teacher_tok, &samples, from_file)?;
    let prefix = student_tok.tokenizer.tokenize(a.prefix.as_bytes());
    let cond: Box<dyn ByteConditionals> = if a.exact {
        Box::new(ExactConditionals(ExactOracle::new(&model)))
    } else {
        Box::new(BeamConditionals {
            model: &model,
            params: beam_params(ctx, &a.beam)?,
        })
    };
    let student_vocab = student_tok.tokenizer.vocab();
    let r = naive_ctd_token_probs(cond.as_ref(), student_vocab, &prefix).stage("naive-ctd")?;
    let mut order: Vec<usize> = (0..r.probs.len()).collect();
    order.sort_by(|&x, &y| r.probs[y].total_cmp(&r.probs[x]).then(x.cmp(&y)));
    for &id in order.iter().take(a.top) {
        let label = if student_vocab.is_eos(id as TokenId) {
            "<eos>".to_string()
        } else {
            escape_bytes(student_vocab.bytes(id as TokenId).stage("naive-ctd")?)
        };
        say!(ctx, "{id}\t{label}\t{:.12}", r.probs[id]);
    }
    say!(
        ctx,
        "sum {:.12} over {} tokens, {} conditionals",
        r.sum,
        r.probs.len(),
        r.queries
    );
    Ok(())
}

fn report(ctx: &mut Ctx<'_>, a: ReportArgs) -> CliResult {
    let input = ReportInput::read(&a.input).stage("report")?;
    let dir = reports_dir(ctx, a.out);
    let prefix = a.prefix.unwrap_or_else(|| {
        a.input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "report".into())
    });
    let written = emit_report(&input, &dir, &prefix).stage("report")?;
    say!(ctx, "{}", input.table().trim_end());
    for p in written {
        say!(ctx, "wrote {}", p.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_keeps_both_sides_non_empty() {
        assert_eq!(split(10, 0.1), (0..9, 9..10));
        assert_eq!(split(2, 0.01), (0..1, 1..2));
        assert_eq!(split(5, 0.0), (0..5, 5..5));
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(run_cli_captured(["bld", "frobnicate"]).0, 2);
        assert_eq!(run_cli_captured(["bld", "tokenize", "--bogus"]).0, 2);
    }

    #[test]
    fn command_definitions_are_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
