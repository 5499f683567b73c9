//! Run configuration read from TOML. Every section and key is optional;
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::beam::{BeamParams, DEFAULT_QUERY_BATCH};
use crate::distill::{LossWeights, TrainConfig};
use crate::error::{BldError, Result};
use crate::model::StudentConfig;

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "BLD_CONFIG";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Teacher vocabulary: `toy`, `char`, `synthetic-a`, `synthetic-b` or a
    /// vocabulary file.
    pub vocab: Option<String>,
    pub merges: Option<PathBuf>,
    pub student_vocab: Option<String>,
    pub student_merges: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub shards: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    /// Uniform for the toy vocabulary, seeded random for the byte
    /// vocabulary, bigram otherwise.
    Auto,
    Uniform,
    Random,
    Bigram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub kind: TeacherKind,
    /// Additive smoothing of the bigram teacher.
    pub alpha: f64,
    /// End-of-sequence probability of the uniform teacher.
    pub eos_prob: f64,
    /// Sentences drawn to fit the bigram teacher when no corpus is given.
    pub train_samples: usize,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            kind: TeacherKind::Auto,
            alpha: 0.01,
            eos_prob: 0.0,
            train_samples: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub words: usize,
    pub teacher_tokens: usize,
    pub student_tokens: usize,
    /// Corpus size when no corpus file is given.
    pub samples: usize,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            words: 300,
            teacher_tokens: 200,
            student_tokens: 150,
            samples: 200,
            min_words: 3,
            max_words: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamSection {
    /// Beam width; 0 means unbounded.
    pub k: usize,
    pub epsilon: f64,
    pub batch_size: usize,
    pub reference_k: usize,
    pub reference_epsilon: f64,
    pub sweep_k: Vec<usize>,
    pub sweep_epsilon: Vec<f64>,
    pub repeats: usize,
}

impl Default for BeamSection {
    fn default() -> Self {
        Self {
            k: 10,
            epsilon: 1e-2,
            batch_size: DEFAULT_QUERY_BATCH,
            reference_k: 100,
            reference_epsilon: 1e-6,
            sweep_k: vec![2, 5, 10, 20, 50, 100],
            sweep_epsilon: vec![1e-1, 1e-2, 1e-3, 1e-4],
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub warmup_steps: usize,
    pub min_lr_ratio: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            warmup_steps: 100,
            min_lr_ratio: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub steps: usize,
    pub batch_size: usize,
    /// Epochs of byte-only fine-tuning.
    pub epochs: usize,
    pub prefetch: usize,
    /// Student tokens kept per sequence; 0 means the model's maximum.
    pub max_tokens: usize,
    /// Share of the corpus held out for evaluation.
    pub val_fraction: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            epochs: 3,
            prefetch: 4,
            max_tokens: 0,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ByteHeadSection {
    pub enabled: bool,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// Steps that train only the byte head before everything else.
    pub warmup_steps: usize,
}

impl Default for ByteHeadSection {
    fn default() -> Self {
        Self {
            enabled: true,
            n_heads: 10,
            vocab_size: 260,
            warmup_steps: 0,
        }
    }
}

/// Stand-in for low-rank adaptation: when enabled, only tensors whose name
/// starts with one of `trainable` are updated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSection {
    pub enabled: bool,
    pub rank: usize,
    pub trainable: Vec<String>,
}

impl Default for LoraSection {
    fn default() -> Self {
        Self {
            enabled: false,
            rank: 64,
            trainable: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub workers: usize,
    pub shards: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            workers: 4,
            shards: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedsSection {
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsSection,
    pub teacher: TeacherSection,
    pub synthetic: SyntheticSection,
    pub beam: BeamSection,
    pub loss: LossWeights,
    pub optimizer: OptimizerSection,
    pub schedule: ScheduleSection,
    pub training: TrainingSection,
    pub byte_head: ByteHeadSection,
    pub lora: LoraSection,
    pub model: ModelSection,
    pub pipeline: PipelineSection,
    pub seeds: SeedsSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| BldError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BldError::io(path, e))?;
        Self::parse(&text)
    }

    /// Loads `explicit` if given, else the file named by [`CONFIG_ENV`],
    /// else the defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        if let Some(p) = explicit {
            return Self::load(p);
        }
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
            _ => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.beam_params()?;
        self.reference_params()?;
        self.train_config().validate()?;
        let bad = |m: &str| Err(BldError::Config(m.to_string()));
        if self.pipeline.workers == 0 || self.pipeline.shards == 0 {
            return bad("pipeline workers and shards must be positive");
        }
        if !(0.0..1.0).contains(&self.training.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.synthetic.min_words == 0 || self.synthetic.min_words > self.synthetic.max_words {
            return bad("synthetic sentence length range is empty");
        }
        if !(self.teacher.alpha >= 0.0) || !(0.0..=1.0).contains(&self.teacher.eos_prob) {
            return bad("teacher alpha must be non-negative and eos_prob in [0, 1]");
        }
        self.student_config(300).validate()
    }

    fn params(k: usize, epsilon: f64, batch: usize) -> Result<BeamParams> {
        let k = if k == 0 { usize::MAX } else { k };
        Ok(BeamParams::new(k, epsilon)?.with_batch_size(batch))
    }

    pub fn beam_params(&self) -> Result<BeamParams> {
        Self::params(self.beam.k, self.beam.epsilon, self.beam.batch_size)
    }

    pub fn reference_params(&self) -> Result<BeamParams> {
        Self::params(
            self.beam.reference_k,
            self.beam.reference_epsilon,
            self.beam.batch_size,
        )
    }

    pub fn student_config(&self, vocab_size: usize) -> StudentConfig {
        StudentConfig {
            vocab_size,
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            max_seq_len: self.model.max_seq_len,
            n_byte_heads: self.byte_head.n_heads,
            byte_vocab_size: self.byte_head.vocab_size,
            seed: self.seeds.seed,
        }
    }

    pub fn max_tokens(&self) -> usize {
        if self.training.max_tokens == 0 {
            self.model.max_seq_len
        } else {
            self.training.max_tokens.min(self.model.max_seq_len)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let o = &self.optimizer;
        TrainConfig {
            steps: self.training.steps,
            batch_size: self.training.batch_size,
            lr: o.lr,
            warmup_steps: self.schedule.warmup_steps,
            min_lr_ratio: self.schedule.min_lr_ratio,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            adam_eps: o.eps,
            grad_clip: o.grad_clip,
            weights: self.loss,
            seed: self.seeds.seed,
            prefetch: self.training.prefetch,
            trainable: if self.lora.enabled {
                self.lora.trainable.clone()
            } else {
                Vec::new()
            },
            frozen: Vec::new(),
            byte_head_warmup_steps: self.byte_head.warmup_steps,
            byte_diagnostics: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn sections_override_and_unknown_keys_fail() {
        let c = RunConfig::parse("[optimizer]\nlr = 0.001\n[beam]\nk = 0\n").unwrap();
        assert_eq!(c.train_config().lr, 1e-3);
        assert_eq!(c.beam_params().unwrap().k, usize::MAX);
        assert!(RunConfig::parse("[optimizer]\nlearning_rate = 1.0\n").is_err());
        assert!(RunConfig::parse("[nonsense]\n").is_err());
        assert!(RunConfig::parse("[beam]\nepsilon = 1.5\n").is_err());
    }
}
