//! AdamW training of the student on byte-level distillation targets, and
//! the byte-only fine-tuning experiment.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{bld_loss, BldObjective, SupervisionTargets, TrainExample};
use super::targets::build_byte_targets;
use super::{LossBreakdown, LossWeights};
use crate::beam::BeamParams;
use crate::error::{BldError, Result};
use crate::model::{LanguageModel, StudentModel};
use crate::prob::ByteDistribution;
use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Floor of the cosine decay as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Batches prepared ahead of the optimizer.
    pub prefetch: usize,
    /// When non-empty, only tensors whose name starts with one of these
    /// prefixes are trained.
    pub trainable: Vec<String>,
    /// Tensors whose name starts with one of these prefixes are frozen.
    pub frozen: Vec<String>,
    /// Initial steps that update only the byte head.
    pub byte_head_warmup_steps: usize,
    /// Evaluate the byte head even when both byte weights are zero.
    pub byte_diagnostics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 2e-5,
            warmup_steps: 100,
            min_lr_ratio: 0.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            weights: LossWeights::default(),
            seed: 0,
            prefetch: 4,
            trainable: Vec::new(),
            frozen: Vec::new(),
            byte_head_warmup_steps: 0,
            byte_diagnostics: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |m: &str| Err(BldError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("min_lr_ratio must lie in [0, 1]");
        }
        Ok(())
    }

    fn schedule(&self) -> Schedule {
        Schedule {
            peak: self.lr,
            warmup: self.warmup_steps,
            total: self.steps,
            min_ratio: self.min_lr_ratio,
        }
    }
}

/// Linear warm-up to `peak`, then cosine decay to `peak * min_ratio` at
/// step `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
    pub min_ratio: f64,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.peak * (self.min_ratio + (1.0 - self.min_ratio) * cosine)
    }
}

/// Adam with decoupled weight decay. Decay applies only where `decay` is
/// set; parameters outside `trainable` are left untouched.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
        }
    }

    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        trainable: &[bool],
        decay: &[bool],
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            if decay[i] {
                params[i] -= lr * self.weight_decay * params[i];
            }
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Supplies training examples, possibly computing teacher targets lazily.
pub trait TargetProvider: Sync {
    fn len(&self) -> usize;

    fn example(&self, index: usize) -> Result<TrainExample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Hard targets only.
#[derive(Debug, Clone)]
pub struct NoTargets(pub Vec<SupervisionTargets>);

impl TargetProvider for NoTargets {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn example(&self, index: usize) -> Result<TrainExample> {
        Ok(TrainExample {
            targets: self.0[index].clone(),
            teacher: None,
        })
    }
}

/// Examples whose teacher targets were computed ahead of time.
#[derive(Debug, Clone)]
pub struct PrecomputedTargets(pub Vec<TrainExample>);

impl TargetProvider for PrecomputedTargets {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn example(&self, index: usize) -> Result<TrainExample> {
        Ok(self.0[index].clone())
    }
}

impl PrecomputedTargets {
    /// Builds examples from per-sample byte streams (for instance read from
    /// shards), truncating each sample to `max_tokens` student tokens. A
    /// missing stream (the beam failed on that sample) leaves the example
    /// with hard targets only.
    pub fn from_streams(
        student: &Tokenizer,
        samples: &[Vec<u8>],
        streams: &[Option<Vec<ByteDistribution>>],
        n_byte_heads: usize,
        max_tokens: usize,
    ) -> Result<Self> {
        if samples.len() != streams.len() {
            return Err(BldError::Shape(format!(
                "{} samples but {} byte streams",
                samples.len(),
                streams.len()
            )));
        }
        let mut out = Vec::with_capacity(samples.len());
        for (s, stream) in samples.iter().zip(streams) {
            let mut tokens = student.tokenize(s);
            tokens.truncate(max_tokens);
            let targets = SupervisionTargets::new(student.vocab(), &tokens)?;
            let lens: Vec<usize> = (0..targets.len())
                .map(|l| targets.token_bytes(l).len())
                .collect();
            let teacher = stream
                .as_ref()
                .map(|st| super::TeacherByteTargets::from_stream(&lens, st, n_byte_heads))
                .transpose()?;
            out.push(TrainExample { targets, teacher });
        }
        Ok(Self(out))
    }
}

/// Runs the beam over each sample when its batch is prepared. Samples the
/// beam cannot process keep their hard targets and are counted in
/// `fallbacks`.
pub struct BeamTargets<'a, M: ?Sized> {
    pub teacher: &'a M,
    pub student: &'a Tokenizer,
    pub samples: &'a [Vec<u8>],
    pub params: BeamParams,
    pub n_byte_heads: usize,
    pub max_tokens: usize,
    pub fallbacks: AtomicUsize,
}

impl<'a, M: LanguageModel + ?Sized> BeamTargets<'a, M> {
    pub fn new(
        teacher: &'a M,
        student: &'a Tokenizer,
        samples: &'a [Vec<u8>],
        params: BeamParams,
        n_byte_heads: usize,
        max_tokens: usize,
    ) -> Self {
        Self {
            teacher,
            student,
            samples,
            params,
            n_byte_heads,
            max_tokens,
            fallbacks: AtomicUsize::new(0),
        }
    }
}

impl<M: LanguageModel + ?Sized> TargetProvider for BeamTargets<'_, M> {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn example(&self, index: usize) -> Result<TrainExample> {
        let sample = &self.samples[index];
        let (tokens, teacher) = match build_byte_targets(
            self.teacher,
            self.student,
            sample,
            self.params,
            self.n_byte_heads,
        ) {
            Ok((mut tokens, teacher)) => {
                tokens.truncate(self.max_tokens);
                let teacher = teacher.truncated(tokens.len());
                (tokens, Some(teacher))
            }
            Err(BldError::TargetConstruction { .. }) => {
                self.fallbacks.fetch_add(1, Ordering::Relaxed);
                let mut tokens = self.student.tokenize(sample);
                tokens.truncate(self.max_tokens);
                (tokens, None)
            }
            Err(e) => return Err(e),
        };
        Ok(TrainExample {
            targets: SupervisionTargets::new(self.student.vocab(), &tokens)?,
            teacher,
        })
    }
}

/// One optimizer step of the metrics trace. Loss terms are batch means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub token_ce: f64,
    pub byte_ce: f64,
    pub byte_kl: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: StudentModel,
    pub trace: Vec<MetricRecord>,
}

fn name_matches(name: &str, prefixes: &[String]) -> bool {
    prefixes.iter().any(|p| name.starts_with(p.as_str()))
}

fn start_token(model: &StudentModel) -> TokenId {
    (model.config().vocab_size - 1) as TokenId
}

/// Deterministic epoch-shuffled batch order covering `steps` batches.
fn batch_plan(n: usize, batch_size: usize, steps: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = Vec::with_capacity(steps);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    while plan.len() < steps {
        if cursor >= order.len() {
            order = (0..n).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + batch_size).min(order.len());
        plan.push(order[cursor..end].to_vec());
        cursor = end;
    }
    plan
}

struct StepOutput {
    loss: LossBreakdown,
    lr: f64,
}

/// Shared optimizer loop: batches listed in `plan` are produced on a
/// background thread and consumed in order.
fn optimize(
    mut model: StudentModel,
    provider: &dyn TargetProvider,
    config: &TrainConfig,
    plan: &[Vec<usize>],
    mut on_step: impl FnMut(usize, &StepOutput, &StudentModel) -> Result<()>,
) -> Result<StudentModel> {
    config.validate()?;
    let n_heads = model.config().n_byte_heads;
    let mut trainable = model.param_mask(|name| {
        (config.trainable.is_empty() || name_matches(name, &config.trainable))
            && !name_matches(name, &config.frozen)
    });
    let head_only = model.param_mask(|name| name.starts_with("byte_head"));
    let decay: Vec<bool> = {
        let mut d = vec![false; model.num_params()];
        for spec in model.specs() {
            if spec.shape.len() >= 2 {
                d[spec.range()].fill(true);
            }
        }
        d
    };
    let mut opt = AdamW::new(
        model.num_params(),
        config.beta1,
        config.beta2,
        config.adam_eps,
        config.weight_decay,
    );
    let schedule = config.schedule();
    let byte_terms = model.has_byte_head()
        && (config.byte_diagnostics
            || config.weights.lambda_byte > 0.0
            || config.weights.lambda_kl > 0.0);
    let start = start_token(&model);
    let base_mask = trainable.clone();

    std::thread::scope(|scope| -> Result<StudentModel> {
        let (tx, rx) = sync_channel::<Result<Vec<TrainExample>>>(config.prefetch.max(1));
        scope.spawn(move || {
            for batch in plan {
                let examples: Result<Vec<TrainExample>> =
                    batch.iter().map(|&i| provider.example(i)).collect();
                let failed = examples.is_err();
                if tx.send(examples).is_err() || failed {
                    break;
                }
            }
        });
        for step in 0..plan.len() {
            let examples = rx
                .recv()
                .map_err(|_| BldError::Config("batch producer stopped early".into()))??;
            let inputs: Vec<Vec<TokenId>> =
                examples.iter().map(|e| e.targets.inputs(start)).collect();
            let mut objective = BldObjective::new(&examples, config.weights, n_heads);
            if !byte_terms {
                objective = objective.without_byte_terms();
            }
            let (loss, mut grads) =
                model
                    .compute_gradients(&objective, &inputs)
                    .map_err(|e| match e {
                        BldError::NonFiniteLoss { .. } | BldError::NonFiniteTerm { .. } => {
                            BldError::Diverged { step }
                        }
                        other => other,
                    })?;
            let scale = 1.0 / examples.len() as f64;
            let loss = loss.scaled(scale);
            grads.scale(scale);
            if !loss.is_finite() || !grads.is_finite() {
                return Err(BldError::Diverged { step });
            }
            trainable.copy_from_slice(&base_mask);
            if step < config.byte_head_warmup_steps {
                for (t, h) in trainable.iter_mut().zip(&head_only) {
                    *t = *t && *h;
                }
            }
            let norm = grads
                .values()
                .iter()
                .zip(&trainable)
                .filter(|(_, t)| **t)
                .map(|(g, _)| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > config.grad_clip {
                grads.scale(config.grad_clip / norm);
            }
            let lr = schedule.lr(step);
            opt.step(model.params_mut(), grads.values(), &trainable, &decay, lr);
            on_step(step, &StepOutput { loss, lr }, &model)?;
        }
        Ok(model)
    })
}

/// Trains for `config.steps` optimizer steps over the provider's examples.
pub fn train(
    model: StudentModel,
    provider: &dyn TargetProvider,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if provider.is_empty() {
        return Err(BldError::EmptyInput("training examples"));
    }
    let plan = batch_plan(provider.len(), config.batch_size, config.steps, config.seed);
    let mut trace = Vec::with_capacity(config.steps);
    let model = optimize(model, provider, config, &plan, |step, out, _| {
        trace.push(MetricRecord {
            step,
            token_ce: out.loss.token_ce,
            byte_ce: out.loss.byte_ce,
            byte_kl: out.loss.byte_kl,
            total: out.loss.total,
            lr: out.lr,
        });
        Ok(())
    })?;
    Ok(TrainOutcome { model, trace })
}

/// Mean per-sequence token and byte cross-entropy (byte terms only when
/// the model has a byte head).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub token_ce: f64,
    pub byte_ce: f64,
}

pub fn evaluate(model: &StudentModel, examples: &[SupervisionTargets]) -> Result<EvalMetrics> {
    if examples.is_empty() {
        return Err(BldError::EmptyInput("evaluation examples"));
    }
    let start = start_token(model);
    let weights = LossWeights::sft();
    let parts: Vec<LossBreakdown> = examples
        .par_iter()
        .map(|t| {
            let out = model.forward(&t.inputs(start))?;
            bld_loss(&out, t, None, &weights)
        })
        .collect::<Result<_>>()?;
    let n = parts.len() as f64;
    Ok(EvalMetrics {
        token_ce: parts.iter().map(|p| p.token_ce).sum::<f64>() / n,
        byte_ce: parts.iter().map(|p| p.byte_ce).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ByteSftConfig {
    pub epochs: usize,
    pub train: TrainConfig,
}

impl Default for ByteSftConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            train: TrainConfig {
                weights: LossWeights::byte_only(),
                frozen: vec!["token_head".into()],
                ..TrainConfig::default()
            },
        }
    }
}

/// Losses after each epoch of byte-only fine-tuning. Epoch 0 is the
/// initial model evaluated on both splits; later training values are means
/// over the epoch's batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ByteSftEpoch {
    pub epoch: usize,
    pub train_byte_ce: f64,
    pub train_token_ce: f64,
    pub val_byte_ce: f64,
    pub val_token_ce: f64,
}

/// Fine-tunes with the byte cross-entropy alone; the token head stays
/// frozen so any change in token-level loss comes through the backbone.
pub fn byte_only_sft(
    model: StudentModel,
    train_set: &[SupervisionTargets],
    val_set: &[SupervisionTargets],
    config: &ByteSftConfig,
) -> Result<(StudentModel, Vec<ByteSftEpoch>)> {
    if !model.has_byte_head() {
        return Err(BldError::Config(
            "byte-only fine-tuning needs a byte head".into(),
        ));
    }
    if train_set.is_empty() {
        return Err(BldError::EmptyInput("training examples"));
    }
    let mut tc = config.train.clone();
    tc.weights = LossWeights::byte_only();
    if !name_matches("token_head.weight", &tc.frozen) {
        tc.frozen.push("token_head".into());
    }
    let per_epoch = train_set.len().div_ceil(tc.batch_size);
    tc.steps = per_epoch * config.epochs;
    let plan = batch_plan(train_set.len(), tc.batch_size, tc.steps, tc.seed);

    let init_train = evaluate(&model, train_set)?;
    let init_val = evaluate(&model, val_set)?;
    let mut epochs = vec![ByteSftEpoch {
        epoch: 0,
        train_byte_ce: init_train.byte_ce,
        train_token_ce: init_train.token_ce,
        val_byte_ce: init_val.byte_ce,
        val_token_ce: init_val.token_ce,
    }];
    let provider = NoTargets(train_set.to_vec());
    let (mut byte_sum, mut token_sum) = (0.0, 0.0);
    let model = optimize(model, &provider, &tc, &plan, |step, out, current| {
        byte_sum += out.loss.byte_ce;
        token_sum += out.loss.token_ce;
        if (step + 1) % per_epoch == 0 {
            let val = evaluate(current, val_set)?;
            epochs.push(ByteSftEpoch {
                epoch: (step + 1) / per_epoch,
                train_byte_ce: byte_sum / per_epoch as f64,
                train_token_ce: token_sum / per_epoch as f64,
                val_byte_ce: val.byte_ce,
                val_token_ce: val.token_ce,
            });
            byte_sum = 0.0;
            token_sum = 0.0;
        }
        Ok(())
    })?;
    Ok((model, epochs))
}
