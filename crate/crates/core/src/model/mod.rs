//! Next-token language models: the abstract interface consumed by the
//! byte-probability code, a handful of toy teachers, and the trainable
//! student with its detachable byte head.

mod checkpoint;
mod student;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{BldError, Result};
use crate::tokenizer::{TokenId, Tokenizer, Vocabulary};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use student::{
    ByteSlots, GradientSet, OutputGrad, ParamSpec, SequenceLoss, StudentConfig, StudentLm,
    StudentModel, StudentOutputs, BYTE_SLOT_BOS, BYTE_SLOT_EOS, BYTE_SLOT_OOV, BYTE_SLOT_PAD,
};

/// Probability of every token id of a vocabulary, end-of-sequence last.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    /// Normalizes non-negative weights.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() || weights.iter().any(|w| *w < 0.0) {
            return Err(BldError::NotNormalized { sum: total });
        }
        for w in &mut weights {
            *w /= total;
        }
        Ok(Self { probs: weights })
    }

    /// Softmax of logits.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self {
            probs: exps.into_iter().map(|e| e / total).collect(),
        }
    }

    pub fn point_mass(len: usize, id: TokenId) -> Self {
        let mut probs = vec![0.0; len];
        probs[id as usize] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.probs[id as usize]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// A next-token model over a fixed vocabulary. Must be a pure function of
/// the prefix.
pub trait LanguageModel: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    fn next_token_dist(&self, prefix: &[TokenId]) -> Result<TokenDistribution>;

    /// Batched query; the default evaluates prefixes one by one.
    fn next_token_dists(&self, prefixes: &[&[TokenId]]) -> Result<Vec<TokenDistribution>> {
        prefixes.iter().map(|p| self.next_token_dist(p)).collect()
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn next_token_dist(&self, prefix: &[TokenId]) -> Result<TokenDistribution> {
        (**self).next_token_dist(prefix)
    }
    fn next_token_dists(&self, prefixes: &[&[TokenId]]) -> Result<Vec<TokenDistribution>> {
        (**self).next_token_dists(prefixes)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for Arc<M> {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn next_token_dist(&self, prefix: &[TokenId]) -> Result<TokenDistribution> {
        (**self).next_token_dist(prefix)
    }
    fn next_token_dists(&self, prefixes: &[&[TokenId]]) -> Result<Vec<TokenDistribution>> {
        (**self).next_token_dists(prefixes)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for Box<M> {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn next_token_dist(&self, prefix: &[TokenId]) -> Result<TokenDistribution> {
        (**self).next_token_dist(prefix)
    }
    fn next_token_dists(&self, prefixes: &[&[TokenId]]) -> Result<Vec<TokenDistribution>> {
        (**self).next_token_dists(prefixes)
    }
}

fn check_prefix(vocab: &Vocabulary, prefix: &[TokenId]) -> Result<()> {
    prefix.iter().try_for_each(|&t| vocab.check_id(t))
}

/// Context-free model: uniform over a support set of content tokens, with a
/// fixed end-of-sequence probability.
#[derive(Debug, Clone)]
pub struct UniformLm {
    vocab: Arc<Vocabulary>,
    dist: TokenDistribution,
}

impl UniformLm {
    pub fn over(vocab: Arc<Vocabulary>, support: &[TokenId], eos_prob: f64) -> Result<Self> {
        if support.is_empty() && eos_prob < 1.0 {
            return Err(BldError::Config("uniform support is empty".into()));
        }
        if !(0.0..=1.0).contains(&eos_prob) {
            return Err(BldError::Config(format!(
                "eos probability {eos_prob} out of range"
            )));
        }
        let mut probs = vec![0.0; vocab.len()];
        for &t in support {
            if vocab.is_eos(t) {
                return Err(BldError::Config("support must list content tokens".into()));
            }
            vocab.check_id(t)?;
            probs[t as usize] = (1.0 - eos_prob) / support.len() as f64;
        }
        probs[vocab.eos_id() as usize] = eos_prob;
        Ok(Self {
            vocab,
            dist: TokenDistribution { probs },
        })
    }

    /// Uniform over every content token.
    pub fn full(vocab: Arc<Vocabulary>, eos_prob: f64) -> Result<Self> {
        let support: Vec<TokenId> = (0..vocab.num_content() as TokenId).collect();
        Self::over(vocab, &support, eos_prob)
    }
}

impl LanguageModel for UniformLm {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_token_dist(&self, prefix: &[TokenId]) -> Result<TokenDistribution> {
        check_prefix(&self.vocab, prefix)?;
        Ok(self.dist.clone())
    }
}

/// Bigram model from a dense count table with additive smoothing. The
/// end-of-sequence id doubles as the start-of-sequence context.
#[derive(Debug, Clone)]
pub struct BigramLm {
    vocab: Arc<Vocabulary>,
    counts: Vec<f64>,
    alpha: f64,
}

impl BigramLm {
    /// `counts[prev * V + next]` with `V = vocab.len()`.
    pub fn from_counts(vocab: Arc<Vocabulary>, counts: Vec<f64>, alpha: f64) -> Result<Self> {
        let v = vocab.len();
        if counts.len() != v * v {
            return Err(BldError::Shape(format!(
                "bigram table needs {} entries, got {}",
                v * v,
                counts.len()
            )));
        }
        if alpha < 0.0 || counts.iter().any(|c| *c < 0.0 || !c.is_finite()) {
            return Err(BldError::Config(
                "bigram counts and alpha must be non-negative".into(),
            ));
        }
        Ok(Self {
            vocab,
            counts,
            alpha,
        })
    }

    /// Counts transitions over the tokenized corpus, bracketing each sample
    /// with end-of-sequence.
    pub fn train(tokenizer: &Tokenizer, corpus: &[Vec<u8>], alpha: f64) -> Result<Self> {
        let vocab = Arc::new(tokenizer.vocab().clone());
        let v = vocab.len();
        let eos = vocab.eos_id() as usize;
        let mut counts = vec![0.0; v * v];
        for sample in corpus {
            let mut prev = eos;
            for t in tokenizer.tokenize(sample) {
                counts[prev * v + t as usize] += 1.0;
                prev = t as usize;
            }
            counts[prev * v + eos] += 1.0;
        }
        Self::from_counts(vocab, counts, alpha)
    }
}

impl LanguageModel for BigramLm {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_token_dist(&self, prefix: &[TokenId]) -> Result<TokenDistribution> {
        check_prefix(&self.vocab, prefix)?;
        let v = self.vocab.len();
        let ctx = prefix.last().copied().unwrap_or(self.vocab.eos_id()) as usize;
        let row = &self.counts[ctx * v..(ctx + 1) * v];
        let total: f64 = row.iter().sum::<f64>() + self.alpha * v as f64;
        if total <= 0.0 {
            return Ok(TokenDistribution {
                probs: vec![1.0 / v as f64; v],
            });
        }
        Ok(TokenDistribution {
            probs: row.iter().map(|c| (c + self.alpha) / total).collect(),
        })
    }
}

/// Seeded pseudo-random model whose distribution depends on the entire
/// prefix. Mass is spread over `support` (content tokens) with log-normal
/// weights; end-of-sequence receives `eos_scale` times a log-normal weight.
#[derive(Debug, Clone)]
pub struct RandomLm {
    vocab: Arc<Vocabulary>,
    support: Vec<TokenId>,
    seed: u64,
    sigma: f64,
    eos_scale: f64,
}

impl RandomLm {
    pub fn new(vocab: Arc<Vocabulary>, support: Vec<TokenId>, seed: u64) -> Result<Self> {
        if support.is_empty() {
            return Err(BldError::Config("random model support is empty".into()));
        }
        for &t in &support {
            vocab.check_id(t)?;
            if vocab.is_eos(t) {
                return Err(BldError::Config("support must list content tokens".into()));
            }
        }
        Ok(Self {
            vocab,
            support,
            seed,
            sigma: 1.5,
            eos_scale: 0.05,
        })
    }

    /// Full-support model over every content token.
    pub fn full(vocab: Arc<Vocabulary>, seed: u64) -> Result<Self> {
        let support = (0..vocab.num_content() as TokenId).collect();
        Self::new(vocab, support, seed)
    }

    pub fn with_eos_scale(mut self, eos_scale: f64) -> Self {
        self.eos_scale = eos_scale;
        self
    }

    pub fn support(&self) -> &[TokenId] {
        &self.support
    }

    fn context_seed(&self, prefix: &[TokenId]) -> u64 {
        let mut h = splitmix64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        h = splitmix64(h ^ prefix.len() as u64);
        for &t in prefix {
            h = splitmix64(h ^ t as u64);
        }
        h
    }
}

/// SplitMix64 finalizer; a stable, platform-independent mixing function.
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl LanguageModel for RandomLm {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_token_dist(&self, prefix: &[TokenId]) -> Result<TokenDistribution> {
        check_prefix(&self.vocab, prefix)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.context_seed(prefix));
        let normal = Normal::new(0.0, self.sigma).expect("sigma > 0");
        let mut weights = vec![0.0; self.vocab.len()];
        for &t in &self.support {
            weights[t as usize] = normal.sample(&mut rng).exp();
        }
        weights[self.vocab.eos_id() as usize] = self.eos_scale * normal.sample(&mut rng).exp();
        TokenDistribution::from_weights(weights)
    }
}

/// Emits a fixed token script with probability one, then end-of-sequence.
/// Any prefix that leaves the script also ends the sequence.
#[derive(Debug, Clone)]
pub struct ScriptedLm {
    vocab: Arc<Vocabulary>,
    script: Vec<TokenId>,
}

impl ScriptedLm {
    pub fn new(vocab: Arc<Vocabulary>, script: Vec<TokenId>) -> Result<Self> {
        check_prefix(&vocab, &script)?;
        Ok(Self { vocab, script })
    }
}

impl LanguageModel for ScriptedLm {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_token_dist(&self, prefix: &[TokenId]) -> Result<TokenDistribution> {
        check_prefix(&self.vocab, prefix)?;
        let on_script = prefix.len() < self.script.len() && self.script.starts_with(prefix);
        let next = if on_script {
            self.script[prefix.len()]
        } else {
            self.vocab.eos_id()
        };
        Ok(TokenDistribution::point_mass(self.vocab.len(), next))
    }
}

/// Ancestral sampling of a token sequence (without the final
/// end-of-sequence) of at most `max_tokens` tokens.
pub fn sample_tokens<M: LanguageModel + ?Sized>(
    model: &M,
    max_tokens: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TokenId>> {
    let mut out = Vec::new();
    while out.len() < max_tokens {
        let dist = model.next_token_dist(&out)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = dist.len() - 1;
        for (i, p) in dist.probs().iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        if model.vocab().is_eos(pick as TokenId) {
            break;
        }
        out.push(pick as TokenId);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::MergeRules;

    fn toy_vocab() -> Arc<Vocabulary> {
        Arc::new(
            Vocabulary::build(
                &[b"a".to_vec(), b"b".to_vec(), b"ab".to_vec()],
                &MergeRules::new(vec![(b"a".to_vec(), b"b".to_vec())]),
            )
            .unwrap(),
        )
    }

    #[test]
    fn uniform_over_three_tokens() {
        let lm = UniformLm::over(toy_vocab(), &[0, 1, 2], 0.0).unwrap();
        let d = lm.next_token_dist(&[2, 0]).unwrap();
        for t in 0..3 {
            assert!((d.prob(t) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(d.prob(lm.vocab().eos_id()), 0.0);
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bigram_renormalizes_its_count_row() {
        let vocab = toy_vocab();
        let v = vocab.len();
        let eos = vocab.eos_id() as usize;
        let mut counts = vec![0.0; v * v];
        // after "a": a x1, ab x3; from start: b x2
        counts[0] = 1.0;
        counts[2] = 3.0;
        counts[eos * v + 1] = 2.0;
        let lm = BigramLm::from_counts(vocab.clone(), counts, 0.0).unwrap();
        let d = lm.next_token_dist(&[1, 0]).unwrap();
        assert_eq!(d.prob(0), 0.25);
        assert_eq!(d.prob(2), 0.75);
        let d0 = lm.next_token_dist(&[]).unwrap();
        assert_eq!(d0.prob(1), 1.0);
    }

    #[test]
    fn invalid_prefix_is_a_lookup_error() {
        let lm = UniformLm::full(toy_vocab(), 0.1).unwrap();
        let bad = lm.vocab().len() as TokenId;
        assert!(matches!(
            lm.next_token_dist(&[bad]),
            Err(BldError::UnknownToken(_))
        ));
    }

    #[test]
    fn random_lm_is_a_pure_normalized_function_of_the_prefix() {
        let lm = RandomLm::full(toy_vocab(), 7).unwrap();
        let a = lm.next_token_dist(&[0, 2]).unwrap();
        let b = lm.next_token_dist(&[0, 2]).unwrap();
        let c = lm.next_token_dist(&[2, 0]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!((a.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scripted_lm_follows_script_then_stops() {
        let vocab = toy_vocab();
        let lm = ScriptedLm::new(vocab.clone(), vec![2]).unwrap();
        assert_eq!(lm.next_token_dist(&[]).unwrap().prob(2), 1.0);
        assert_eq!(lm.next_token_dist(&[2]).unwrap().prob(vocab.eos_id()), 1.0);
        assert_eq!(lm.next_token_dist(&[0]).unwrap().prob(vocab.eos_id()), 1.0);
    }
}
