//! A seeded toy language for desk-scale experiments: a lexicon of
//! pronounceable words with Zipfian frequencies and sticky word-to-word
//! transitions, plus two differently built merge vocabularies over it.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{BldError, Result};
use crate::tokenizer::{MergeRules, Tokenizer};

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "t"];

/// Successors per word that are preferred over the unigram draw.
const SUCCESSORS: usize = 6;
const STICKINESS: f64 = 0.7;

#[derive(Debug, Clone)]
pub struct SyntheticLanguage {
    /// Most frequent first.
    words: Vec<Vec<u8>>,
    cumulative: Vec<f64>,
    successors: Vec<Vec<usize>>,
    min_words: usize,
    max_words: usize,
}

impl SyntheticLanguage {
    pub fn new(n_words: usize, seed: u64) -> Result<Self> {
        if n_words < 2 {
            return Err(BldError::Config(
                "the lexicon needs at least two words".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::new();
        let mut words = Vec::with_capacity(n_words);
        let mut attempts = 0usize;
        while words.len() < n_words {
            attempts += 1;
            if attempts > n_words * 1000 {
                return Err(BldError::Config(format!(
                    "could not draw {n_words} distinct words"
                )));
            }
            let syllables = 1 + rng.random_range(0..3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
                w.push_str(NUCLEI[rng.random_range(0..NUCLEI.len())]);
                w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
            }
            if seen.insert(w.clone()) {
                words.push(w.into_bytes());
            }
        }
        // Shorter words are more frequent, as in natural text.
        words.sort_by_key(|w| w.len());
        let mut cumulative = Vec::with_capacity(n_words);
        let mut acc = 0.0;
        for r in 0..n_words {
            acc += 1.0 / (r + 1) as f64;
            cumulative.push(acc);
        }
        let total = acc;
        for c in &mut cumulative {
            *c /= total;
        }
        let mut lang = Self {
            words,
            cumulative,
            successors: Vec::new(),
            min_words: 3,
            max_words: 8,
        };
        lang.successors = (0..n_words)
            .map(|_| (0..SUCCESSORS).map(|_| lang.zipf(&mut rng)).collect())
            .collect();
        Ok(lang)
    }

    /// Sets the inclusive range of words per sentence.
    pub fn with_sentence_words(mut self, min: usize, max: usize) -> Self {
        self.min_words = min.max(1);
        self.max_words = max.max(self.min_words);
        self
    }

    pub fn words(&self) -> &[Vec<u8>] {
        &self.words
    }

    fn zipf(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        self.cumulative
            .partition_point(|&c| c < u)
            .min(self.words.len() - 1)
    }

    /// One space-separated sentence.
    pub fn sentence(&self, rng: &mut impl Rng) -> Vec<u8> {
        let n = rng.random_range(self.min_words..=self.max_words);
        let mut out = Vec::new();
        let mut w = self.zipf(rng);
        for i in 0..n {
            if i > 0 {
                out.push(b' ');
                w = if rng.random::<f64>() < STICKINESS {
                    self.successors[w][rng.random_range(0..SUCCESSORS)]
                } else {
                    self.zipf(rng)
                };
            }
            out.extend_from_slice(&self.words[w]);
        }
        out
    }

    pub fn corpus(&self, n: usize, seed: u64) -> Vec<Vec<u8>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sentence(&mut rng)).collect()
    }

    /// Merges that build frequent words left to right ("k"+"a", "ka"+"l",
    /// ...), stopping once `n_tokens` new tokens exist.
    pub fn prefix_chain_merges(&self, n_tokens: usize) -> MergeRules {
        self.chain_merges(n_tokens, |w, i| {
            let cut = i + 1;
            (w[..cut].to_vec(), w[cut..cut + 1].to_vec())
        })
    }

    /// Merges that build frequent words right to left ("l"+"o", "a"+"lo",
    /// ...), giving segmentations that disagree with the prefix chains.
    pub fn suffix_chain_merges(&self, n_tokens: usize) -> MergeRules {
        self.chain_merges(n_tokens, |w, i| {
            let cut = w.len() - 2 - i;
            (w[cut..cut + 1].to_vec(), w[cut + 1..].to_vec())
        })
    }

    /// `step(word, i)` gives the operands of the `i`-th merge of a word's
    /// chain (`i < len - 1`); its right-hand or left-hand operand must be
    /// the previous merge's result.
    fn chain_merges(
        &self,
        n_tokens: usize,
        step: impl Fn(&[u8], usize) -> (Vec<u8>, Vec<u8>),
    ) -> MergeRules {
        let mut have: HashSet<Vec<u8>> = HashSet::new();
        let mut pairs = Vec::new();
        'words: for w in &self.words {
            for i in 0..w.len().saturating_sub(1) {
                if have.len() >= n_tokens {
                    break 'words;
                }
                let (l, r) = step(w, i);
                let merged = [l.as_slice(), r.as_slice()].concat();
                if merged.len() < 2 || !have.insert(merged) {
                    continue;
                }
                pairs.push((l, r));
            }
        }
        MergeRules::new(pairs)
    }

    /// Teacher-side tokenizer: bytes plus `n_tokens` prefix-chain merges.
    pub fn teacher_tokenizer(&self, n_tokens: usize) -> Result<Tokenizer> {
        Tokenizer::from_merges(self.prefix_chain_merges(n_tokens))
    }

    /// Student-side tokenizer: bytes plus `n_tokens` suffix-chain merges.
    pub fn student_tokenizer(&self, n_tokens: usize) -> Result<Tokenizer> {
        Tokenizer::from_merges(self.suffix_chain_merges(n_tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_language() {
        let a = SyntheticLanguage::new(50, 3).unwrap();
        let b = SyntheticLanguage::new(50, 3).unwrap();
        assert_eq!(a.words(), b.words());
        assert_eq!(a.corpus(5, 1), b.corpus(5, 1));
        assert_ne!(a.corpus(5, 1), a.corpus(5, 2));
    }

    #[test]
    fn merge_vocabularies_have_requested_sizes_and_differ() {
        let lang = SyntheticLanguage::new(300, 0).unwrap();
        let a = lang.teacher_tokenizer(200).unwrap();
        let b = lang.student_tokenizer(150).unwrap();
        assert_eq!(a.vocab().num_content(), 256 + 200);
        assert_eq!(b.vocab().num_content(), 256 + 150);
        let s = &lang.corpus(1, 9)[0];
        assert_eq!(a.decode(&a.tokenize(s)).unwrap(), *s);
        assert_eq!(b.decode(&b.tokenize(s)).unwrap(), *s);
        assert!(a.tokenize(s).len() < s.len());
    }
}
