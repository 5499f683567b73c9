//! Exact byte-level probabilities of a token-level model, obtained by
//! summing over every covering of a byte sequence. Exponential in the worst
//! case; used as a ground-truth oracle and for tiny inputs.

use crate::error::{BldError, Result};
use crate::model::LanguageModel;
use crate::prob::{log_sum_exp, ByteDistribution, BYTE_OUTCOMES, EOS_SLOT};
use crate::tokenizer::{TokenId, VocabTrie, Vocabulary};

pub const DEFAULT_COVERING_CAP: usize = 10_000;

/// A token sequence covering a byte string: all tokens but the last decode
/// to a strict prefix of it, and the last token runs to or past its end.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct CoveringElement {
    pub tokens: Vec<TokenId>,
    /// Bytes of the last token beyond the end of the covered string.
    pub overhang: Vec<u8>,
}

/// `log P(b)`, the probability that generation starts with `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefixProbability {
    pub log_p: f64,
}

impl PrefixProbability {
    pub fn prob(&self) -> f64 {
        self.log_p.exp()
    }
}

/// Every covering of `b` over `vocab`, independent of any model. Ordered by
/// overhang length, then token ids.
pub fn enumerate_coverings(
    vocab: &Vocabulary,
    b: &[u8],
    cap: usize,
) -> Result<Vec<CoveringElement>> {
    let mut out = Vec::new();
    if b.is_empty() {
        out.push(CoveringElement {
            tokens: Vec::new(),
            overhang: Vec::new(),
        });
        return Ok(out);
    }
    let mut stack = Vec::new();
    cover_from(vocab, b, 0, &mut stack, &mut out, cap)?;
    out.sort_by(|x, y| {
        x.overhang
            .len()
            .cmp(&y.overhang.len())
            .then_with(|| x.tokens.cmp(&y.tokens))
    });
    Ok(out)
}

fn cover_from(
    vocab: &Vocabulary,
    b: &[u8],
    pos: usize,
    stack: &mut Vec<TokenId>,
    out: &mut Vec<CoveringElement>,
    cap: usize,
) -> Result<()> {
    let trie = vocab.trie();
    let rest = &b[pos..];
    let mut node = VocabTrie::ROOT;
    for (depth, &byte) in rest.iter().enumerate() {
        let Some(next) = trie.child(node, byte) else {
            return Ok(());
        };
        node = next;
        if depth + 1 < rest.len() {
            if let Some(t) = trie.terminal(node) {
                stack.push(t);
                cover_from(vocab, b, pos + depth + 1, stack, out, cap)?;
                stack.pop();
            }
        }
    }
    for &t in trie.subtree(node) {
        if out.len() == cap {
            return Err(BldError::Feasibility { cap });
        }
        let bytes = vocab.bytes(t)?;
        let mut tokens = stack.clone();
        tokens.push(t);
        out.push(CoveringElement {
            tokens,
            overhang: bytes[rest.len()..].to_vec(),
        });
    }
    Ok(())
}

/// A covering together with its model log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCovering {
    pub covering: CoveringElement,
    pub log_weight: f64,
}

/// Exact marginalization over coverings for one model.
#[derive(Debug, Clone)]
pub struct ExactOracle<M> {
    model: M,
    cap: usize,
}

impl<M: LanguageModel> ExactOracle<M> {
    pub fn new(model: M) -> Self {
        Self {
            model,
            cap: DEFAULT_COVERING_CAP,
        }
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = cap;
        self
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    /// Coverings of `b` with non-zero probability under the model. The cap
    /// counts these rather than all vocabulary coverings.
    pub fn weighted_coverings(&self, b: &[u8]) -> Result<Vec<WeightedCovering>> {
        let mut out = Vec::new();
        if b.is_empty() {
            out.push(WeightedCovering {
                covering: CoveringElement {
                    tokens: Vec::new(),
                    overhang: Vec::new(),
                },
                log_weight: 0.0,
            });
            return Ok(out);
        }
        let mut stack = Vec::new();
        self.weighted_from(b, 0, &mut stack, 0.0, &mut out)?;
        out.sort_by(|x, y| {
            x.covering
                .overhang
                .len()
                .cmp(&y.covering.overhang.len())
                .then_with(|| x.covering.tokens.cmp(&y.covering.tokens))
        });
        Ok(out)
    }

    fn weighted_from(
        &self,
        b: &[u8],
        pos: usize,
        stack: &mut Vec<TokenId>,
        log_w: f64,
        out: &mut Vec<WeightedCovering>,
    ) -> Result<()> {
        let vocab = self.model.vocab();
        let trie = vocab.trie();
        let dist = self.model.next_token_dist(stack)?;
        let rest = &b[pos..];
        let mut node = VocabTrie::ROOT;
        for (depth, &byte) in rest.iter().enumerate() {
            let Some(next) = trie.child(node, byte) else {
                return Ok(());
            };
            node = next;
            if depth + 1 < rest.len() {
                if let Some(t) = trie.terminal(node) {
                    let p = dist.prob(t);
                    if p > 0.0 {
                        stack.push(t);
                        self.weighted_from(b, pos + depth + 1, stack, log_w + p.ln(), out)?;
                        stack.pop();
                    }
                }
            }
        }
        for &t in trie.subtree(node) {
            let p = dist.prob(t);
            if p <= 0.0 {
                continue;
            }
            if out.len() == self.cap {
                return Err(BldError::Feasibility { cap: self.cap });
            }
            let bytes = vocab.bytes(t)?;
            let mut tokens = stack.clone();
            tokens.push(t);
            out.push(WeightedCovering {
                covering: CoveringElement {
                    tokens,
                    overhang: bytes[rest.len()..].to_vec(),
                },
                log_weight: log_w + p.ln(),
            });
        }
        Ok(())
    }

    /// `log P(b)`; `-inf` when no covering has positive probability.
    pub fn prefix_prob(&self, b: &[u8]) -> Result<PrefixProbability> {
        let weights: Vec<f64> = self
            .weighted_coverings(b)?
            .iter()
            .map(|c| c.log_weight)
            .collect();
        Ok(PrefixProbability {
            log_p: log_sum_exp(&weights),
        })
    }

    /// `P(v | prefix)` for every byte `v`, plus the probability that
    /// generation stops exactly at the end of `prefix`.
    pub fn next_byte_dist(&self, prefix: &[u8]) -> Result<ByteDistribution> {
        let coverings = self.weighted_coverings(prefix)?;
        if coverings.is_empty() {
            return Err(BldError::Conditioning {
                prefix_len: prefix.len(),
            });
        }
        let trie = self.model.vocab().trie();
        let max = coverings
            .iter()
            .map(|c| c.log_weight)
            .fold(f64::NEG_INFINITY, f64::max);
        // Coverings ending on a token boundary continue with a fresh token.
        let boundary: Vec<&WeightedCovering> = coverings
            .iter()
            .filter(|c| c.covering.overhang.is_empty())
            .collect();
        let contexts: Vec<&[TokenId]> = boundary
            .iter()
            .map(|c| c.covering.tokens.as_slice())
            .collect();
        let dists = self.model.next_token_dists(&contexts)?;

        let mut mass = vec![0.0; BYTE_OUTCOMES];
        for c in &coverings {
            if let Some(&first) = c.covering.overhang.first() {
                mass[first as usize] += (c.log_weight - max).exp();
            }
        }
        for (c, dist) in boundary.iter().zip(&dists) {
            let share = (c.log_weight - max).exp();
            for &(byte, child) in trie.children(VocabTrie::ROOT) {
                let m: f64 = trie.subtree(child).iter().map(|&t| dist.prob(t)).sum();
                mass[byte as usize] += share * m;
            }
            mass[EOS_SLOT] += share * dist.prob(self.model.vocab().eos_id());
        }
        ByteDistribution::from_masses(mass).map_err(|_| BldError::Conditioning {
            prefix_len: prefix.len(),
        })
    }

    /// The conditional before each byte of `b`: `b.len()` distributions.
    pub fn byte_stream(&self, b: &[u8]) -> Result<Vec<ByteDistribution>> {
        (0..b.len()).map(|i| self.next_byte_dist(&b[..i])).collect()
    }
}

pub fn exact_prefix_prob<M: LanguageModel>(model: &M, b: &[u8]) -> Result<PrefixProbability> {
    ExactOracle::new(model).prefix_prob(b)
}

pub fn exact_next_byte_dist<M: LanguageModel>(
    model: &M,
    prefix: &[u8],
) -> Result<ByteDistribution> {
    ExactOracle::new(model).next_byte_dist(prefix)
}
