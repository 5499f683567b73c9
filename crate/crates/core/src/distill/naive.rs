//! Naive cross-tokenizer reconstruction: the probability of each student
//! token is the product of teacher byte conditionals along its bytes. One
//! trie walk costs a conditional per trie node, which is what makes the
//! approach impractical for large student vocabularies.

use std::collections::HashMap;

use crate::beam::{BeamLattice, BeamParams};
use crate::error::{BldError, Result};
use crate::exact::ExactOracle;
use crate::model::LanguageModel;
use crate::prob::ByteDistribution;
use crate::tokenizer::{NodeId, TokenId, VocabTrie, Vocabulary};

/// Source of teacher next-byte distributions given all preceding bytes.
pub trait ByteConditionals {
    fn next_byte(&self, context: &[u8]) -> Result<ByteDistribution>;
}

pub struct ExactConditionals<M>(pub ExactOracle<M>);

impl<M: LanguageModel> ByteConditionals for ExactConditionals<M> {
    fn next_byte(&self, context: &[u8]) -> Result<ByteDistribution> {
        self.0.next_byte_dist(context)
    }
}

pub struct BeamConditionals<M> {
    pub model: M,
    pub params: BeamParams,
}

impl<M: LanguageModel> ByteConditionals for BeamConditionals<M> {
    fn next_byte(&self, context: &[u8]) -> Result<ByteDistribution> {
        let mut lattice = BeamLattice::new(&self.model, self.params)?;
        for &b in context {
            lattice.advance(b)?;
        }
        lattice.next_byte_dist()
    }
}

/// Precomputed conditionals keyed by the full byte context.
#[derive(Debug, Clone, Default)]
pub struct TableConditionals {
    table: HashMap<Vec<u8>, ByteDistribution>,
}

impl TableConditionals {
    pub fn insert(&mut self, context: Vec<u8>, dist: ByteDistribution) {
        self.table.insert(context, dist);
    }
}

impl ByteConditionals for TableConditionals {
    fn next_byte(&self, context: &[u8]) -> Result<ByteDistribution> {
        self.table
            .get(context)
            .cloned()
            .ok_or(BldError::MissingConditional {
                context_len: context.len(),
            })
    }
}

/// Reconstructed probability of every student token, end-of-sequence last.
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveCtd {
    pub probs: Vec<f64>,
    /// Total of `probs`; above one whenever student tokens share prefixes.
    pub sum: f64,
    /// Conditionals requested during the walk.
    pub queries: usize,
}

pub fn naive_ctd_token_probs<C: ByteConditionals + ?Sized>(
    cond: &C,
    student_vocab: &Vocabulary,
    token_prefix: &[TokenId],
) -> Result<NaiveCtd> {
    let context = student_vocab.decode(token_prefix)?;
    let trie = student_vocab.trie();
    let mut probs = vec![0.0; student_vocab.len()];
    let mut queries = 0;
    let mut stack: Vec<(NodeId, Vec<u8>, f64)> = vec![(VocabTrie::ROOT, Vec::new(), 1.0)];
    while let Some((node, bytes, p)) = stack.pop() {
        if trie.children(node).is_empty() {
            continue;
        }
        let mut full = context.clone();
        full.extend_from_slice(&bytes);
        let dist = cond.next_byte(&full)?;
        queries += 1;
        if node == VocabTrie::ROOT {
            probs[student_vocab.eos_id() as usize] = dist.eos();
        }
        for &(b, child) in trie.children(node) {
            let pc = p * dist.byte(b);
            if let Some(t) = trie.terminal(child) {
                probs[t as usize] = pc;
            }
            if pc > 0.0 {
                let mut next = bytes.clone();
                next.push(b);
                stack.push((child, next, pc));
            }
        }
    }
    let sum = probs.iter().sum();
    Ok(NaiveCtd {
        probs,
        sum,
        queries,
    })
}
