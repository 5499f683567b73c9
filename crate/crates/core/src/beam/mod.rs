//! Pruned lattice of partial tokenizations. Each hypothesis is a sequence
//! of completed tokens plus the bytes consumed so far into an in-flight
//! token; next-byte probabilities marginalize over the surviving
//! hypotheses.

mod sweep;

use std::cmp::Ordering;
use std::sync::Arc;

use crate::error::{BldError, Result};
use crate::model::{LanguageModel, TokenDistribution};
use crate::prob::{ByteDistribution, LogByteDistribution, BYTE_OUTCOMES, EOS_SLOT};
use crate::tokenizer::{NodeId, TokenId, VocabTrie};

pub use crate::prob::jsd;
pub use sweep::{sweep, SweepConfig, SweepRecord, SweepReport};

pub const DEFAULT_QUERY_BATCH: usize = 256;

/// Beam width `k` (use `usize::MAX` for no limit), relative pruning
/// threshold `epsilon`, and the number of token-distribution queries sent
/// to the model at once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamParams {
    pub k: usize,
    pub epsilon: f64,
    pub batch_size: usize,
}

impl BeamParams {
    pub fn new(k: usize, epsilon: f64) -> Result<Self> {
        let p = Self {
            k,
            epsilon,
            batch_size: DEFAULT_QUERY_BATCH,
        };
        p.validate()?;
        Ok(p)
    }

    /// No pruning at all: the lattice is exact.
    pub fn unbounded() -> Self {
        Self {
            k: usize::MAX,
            epsilon: 0.0,
            batch_size: DEFAULT_QUERY_BATCH,
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(BldError::Config("beam width K must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(BldError::Config(format!(
                "pruning threshold epsilon must lie in [0, 1), got {}",
                self.epsilon
            )));
        }
        if self.batch_size == 0 {
            return Err(BldError::Config("query batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One tokenization path of the consumed bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    completed: Vec<TokenId>,
    partial: Vec<u8>,
    node: NodeId,
    /// `log P(completed)`.
    log_context: f64,
    /// Mass of every covering represented by this path.
    log_weight: f64,
    /// Set once the full-token variant of `partial` has been split off.
    split: bool,
    /// `P(. | completed)`; absent only while a fresh boundary waits for its
    /// batched query.
    context: Option<Arc<TokenDistribution>>,
}

impl Hypothesis {
    pub fn completed_tokens(&self) -> &[TokenId] {
        &self.completed
    }

    pub fn partial(&self) -> &[u8] {
        &self.partial
    }

    pub fn trie_node(&self) -> NodeId {
        self.node
    }

    pub fn log_weight(&self) -> f64 {
        self.log_weight
    }

    pub fn weight(&self) -> f64 {
        self.log_weight.exp()
    }

    fn is_boundary(&self) -> bool {
        self.partial.is_empty()
    }

    fn rank(&self, other: &Self) -> Ordering {
        other
            .log_weight
            .total_cmp(&self.log_weight)
            .then_with(|| self.completed.cmp(&other.completed))
            .then_with(|| self.partial.cmp(&other.partial))
    }
}

fn subtree_mass(dist: &TokenDistribution, tokens: &[TokenId]) -> f64 {
    tokens.iter().map(|&t| dist.prob(t)).sum()
}

/// Pruned set of hypotheses over a growing byte prefix.
pub struct BeamLattice<'m, M: LanguageModel + ?Sized> {
    model: &'m M,
    params: BeamParams,
    hyps: Vec<Hypothesis>,
    consumed: Vec<u8>,
    leaked: Vec<f64>,
    max_alive: usize,
    queries: usize,
}

impl<M: LanguageModel + ?Sized> Clone for BeamLattice<'_, M> {
    fn clone(&self) -> Self {
        Self {
            model: self.model,
            params: self.params,
            hyps: self.hyps.clone(),
            consumed: self.consumed.clone(),
            leaked: self.leaked.clone(),
            max_alive: self.max_alive,
            queries: self.queries,
        }
    }
}

impl<M: LanguageModel + ?Sized> PartialEq for BeamLattice<'_, M> {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params && self.hyps == other.hyps && self.consumed == other.consumed
    }
}

impl<M: LanguageModel + ?Sized> std::fmt::Debug for BeamLattice<'_, M> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BeamLattice")
            .field("params", &self.params)
            .field("consumed", &self.consumed)
            .field("hypotheses", &self.hyps.len())
            .finish()
    }
}

impl<'m, M: LanguageModel + ?Sized> BeamLattice<'m, M> {
    /// Lattice over the empty prefix: a single empty path of weight one.
    pub fn new(model: &'m M, params: BeamParams) -> Result<Self> {
        params.validate()?;
        let mut lattice = Self {
            model,
            params,
            hyps: vec![Hypothesis {
                completed: Vec::new(),
                partial: Vec::new(),
                node: VocabTrie::ROOT,
                log_context: 0.0,
                log_weight: 0.0,
                split: true,
                context: None,
            }],
            consumed: Vec::new(),
            leaked: Vec::new(),
            max_alive: 1,
            queries: 0,
        };
        let mut hyps = std::mem::take(&mut lattice.hyps);
        lattice.queries += fetch_contexts(model, params.batch_size, &mut hyps)?;
        lattice.hyps = hyps;
        Ok(lattice)
    }

    pub fn params(&self) -> BeamParams {
        self.params
    }

    pub fn hypotheses(&self) -> &[Hypothesis] {
        &self.hyps
    }

    pub fn consumed(&self) -> &[u8] {
        &self.consumed
    }

    /// Fraction of lattice mass removed by each pruning step so far.
    pub fn leaked_mass(&self) -> &[f64] {
        &self.leaked
    }

    /// Largest number of hypotheses alive before any pruning step.
    pub fn max_alive(&self) -> usize {
        self.max_alive
    }

    /// Token-distribution queries issued so far.
    pub fn queries(&self) -> usize {
        self.queries
    }

    /// `log` of the total mass held by the surviving hypotheses.
    pub fn log_mass(&self) -> f64 {
        let w: Vec<f64> = self.hyps.iter().map(|h| h.log_weight).collect();
        crate::prob::log_sum_exp(&w)
    }

    /// Next-byte distribution marginalized over the surviving hypotheses.
    pub fn next_byte_dist(&self) -> Result<ByteDistribution> {
        let trie = self.model.vocab().trie();
        let eos = self.model.vocab().eos_id();
        let max = self
            .hyps
            .iter()
            .map(|h| h.log_weight)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(BldError::DegenerateLattice {
                consumed: self.consumed.len(),
            });
        }
        let mut acc = vec![0.0; BYTE_OUTCOMES];
        let mut masses: Vec<(u8, f64)> = Vec::new();
        for h in &self.hyps {
            let share = (h.log_weight - max).exp();
            let ctx = h.context.as_ref().expect("contexts are fetched eagerly");
            masses.clear();
            let mut denom = 0.0;
            for &(byte, child) in trie.children(h.node) {
                let m = subtree_mass(ctx, trie.subtree(child));
                denom += m;
                masses.push((byte, m));
            }
            let stop = if h.is_boundary() { ctx.prob(eos) } else { 0.0 };
            denom += stop;
            if denom <= 0.0 {
                continue;
            }
            for &(byte, m) in &masses {
                acc[byte as usize] += share * m / denom;
            }
            acc[EOS_SLOT] += share * stop / denom;
        }
        ByteDistribution::from_masses(acc).map_err(|_| BldError::DegenerateLattice {
            consumed: self.consumed.len(),
        })
    }

    /// Log next-byte distribution. Does not modify the lattice.
    pub fn logp_next(&self) -> Result<LogByteDistribution> {
        Ok(self.next_byte_dist()?.to_log())
    }

    /// Consumes one byte: every path is continued by `byte`, full tokens are
    /// split off as new boundaries, the result is pruned, and boundary
    /// contexts are queried. On error the lattice is unchanged.
    pub fn advance(&mut self, byte: u8) -> Result<()> {
        let trie = self.model.vocab().trie();
        let mut next = Vec::with_capacity(self.hyps.len() * 2);
        for h in &self.hyps {
            let Some(child) = trie.child(h.node, byte) else {
                continue;
            };
            let ctx = h.context.as_ref().expect("contexts are fetched eagerly");
            let mass = subtree_mass(ctx, trie.subtree(child));
            if mass <= 0.0 {
                continue;
            }
            let mut partial = h.partial.clone();
            partial.push(byte);
            next.push(Hypothesis {
                completed: h.completed.clone(),
                partial,
                node: child,
                log_context: h.log_context,
                log_weight: h.log_context + mass.ln(),
                split: false,
                context: Some(ctx.clone()),
            });
        }
        if next.is_empty() {
            return Err(BldError::Advance {
                byte,
                position: self.consumed.len(),
            });
        }
        extend_boundaries(self.model, &mut next);
        self.max_alive = self.max_alive.max(next.len());
        let before = lse(&next);
        prune_hypotheses(&mut next, self.params);
        let after = lse(&next);
        self.queries += fetch_contexts(self.model, self.params.batch_size, &mut next)?;
        self.leaked.push(1.0 - (after - before).exp());
        self.hyps = next;
        self.consumed.push(byte);
        Ok(())
    }

    /// Splits every in-flight path whose bytes form a complete token into
    /// the finished-token path and the proper-extension path. Idempotent.
    pub fn extend_token_boundaries(&mut self) -> Result<()> {
        extend_boundaries(self.model, &mut self.hyps);
        self.queries += fetch_contexts(self.model, self.params.batch_size, &mut self.hyps)?;
        sort_hypotheses(&mut self.hyps);
        Ok(())
    }

    /// Applies the threshold and width limits to the current hypotheses.
    pub fn prune(&mut self) {
        prune_hypotheses(&mut self.hyps, self.params);
    }
}

fn lse(hyps: &[Hypothesis]) -> f64 {
    let w: Vec<f64> = hyps.iter().map(|h| h.log_weight).collect();
    crate::prob::log_sum_exp(&w)
}

fn extend_boundaries<M: LanguageModel + ?Sized>(model: &M, hyps: &mut Vec<Hypothesis>) {
    let trie = model.vocab().trie();
    let mut spawned = Vec::new();
    for h in hyps.iter_mut() {
        if h.split || h.is_boundary() {
            continue;
        }
        h.split = true;
        let Some(t) = trie.terminal(h.node) else {
            continue;
        };
        let ctx = h
            .context
            .as_ref()
            .expect("in-flight paths carry their context");
        let p = ctx.prob(t);
        if p > 0.0 {
            let mut completed = h.completed.clone();
            completed.push(t);
            let lw = h.log_context + p.ln();
            spawned.push(Hypothesis {
                completed,
                partial: Vec::new(),
                node: VocabTrie::ROOT,
                log_context: lw,
                log_weight: lw,
                split: true,
                context: None,
            });
        }
        let rest = subtree_mass(ctx, trie.proper_extensions(h.node));
        h.log_weight = if rest > 0.0 {
            h.log_context + rest.ln()
        } else {
            f64::NEG_INFINITY
        };
    }
    hyps.retain(|h| h.log_weight > f64::NEG_INFINITY);
    hyps.extend(spawned);
}

fn sort_hypotheses(hyps: &mut [Hypothesis]) {
    hyps.sort_by(|a, b| a.rank(b));
}

/// Drops paths below `max * epsilon`, then keeps the best `k`. Ties are
/// broken by completed tokens, then partial bytes, so the result is
/// deterministic. The heaviest path always survives.
fn prune_hypotheses(hyps: &mut Vec<Hypothesis>, params: BeamParams) {
    hyps.retain(|h| h.log_weight > f64::NEG_INFINITY);
    if params.epsilon > 0.0 {
        let max = hyps
            .iter()
            .map(|h| h.log_weight)
            .fold(f64::NEG_INFINITY, f64::max);
        let floor = max + params.epsilon.ln();
        hyps.retain(|h| h.log_weight >= floor);
    }
    sort_hypotheses(hyps);
    hyps.truncate(params.k);
}

fn fetch_contexts<M: LanguageModel + ?Sized>(
    model: &M,
    batch_size: usize,
    hyps: &mut [Hypothesis],
) -> Result<usize> {
    let pending: Vec<usize> = (0..hyps.len())
        .filter(|&i| hyps[i].context.is_none())
        .collect();
    for chunk in pending.chunks(batch_size) {
        let prefixes: Vec<&[TokenId]> = chunk
            .iter()
            .map(|&i| hyps[i].completed.as_slice())
            .collect();
        let dists = model.next_token_dists(&prefixes)?;
        for (&i, d) in chunk.iter().zip(dists) {
            hyps[i].context = Some(Arc::new(d));
        }
    }
    Ok(pending.len())
}

/// Per-position outputs of one lattice pass over a byte string.
#[derive(Debug, Clone)]
pub struct ByteStream {
    /// Distribution of byte `i` given bytes `< i`, for every position.
    pub dists: Vec<ByteDistribution>,
    pub leaked: Vec<f64>,
    pub max_alive: usize,
    pub queries: usize,
}

/// Runs a fresh lattice over `bytes`, recording the conditional before each
/// byte.
pub fn byte_stream<M: LanguageModel + ?Sized>(
    model: &M,
    bytes: &[u8],
    params: BeamParams,
) -> Result<ByteStream> {
    let mut lattice = BeamLattice::new(model, params)?;
    let mut dists = Vec::with_capacity(bytes.len());
    for (i, &b) in bytes.iter().enumerate() {
        dists.push(lattice.next_byte_dist()?);
        if i + 1 < bytes.len() {
            lattice.advance(b)?;
        }
    }
    Ok(ByteStream {
        dists,
        leaked: lattice.leaked.clone(),
        max_alive: lattice.max_alive,
        queries: lattice.queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ScriptedLm, UniformLm};
    use crate::tokenizer::{MergeRules, Vocabulary};

    fn toy() -> UniformLm {
        let vocab = Arc::new(
            Vocabulary::build(
                &[b"a".to_vec(), b"b".to_vec(), b"ab".to_vec()],
                &MergeRules::new(vec![(b"a".to_vec(), b"b".to_vec())]),
            )
            .unwrap(),
        );
        UniformLm::over(vocab, &[0, 1, 2], 0.0).unwrap()
    }

    #[test]
    fn init_is_single_unit_hypothesis() {
        let lm = toy();
        let lat = BeamLattice::new(&lm, BeamParams::new(10, 0.01).unwrap()).unwrap();
        assert_eq!(lat.hypotheses().len(), 1);
        assert_eq!(lat.hypotheses()[0].weight(), 1.0);
        assert!(lat.consumed().is_empty());
        let again = BeamLattice::new(&lm, BeamParams::new(10, 0.01).unwrap()).unwrap();
        assert_eq!(lat, again);
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(matches!(BeamParams::new(0, 0.1), Err(BldError::Config(_))));
        assert!(matches!(BeamParams::new(3, 1.0), Err(BldError::Config(_))));
        assert!(matches!(BeamParams::new(3, -0.1), Err(BldError::Config(_))));
    }

    #[test]
    fn advancing_a_splits_into_two_paths() {
        let lm = toy();
        let mut lat = BeamLattice::new(&lm, BeamParams::new(10, 1e-6).unwrap()).unwrap();
        lat.advance(b'a').unwrap();
        let hyps = lat.hypotheses();
        assert_eq!(hyps.len(), 2);
        let done = hyps.iter().find(|h| h.partial().is_empty()).unwrap();
        let open = hyps.iter().find(|h| !h.partial().is_empty()).unwrap();
        assert_eq!(done.completed_tokens(), &[0]);
        assert!((done.weight() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(open.partial(), b"a");
        assert!(open.completed_tokens().is_empty());
        assert!((open.weight() - 1.0 / 3.0).abs() < 1e-15);

        let d = lat.next_byte_dist().unwrap();
        assert!((d.byte(b'a') - 1.0 / 3.0).abs() < 1e-12);
        assert!((d.byte(b'b') - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unreachable_byte_is_an_error_and_leaves_lattice_intact() {
        let lm = toy();
        let mut lat = BeamLattice::new(&lm, BeamParams::unbounded()).unwrap();
        lat.advance(b'a').unwrap();
        let before = lat.clone();
        let err = lat.advance(b'z').unwrap_err();
        assert!(matches!(
            err,
            BldError::Advance {
                byte: b'z',
                position: 1
            }
        ));
        assert_eq!(lat, before);
    }

    #[test]
    fn deterministic_teacher_puts_all_mass_on_first_byte() {
        let lm = toy();
        let scripted = ScriptedLm::new(Arc::new(lm.vocab().clone()), vec![2]).unwrap();
        let lat = BeamLattice::new(&scripted, BeamParams::new(3, 0.0).unwrap()).unwrap();
        assert_eq!(lat.next_byte_dist().unwrap().byte(b'a'), 1.0);
    }

    fn hyp(w: f64, tag: u32) -> Hypothesis {
        Hypothesis {
            completed: vec![tag],
            partial: Vec::new(),
            node: VocabTrie::ROOT,
            log_context: w.ln(),
            log_weight: w.ln(),
            split: true,
            context: None,
        }
    }

    #[test]
    fn prune_threshold_then_width() {
        let mut h = vec![hyp(0.6, 0), hyp(0.3, 1), hyp(0.0001, 2)];
        prune_hypotheses(&mut h, BeamParams::new(10, 0.01).unwrap());
        assert_eq!(h.len(), 2);

        let mut h = vec![hyp(0.2, 0), hyp(0.5, 1), hyp(0.3, 2)];
        prune_hypotheses(&mut h, BeamParams::new(2, 0.0).unwrap());
        let tags: Vec<u32> = h.iter().map(|x| x.completed[0]).collect();
        assert_eq!(tags, vec![1, 2]);

        let mut h = vec![hyp(0.2, 0), hyp(0.5, 1), hyp(1e-300, 2)];
        prune_hypotheses(&mut h, BeamParams::unbounded());
        assert_eq!(h.len(), 3);
    }

    #[test]
    fn prune_ties_break_on_path() {
        let mut h = vec![hyp(0.25, 3), hyp(0.25, 1), hyp(0.25, 2)];
        prune_hypotheses(&mut h, BeamParams::new(2, 0.0).unwrap());
        let tags: Vec<u32> = h.iter().map(|x| x.completed[0]).collect();
        assert_eq!(tags, vec![1, 2]);
    }

    #[test]
    fn boundary_split_is_idempotent() {
        let lm = toy();
        let mut lat = BeamLattice::new(&lm, BeamParams::unbounded()).unwrap();
        lat.advance(b'a').unwrap();
        let once = lat.clone();
        lat.extend_token_boundaries().unwrap();
        assert_eq!(lat, once);
    }
}
