use ndarray::{Array2, Array3, ArrayView1};

use super::{LossBreakdown, LossWeights, TeacherByteTargets};
use crate::error::{BldError, Result};
use crate::model::{
    ByteSlots, LanguageModel, OutputGrad, SequenceLoss, StudentLm, StudentOutputs,
    TokenDistribution, BYTE_SLOT_EOS,
};
use crate::prob::{BYTE_OUTCOMES, EOS_SLOT};
use crate::tokenizer::{TokenId, Vocabulary};

/// Hard targets of one student sequence: the token ids it must predict and
/// the bytes of each token.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionTargets {
    tokens: Vec<TokenId>,
    token_bytes: Vec<Vec<u8>>,
}

impl SupervisionTargets {
    pub fn new(vocab: &Vocabulary, tokens: &[TokenId]) -> Result<Self> {
        if tokens.is_empty() {
            return Err(BldError::EmptyInput("target token sequence"));
        }
        let token_bytes = tokens
            .iter()
            .map(|&t| {
                if vocab.is_eos(t) {
                    return Err(BldError::UnknownToken(t));
                }
                vocab.bytes(t).map(<[u8]>::to_vec)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tokens: tokens.to_vec(),
            token_bytes,
        })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_bytes(&self, l: usize) -> &[u8] {
        &self.token_bytes[l]
    }

    /// Model input: a start marker (the end-of-sequence id) followed by all
    /// but the last target token, so output `l` predicts token `l`.
    pub fn inputs(&self, start: TokenId) -> Vec<TokenId> {
        let mut v = Vec::with_capacity(self.tokens.len());
        v.push(start);
        v.extend_from_slice(&self.tokens[..self.tokens.len() - 1]);
        v
    }

    /// Byte-head slots with a target at each position.
    pub fn byte_depths(&self, n_byte_heads: usize) -> Vec<usize> {
        self.token_bytes
            .iter()
            .map(|b| b.len().min(n_byte_heads))
            .collect()
    }
}

/// One training sequence with optional teacher byte targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub targets: SupervisionTargets,
    pub teacher: Option<TeacherByteTargets>,
}

/// Student byte slot holding teacher outcome `i` (bytes, then end of
/// sequence).
fn student_slot(i: usize) -> usize {
    if i == EOS_SLOT {
        BYTE_SLOT_EOS
    } else {
        i
    }
}

fn teacher_outcome(byte: u8) -> usize {
    byte as usize
}

/// Log-softmax over the 257 byte outcomes of a 260-way row; the begin, pad
/// and out-of-vocabulary slots are excluded.
fn masked_log_softmax(row: ArrayView1<'_, f64>) -> [f64; BYTE_OUTCOMES] {
    let mut out = [0.0; BYTE_OUTCOMES];
    let mut max = f64::NEG_INFINITY;
    for (i, o) in out.iter_mut().enumerate() {
        *o = row[student_slot(i)];
        max = max.max(*o);
    }
    let lse = max + out.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    for o in &mut out {
        *o -= lse;
    }
    out
}

fn log_softmax(row: ArrayView1<'_, f64>) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|z| z - lse).collect()
}

fn kl_terms(p: &[f64], logq: &[f64]) -> f64 {
    p.iter()
        .zip(logq)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, lq)| pi * (pi.ln() - lq))
        .sum()
}

fn check(v: f64, term: &'static str, position: usize, slot: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(BldError::NonFiniteTerm {
            term,
            position,
            slot,
        })
    }
}

/// Per-sequence byte-level distillation loss and its gradient with respect
/// to the student logits:
/// `(1/k) sum_l [ lt * CE_tok + (1/n_l) sum_{j < min(n_l, N_b)} (lb * CE_byte + lkl * KL(teacher || student)) ]`
/// where `n_l` is the full byte length of token `l`. Byte terms are skipped
/// when the outputs carry no byte logits; the KL term needs teacher targets.
pub fn bld_loss_and_grad(
    outputs: &StudentOutputs,
    targets: &SupervisionTargets,
    teacher: Option<&TeacherByteTargets>,
    w: &LossWeights,
) -> Result<OutputGrad> {
    w.validate()?;
    let k = targets.len();
    let (rows, vocab) = outputs.token_logits.dim();
    if rows != k {
        return Err(BldError::Shape(format!(
            "{rows} output positions for {k} target tokens"
        )));
    }
    if let Some(t) = teacher {
        if t.num_positions() != k {
            return Err(BldError::Shape(format!(
                "teacher targets cover {} positions, sequence has {k}",
                t.num_positions()
            )));
        }
    }
    let inv_k = 1.0 / k as f64;
    let mut d_token = Array2::zeros((rows, vocab));
    let mut token_ce = 0.0;
    for l in 0..k {
        let logq = log_softmax(outputs.token_logits.row(l));
        let y = targets.tokens[l] as usize;
        if y >= vocab {
            return Err(BldError::UnknownToken(targets.tokens[l]));
        }
        token_ce += check(-logq[y], "token cross-entropy", l, 0)?;
        for (v, lq) in logq.iter().enumerate() {
            d_token[[l, v]] = w.lambda_token * inv_k * lq.exp();
        }
        d_token[[l, y]] -= w.lambda_token * inv_k;
    }
    token_ce *= inv_k;

    let mut byte_ce = 0.0;
    let mut byte_kl = 0.0;
    let d_byte = match &outputs.byte_logits {
        None => {
            if w.lambda_byte > 0.0 || (w.lambda_kl > 0.0 && teacher.is_some()) {
                return Err(BldError::Shape(
                    "byte terms requested but the student produced no byte logits".into(),
                ));
            }
            None
        }
        Some(bl) => {
            let (_, n_heads, vb) = bl.dim();
            let mut d = Array3::zeros((rows, n_heads, vb));
            for l in 0..k {
                let bytes = targets.token_bytes(l);
                let n_l = bytes.len();
                let c = inv_k / n_l as f64;
                for (j, &byte) in bytes.iter().enumerate().take(n_heads) {
                    let logq = masked_log_softmax(bl.slice(ndarray::s![l, j, ..]));
                    let y = teacher_outcome(byte);
                    byte_ce += c * check(-logq[y], "byte cross-entropy", l, j)?;
                    let p = teacher.and_then(|t| t.slot(l, j));
                    let (kl, mass) = match p {
                        Some(p) => (kl_terms(p.probs(), &logq), p.sum()),
                        None => (0.0, 0.0),
                    };
                    byte_kl += c * check(kl, "byte KL divergence", l, j)?;
                    for i in 0..BYTE_OUTCOMES {
                        let q = logq[i].exp();
                        let mut g = w.lambda_byte * q;
                        if let Some(p) = p {
                            g += w.lambda_kl * (mass * q - p.probs()[i]);
                        }
                        if i == y {
                            g -= w.lambda_byte;
                        }
                        d[[l, j, student_slot(i)]] = c * g;
                    }
                }
            }
            Some(d)
        }
    };
    let breakdown = LossBreakdown::combine(w, token_ce, 0.0, byte_ce, byte_kl);
    if !breakdown.is_finite() {
        return Err(BldError::NonFiniteTerm {
            term: "total",
            position: 0,
            slot: 0,
        });
    }
    Ok(OutputGrad {
        breakdown,
        d_token_logits: d_token,
        d_byte_logits: d_byte,
    })
}

/// Byte-level distillation loss of one sequence.
pub fn bld_loss(
    outputs: &StudentOutputs,
    targets: &SupervisionTargets,
    teacher: Option<&TeacherByteTargets>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    bld_loss_and_grad(outputs, targets, teacher, w).map(|g| g.breakdown)
}

/// [`SequenceLoss`] over a batch of examples with byte-level targets.
#[derive(Debug, Clone, Copy)]
pub struct BldObjective<'a> {
    examples: &'a [TrainExample],
    weights: LossWeights,
    n_byte_heads: usize,
    byte_terms: bool,
}

impl<'a> BldObjective<'a> {
    pub fn new(examples: &'a [TrainExample], weights: LossWeights, n_byte_heads: usize) -> Self {
        Self {
            examples,
            weights,
            n_byte_heads,
            byte_terms: true,
        }
    }

    /// Skips the byte head entirely; only valid when both byte weights are
    /// zero. Byte terms are then reported as zero.
    pub fn without_byte_terms(mut self) -> Self {
        self.byte_terms = false;
        self
    }
}

impl SequenceLoss for BldObjective<'_> {
    fn evaluate(&self, index: usize, outputs: &StudentOutputs) -> Result<OutputGrad> {
        let ex = &self.examples[index];
        bld_loss_and_grad(outputs, &ex.targets, ex.teacher.as_ref(), &self.weights)
    }

    fn byte_slots(&self, index: usize) -> ByteSlots {
        if self.byte_terms {
            ByteSlots::PerPosition(self.examples[index].targets.byte_depths(self.n_byte_heads))
        } else {
            ByteSlots::None
        }
    }
}

/// Same-vocabulary distillation: per-position teacher distributions are
/// matched by KL alongside the token cross-entropy.
#[derive(Debug, Clone)]
pub struct KdObjective {
    sequences: Vec<Vec<TokenId>>,
    teacher: Vec<Vec<TokenDistribution>>,
    weights: LossWeights,
}

impl KdObjective {
    pub fn new<M: LanguageModel + ?Sized>(
        teacher: &M,
        student_vocab: &Vocabulary,
        sequences: &[Vec<TokenId>],
        weights: LossWeights,
    ) -> Result<Self> {
        if teacher.vocab() != student_vocab {
            return Err(BldError::VocabMismatch(
                "token-level distillation needs teacher and student to share a vocabulary".into(),
            ));
        }
        let mut dists = Vec::with_capacity(sequences.len());
        for seq in sequences {
            if seq.is_empty() {
                return Err(BldError::EmptyInput("distillation sequence"));
            }
            let prefixes: Vec<&[TokenId]> = (0..seq.len()).map(|j| &seq[..j]).collect();
            dists.push(teacher.next_token_dists(&prefixes)?);
        }
        Ok(Self {
            sequences: sequences.to_vec(),
            teacher: dists,
            weights,
        })
    }

    pub fn inputs(&self, start: TokenId) -> Vec<Vec<TokenId>> {
        self.sequences
            .iter()
            .map(|s| {
                let mut v = vec![start];
                v.extend_from_slice(&s[..s.len() - 1]);
                v
            })
            .collect()
    }
}

impl SequenceLoss for KdObjective {
    fn evaluate(&self, index: usize, outputs: &StudentOutputs) -> Result<OutputGrad> {
        let seq = &self.sequences[index];
        let k = seq.len();
        let (rows, vocab) = outputs.token_logits.dim();
        if rows != k {
            return Err(BldError::Shape(format!(
                "{rows} output positions for {k} tokens"
            )));
        }
        let w = &self.weights;
        let inv_k = 1.0 / k as f64;
        let mut d = Array2::zeros((rows, vocab));
        let (mut ce, mut kl) = (0.0, 0.0);
        for l in 0..k {
            let logq = log_softmax(outputs.token_logits.row(l));
            let p = self.teacher[index][l].probs();
            let y = seq[l] as usize;
            ce += check(-logq[y], "token cross-entropy", l, 0)?;
            kl += check(kl_terms(p, &logq), "token KL divergence", l, 0)?;
            let mass: f64 = p.iter().sum();
            for v in 0..vocab {
                let q = logq[v].exp();
                d[[l, v]] = inv_k * (w.lambda_token * q + w.lambda_kl * (mass * q - p[v]));
            }
            d[[l, y]] -= inv_k * w.lambda_token;
        }
        Ok(OutputGrad {
            breakdown: LossBreakdown::combine(w, ce * inv_k, kl * inv_k, 0.0, 0.0),
            d_token_logits: d,
            d_byte_logits: None,
        })
    }

    fn byte_slots(&self, _index: usize) -> ByteSlots {
        ByteSlots::None
    }
}

/// Token-level distillation loss summed over a batch, each sequence
/// normalized by its length.
pub fn standard_kd_loss<M: LanguageModel + ?Sized>(
    teacher: &M,
    student: &StudentLm,
    batch: &[Vec<TokenId>],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let objective = KdObjective::new(teacher, student.vocab(), batch, *weights)?;
    let start = student.vocab().eos_id();
    let mut total = LossBreakdown::default();
    for (i, input) in objective.inputs(start).iter().enumerate() {
        let logits = student.model().forward_tokens(input)?;
        let out = StudentOutputs {
            token_logits: logits,
            byte_logits: None,
        };
        total = total + objective.evaluate(i, &out)?.breakdown;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::{StudentConfig, StudentModel, UniformLm};
    use crate::prob::ByteDistribution;

    fn outputs(k: usize, v: usize, heads: usize, seed: u64) -> StudentOutputs {
        let mut x = seed;
        let mut next = || {
            x = crate::model::splitmix64(x);
            (x >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        StudentOutputs {
            token_logits: Array2::from_shape_fn((k, v), |_| next()),
            byte_logits: Some(Array3::from_shape_fn((k, heads, 260), |_| next())),
        }
    }

    #[test]
    fn matching_byte_softmax_gives_zero_kl() {
        let vocab = Vocabulary::bytes_only();
        let targets = SupervisionTargets::new(&vocab, &[b'h' as u32, b'i' as u32]).unwrap();
        let out = outputs(2, vocab.len(), 3, 4);
        let bl = out.byte_logits.as_ref().unwrap();
        let slots: Vec<ByteDistribution> = (0..2)
            .map(|l| {
                let logq = masked_log_softmax(bl.slice(ndarray::s![l, 0, ..]));
                ByteDistribution::from_probs(logq.iter().map(|x| x.exp()).collect()).unwrap()
            })
            .collect();
        let teacher = TeacherByteTargets::from_stream(&[1, 1], &slots, 3).unwrap();
        let b = bld_loss(&out, &targets, Some(&teacher), &LossWeights::default()).unwrap();
        assert!(b.byte_kl.abs() < 1e-9, "{}", b.byte_kl);
    }

    #[test]
    fn zero_byte_weights_reduce_to_token_ce() {
        let vocab = Vocabulary::bytes_only();
        let targets = SupervisionTargets::new(&vocab, &[1, 2, 3]).unwrap();
        let out = outputs(3, vocab.len(), 2, 8);
        let w = LossWeights::sft();
        let b = bld_loss(&out, &targets, None, &w).unwrap();
        assert_eq!(b.total, b.token_ce);
    }

    #[test]
    fn total_recombines_from_parts() {
        let vocab = Vocabulary::bytes_only();
        let targets = SupervisionTargets::new(&vocab, &[7, 8]).unwrap();
        let out = outputs(2, vocab.len(), 2, 1);
        let stream = vec![ByteDistribution::uniform(); 2];
        let teacher = TeacherByteTargets::from_stream(&[1, 1], &stream, 2).unwrap();
        let w = LossWeights {
            lambda_token: 0.7,
            lambda_byte: 1.3,
            lambda_kl: 0.1,
        };
        let b = bld_loss(&out, &targets, Some(&teacher), &w).unwrap();
        let re = 0.7 * b.token_ce + 1.3 * b.byte_ce + 0.1 * b.byte_kl;
        assert!((b.total - re).abs() < 1e-12);
        assert!(b.byte_kl >= 0.0);
    }

    #[test]
    fn uniform_teacher_and_student_give_ln4_ce_and_zero_kl() {
        let vocab =
            Arc::new(Vocabulary::from_entries((0..=255u8).map(|b| vec![b]).collect()).unwrap());
        let teacher = UniformLm::full(vocab.clone(), 1.0 / vocab.len() as f64).unwrap();
        let mut c = StudentConfig::new(vocab.len());
        c.d_model = 4;
        c.n_heads = 1;
        c.d_ff = 4;
        c.max_seq_len = 4;
        let mut m = StudentModel::new(c).unwrap();
        m.tensor_mut("token_head.weight").unwrap().fill(0.0);
        m.tensor_mut("token_head.bias").unwrap().fill(0.0);
        let student = StudentLm::new(m, vocab.clone()).unwrap();
        let b = standard_kd_loss(&teacher, &student, &[vec![1, 2, 3]], &LossWeights::kd()).unwrap();
        let v = vocab.len() as f64;
        assert!(b.token_kl.abs() < 1e-12);
        assert!((b.token_ce - v.ln()).abs() < 1e-12);
    }

    #[test]
    fn kd_rejects_mismatched_vocabularies() {
        let a = Arc::new(Vocabulary::bytes_only());
        let teacher = UniformLm::full(a, 0.1).unwrap();
        let other = Vocabulary::build(&[b"xy".to_vec()], &Default::default()).unwrap();
        assert!(matches!(
            KdObjective::new(&teacher, &other, &[vec![1]], LossWeights::kd()),
            Err(BldError::VocabMismatch(_))
        ));
    }
}
