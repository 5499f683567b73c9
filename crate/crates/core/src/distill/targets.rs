use crate::beam::{byte_stream, BeamParams};
use crate::error::{BldError, Result};
use crate::model::LanguageModel;
use crate::prob::ByteDistribution;
use crate::tokenizer::{TokenId, Tokenizer};

/// Teacher next-byte distributions re-indexed by student token position
/// and byte offset within the token. Offsets at or beyond the number of
/// byte heads are absent (masked).
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherByteTargets {
    token_lens: Vec<usize>,
    slots: Vec<Vec<ByteDistribution>>,
}

impl TeacherByteTargets {
    /// Splits a flat per-byte stream along student token boundaries. The
    /// stream may extend past the tokens (for truncated sequences).
    pub fn from_stream(
        token_lens: &[usize],
        stream: &[ByteDistribution],
        n_byte_heads: usize,
    ) -> Result<Self> {
        let needed: usize = token_lens.iter().sum();
        if stream.len() < needed {
            return Err(BldError::Shape(format!(
                "byte stream has {} positions, tokens cover {needed}",
                stream.len()
            )));
        }
        let mut slots = Vec::with_capacity(token_lens.len());
        let mut start = 0;
        for &len in token_lens {
            slots.push(stream[start..start + len.min(n_byte_heads)].to_vec());
            start += len;
        }
        Ok(Self {
            token_lens: token_lens.to_vec(),
            slots,
        })
    }

    pub fn num_positions(&self) -> usize {
        self.token_lens.len()
    }

    /// Full byte length of the student token at position `l`.
    pub fn token_len(&self, l: usize) -> usize {
        self.token_lens[l]
    }

    /// Unmasked slots of position `l`.
    pub fn slots(&self, l: usize) -> &[ByteDistribution] {
        &self.slots[l]
    }

    pub fn slot(&self, l: usize, j: usize) -> Option<&ByteDistribution> {
        self.slots.get(l).and_then(|s| s.get(j))
    }

    /// Keeps the first `positions` token positions.
    pub fn truncated(mut self, positions: usize) -> Self {
        self.token_lens.truncate(positions);
        self.slots.truncate(positions);
        self
    }
}

fn failing_position(e: &BldError) -> usize {
    match e {
        BldError::Advance { position, .. } => *position,
        BldError::DegenerateLattice { consumed } => *consumed,
        _ => 0,
    }
}

/// Runs the beam over `b` and aligns the resulting conditionals with the
/// student tokenization of `b`.
pub fn build_byte_targets<M: LanguageModel + ?Sized>(
    teacher: &M,
    student: &Tokenizer,
    b: &[u8],
    params: BeamParams,
    n_byte_heads: usize,
) -> Result<(Vec<TokenId>, TeacherByteTargets)> {
    let tokens = student.tokenize(b);
    let stream = byte_stream(teacher, b, params).map_err(|e| BldError::TargetConstruction {
        position: failing_position(&e),
        source: Box::new(e),
    })?;
    let lens: Vec<usize> = tokens
        .iter()
        .map(|&t| student.vocab().bytes(t).map(|s| s.len()))
        .collect::<Result<_>>()?;
    let targets = TeacherByteTargets::from_stream(&lens, &stream.dists, n_byte_heads)?;
    Ok((tokens, targets))
}
