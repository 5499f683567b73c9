//! Embedding initialization for a new vocabulary from a trained one: shared
//! tokens are copied, other tokens take the mean of their sub-token rows
//! under the source tokenizer, and tokens with no usable decomposition are
//! drawn from a Gaussian fitted per dimension to the source matrix.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{BldError, Result};
use crate::tokenizer::{TokenId, Tokenizer, Vocabulary};

/// Rows of `source_embed` are indexed by source token id; ids at or beyond
/// its row count are treated as having no embedding.
pub fn fvt_init(
    source_embed: &Array2<f64>,
    source: &Tokenizer,
    target: &Vocabulary,
    seed: u64,
) -> Result<Array2<f64>> {
    let (rows, d) = source_embed.dim();
    if rows == 0 || d == 0 {
        return Err(BldError::EmptyInput("source embedding matrix"));
    }
    let src_vocab = source.vocab();
    let mean: Array1<f64> = source_embed.mean_axis(Axis(0)).expect("rows > 0");
    let std: Array1<f64> = source_embed.std_axis(Axis(0), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let has_row = |id: TokenId| (id as usize) < rows;

    let mut out = Array2::zeros((target.len(), d));
    for id in 0..target.len() as TokenId {
        let mut row = out.row_mut(id as usize);
        let shared = if target.is_eos(id) {
            Some(src_vocab.eos_id())
        } else {
            src_vocab.id_of(target.bytes(id)?)
        };
        if let Some(s) = shared.filter(|&s| has_row(s)) {
            row.assign(&source_embed.row(s as usize));
            continue;
        }
        let parts = if target.is_eos(id) {
            Vec::new()
        } else {
            source.tokenize(target.bytes(id)?)
        };
        if !parts.is_empty() && parts.iter().all(|&p| has_row(p)) {
            for &p in &parts {
                row += &source_embed.row(p as usize);
            }
            row /= parts.len() as f64;
            continue;
        }
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            row[j] = mean[j] + std[j] * z;
        }
    }
    Ok(out)
}
