//! Fixtures shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

use std::sync::Arc;

use bld::distill::{SupervisionTargets, TeacherByteTargets};
use bld::model::{StudentConfig, StudentModel, UniformLm};
use bld::prob::{ByteDistribution, BYTE_OUTCOMES};
use bld::tokenizer::{MergeRules, TokenId, Tokenizer, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Vocabulary {"a", "b", "ab"} with merge ("a", "b"), plus injected bytes.
pub fn toy_tokenizer() -> Tokenizer {
    Tokenizer::build(
        &[b"a".to_vec(), b"b".to_vec(), b"ab".to_vec()],
        MergeRules::new(vec![(b"a".to_vec(), b"b".to_vec())]),
    )
    .unwrap()
}

/// Uniform teacher over the three toy tokens, never ending.
pub fn toy_teacher() -> UniformLm {
    let tok = toy_tokenizer();
    let vocab = Arc::new(tok.vocab().clone());
    let ids: Vec<TokenId> = [&b"a"[..], b"b", b"ab"]
        .iter()
        .map(|t| vocab.id_of(t).unwrap())
        .collect();
    UniformLm::over(vocab, &ids, 0.0).unwrap()
}

pub fn random_dist(rng: &mut impl Rng) -> ByteDistribution {
    let masses: Vec<f64> = (0..BYTE_OUTCOMES)
        .map(|_| rng.random::<f64>().powi(4))
        .collect();
    ByteDistribution::from_masses(masses).unwrap()
}

/// A student small enough for finite differences (under 5k parameters)
/// whose first eight token ids are multi-byte user tokens of `vocab`.
pub struct GradFixture {
    pub model: StudentModel,
    pub targets: Vec<SupervisionTargets>,
    pub teacher: Vec<TeacherByteTargets>,
}

pub fn grad_fixture(seed: u64) -> GradFixture {
    let user: Vec<Vec<u8>> = ["ab", "abc", "b", "ca", "cab", "a", "c", "bcab"]
        .iter()
        .map(|s| s.as_bytes().to_vec())
        .collect();
    let vocab = Vocabulary::build(&user, &MergeRules::default()).unwrap();
    let config = StudentConfig {
        vocab_size: 9,
        d_model: 4,
        n_layers: 2,
        n_heads: 1,
        d_ff: 8,
        max_seq_len: 5,
        n_byte_heads: 3,
        byte_vocab_size: 260,
        seed,
    };
    let mut model = StudentModel::new(config).unwrap();
    // Larger weights than the default init so every path carries signal.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for p in model.params_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    let mut targets = Vec::new();
    let mut teacher = Vec::new();
    for len in [3usize, 5] {
        let tokens: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..8)).collect();
        let t = SupervisionTargets::new(&vocab, &tokens).unwrap();
        let lens: Vec<usize> = (0..t.len()).map(|l| t.token_bytes(l).len()).collect();
        let stream: Vec<ByteDistribution> = (0..lens.iter().sum::<usize>())
            .map(|_| random_dist(&mut rng))
            .collect();
        teacher.push(TeacherByteTargets::from_stream(&lens, &stream, 3).unwrap());
        targets.push(t);
    }
    GradFixture {
        model,
        targets,
        teacher,
    }
}
