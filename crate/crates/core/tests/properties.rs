use std::collections::BTreeSet;
use std::sync::Arc;

use bld::beam::{byte_stream, BeamLattice, BeamParams};
use bld::exact::ExactOracle;
use bld::model::{sample_tokens, LanguageModel, RandomLm};
use bld::pipeline::SyntheticLanguage;
use bld::tokenizer::{MergeRules, TokenId, Tokenizer, Vocabulary};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_vocab() -> impl Strategy<Value = Vec<Vec<u8>>> {
    prop::collection::btree_set(prop::collection::vec(b'a'..=b'd', 2..=4), 1..20)
        .prop_map(|s| s.into_iter().collect())
}

fn instance(user: &[Vec<u8>], seed: u64) -> (RandomLm, Vec<u8>) {
    let vocab = Arc::new(Vocabulary::build(user, &MergeRules::default()).unwrap());
    let mut support: Vec<TokenId> = user.iter().map(|t| vocab.id_of(t).unwrap()).collect();
    for b in b'a'..=b'd' {
        support.push(vocab.id_of(&[b]).unwrap());
    }
    let lm = RandomLm::new(vocab, support, seed)
        .unwrap()
        .with_eos_scale(0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = sample_tokens(&lm, 6, &mut rng).unwrap();
    let mut text = lm.vocab().decode(&tokens).unwrap();
    text.truncate(8);
    (lm, text)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tokenize_round_trips(text in prop::collection::vec(any::<u8>(), 0..200), n in 0usize..60) {
        let lang = SyntheticLanguage::new(80, 3).unwrap();
        let tok = lang.teacher_tokenizer(n).unwrap();
        let ids = tok.tokenize(&text);
        prop_assert_eq!(tok.decode(&ids).unwrap(), text);
    }

    #[test]
    fn merges_only_produce_vocabulary_tokens(text in prop::collection::vec(b'a'..=b'e', 0..60)) {
        let merges = MergeRules::new(vec![
            (b"a".to_vec(), b"b".to_vec()),
            (b"ab".to_vec(), b"c".to_vec()),
            (b"d".to_vec(), b"d".to_vec()),
        ]);
        let tok = Tokenizer::from_merges(merges).unwrap();
        for id in tok.tokenize(&text) {
            prop_assert!(tok.vocab().bytes(id).is_ok());
            prop_assert!(!tok.vocab().is_eos(id));
        }
    }

    #[test]
    fn trie_prefixes_match_brute_force(
        user in small_vocab(),
        text in prop::collection::vec(b'a'..=b'd', 0..10),
    ) {
        let vocab = Vocabulary::build(&user, &MergeRules::default()).unwrap();
        let got: BTreeSet<TokenId> = vocab.trie().prefixes_of(&text).into_iter().collect();
        let want: BTreeSet<TokenId> = vocab
            .content_tokens()
            .filter(|(_, b)| text.starts_with(b))
            .map(|(id, _)| id)
            .collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn unpruned_beam_equals_exact(user in small_vocab(), seed in any::<u64>()) {
        let (lm, text) = instance(&user, seed);
        let oracle = ExactOracle::new(&lm);
        let stream = byte_stream(&lm, &text, BeamParams::unbounded()).unwrap();
        for (i, beam) in stream.dists.iter().enumerate() {
            let exact = oracle.next_byte_dist(&text[..i]).unwrap();
            for (x, y) in beam.probs().iter().zip(exact.probs()) {
                prop_assert!((x - y).abs() <= 1e-9, "position {}: {} vs {}", i, x, y);
            }
        }
    }

    #[test]
    fn pruned_beam_stays_normalized(
        user in small_vocab(),
        seed in any::<u64>(),
        k in 1usize..6,
        eps in 0.0f64..0.9,
    ) {
        let (lm, text) = instance(&user, seed);
        let Ok(stream) = byte_stream(&lm, &text, BeamParams::new(k, eps).unwrap()) else {
            // Pruning may discard every hypothesis able to emit the next
            // byte; that is reported as an error, not a bad distribution.
            return Ok(());
        };
        for d in &stream.dists {
            prop_assert!((d.sum() - 1.0).abs() <= 1e-9);
            prop_assert!(d.probs().iter().all(|p| p.is_finite() && *p >= 0.0));
        }
        prop_assert!(stream.leaked.iter().all(|l| (-1e-12..=1.0 + 1e-12).contains(l)));
    }

    #[test]
    fn conditionals_chain_to_prefix_probability(user in small_vocab(), seed in any::<u64>()) {
        let (lm, text) = instance(&user, seed);
        let oracle = ExactOracle::new(&lm);
        let stream = byte_stream(&lm, &text, BeamParams::unbounded()).unwrap();
        let chained: f64 = text
            .iter()
            .zip(&stream.dists)
            .map(|(&b, d)| d.byte(b))
            .product();
        let exact = oracle.prefix_prob(&text).unwrap().prob();
        prop_assert!((chained - exact).abs() <= 1e-9 * exact.max(1e-300).max(1.0));
    }

    #[test]
    fn lattice_is_deterministic(user in small_vocab(), seed in any::<u64>(), k in 1usize..4) {
        let (lm, text) = instance(&user, seed);
        let params = BeamParams::new(k, 0.0).unwrap();
        let run = || -> Option<Vec<u8>> {
            let mut lat = BeamLattice::new(&lm, params).unwrap();
            for &b in &text {
                lat.advance(b).ok()?;
            }
            Some(
                lat.next_byte_dist()
                    .unwrap()
                    .probs()
                    .iter()
                    .flat_map(|p| p.to_le_bytes())
                    .collect(),
            )
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn best_hypothesis_survives_pruning(
        user in small_vocab(),
        seed in any::<u64>(),
        eps in 0.0f64..0.99,
    ) {
        let (lm, text) = instance(&user, seed);
        let mut unpruned = BeamLattice::new(&lm, BeamParams::unbounded()).unwrap();
        let mut pruned = BeamLattice::new(&lm, BeamParams::new(1, eps).unwrap()).unwrap();
        // With K = 1 the survivor of each step must be the heaviest
        // hypothesis available to it, which after the first byte is the
        // heaviest overall.
        if let Some(&b) = text.first() {
            unpruned.advance(b).unwrap();
            if pruned.advance(b).is_ok() {
                let best = unpruned
                    .hypotheses()
                    .iter()
                    .map(|h| h.log_weight())
                    .fold(f64::NEG_INFINITY, f64::max);
                let kept = pruned.hypotheses().iter().map(|h| h.log_weight()).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!((best - kept).abs() <= 1e-12);
            }
        }
    }
}
