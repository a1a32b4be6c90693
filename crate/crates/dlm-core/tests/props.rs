//! Property-based invariants across module boundaries: text/token round
//! trips, packing accounting, corruption-process laws, and attention
//! mask monotonicity, over randomized inputs.

use proptest::prelude::*;

use dlm_core::attention::{build_attention_mask, causal_mask, full_mask, AttentionMaskSpec};
use dlm_core::data::{build_vocab, pack_sequences, split_documents};
use dlm_core::process::{backward_posterior, corrupt_sequence, forward_marginal};
use dlm_core::schedule::NoiseSchedule;
use dlm_core::seq::{TokenSeq, BOS_ID, DOCSEP_ID, MASK_ID};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Document text over a small alphabet, never blank and never containing
/// the blank-line document separator.
fn doc_strategy() -> impl Strategy<Value = String> {
    proptest::collection::vec(
        prop_oneof![Just(' '), proptest::char::range('a', 'h'), Just('.')],
        1..60,
    )
        .prop_map(|chars| chars.into_iter().collect::<String>())
        .prop_filter("documents must contain a non-space character", |s: &String| {
            s.trim().chars().count() > 0
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_decode_round_trips(doc in doc_strategy()) {
        let vocab = build_vocab(&doc).unwrap();
        let ids = vocab.encode(&doc).unwrap();
        prop_assert!(ids.ids.iter().all(|&id| id >= 3));
        prop_assert_eq!(vocab.decode(&ids).unwrap(), doc);
    }

    #[test]
    fn packing_accounts_for_every_token(
        docs in proptest::collection::vec(doc_strategy(), 1..8),
        block_len in 2usize..40,
    ) {
        let corpus = docs.join("\n\n");
        let vocab = build_vocab(&corpus).unwrap();
        let split = split_documents(&corpus);
        prop_assert_eq!(split.len(), docs.len());

        let packed = pack_sequences(&vocab, &split, block_len).unwrap();
        packed.validate().unwrap();
        let body = block_len - 1;
        // Documents are joined by one separator token between them.
        let stream: usize =
            docs.iter().map(|d| d.chars().count()).sum::<usize>() + docs.len() - 1;
        prop_assert_eq!(packed.blocks.len(), stream.div_ceil(body));
        prop_assert_eq!(packed.total_tokens(), packed.blocks.len() * block_len);
        for block in &packed.blocks {
            prop_assert_eq!(block.len(), block_len);
            prop_assert_eq!(block.ids[0], BOS_ID);
            prop_assert!(!block.ids.contains(&MASK_ID));
        }

        // Stripping BOS and separator padding recovers the exact
        // concatenated document stream.
        let mut recovered = Vec::new();
        for block in &packed.blocks {
            recovered.extend_from_slice(&block.ids[1..]);
        }
        while recovered.last() == Some(&DOCSEP_ID) && recovered.len() > stream {
            recovered.pop();
        }
        let mut want = Vec::new();
        for (i, d) in docs.iter().enumerate() {
            if i > 0 {
                want.push(DOCSEP_ID);
            }
            want.extend_from_slice(&vocab.encode(d).unwrap().ids);
        }
        prop_assert_eq!(recovered, want);
    }

    #[test]
    fn corruption_marks_exactly_the_masked_positions(
        seed in any::<u64>(),
        t in 0.001f64..=1.0,
        len in 2usize..48,
    ) {
        let schedule = NoiseSchedule::linear();
        let ids: Vec<u32> = std::iter::once(BOS_ID)
            .chain((0..len - 1).map(|i| 3 + (i as u32 % 5)))
            .collect();
        let clean = TokenSeq { ids };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let item = corrupt_sequence(&schedule, &clean, t, &mut rng).unwrap();
        prop_assert_eq!(&item.labels, &clean);
        prop_assert_eq!(item.t, t);
        for p in 0..len {
            let masked = item.noisy.ids[p] == MASK_ID;
            prop_assert_eq!(item.mask_indicator[p], masked);
            if !masked {
                prop_assert_eq!(item.noisy.ids[p], clean.ids[p]);
            }
        }
    }

    #[test]
    fn marginal_and_posterior_are_distributions(
        x0 in 3u32..10,
        xt_is_mask in any::<bool>(),
        t in 0.001f64..=1.0,
        u in 0.0f64..1.0,
    ) {
        let schedule = NoiseSchedule::linear();
        let marginal = forward_marginal(&schedule, x0, t).unwrap();
        let total = marginal.prob_of(x0) + marginal.prob_of(MASK_ID);
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(marginal.prob_of(x0 + 1) == 0.0);

        let s = u * t * 0.999;
        let xt = if xt_is_mask { MASK_ID } else { x0 };
        let post = backward_posterior(&schedule, xt, x0, s, t).unwrap();
        let total = post.prob_of(x0) + post.prob_of(MASK_ID);
        prop_assert!((total - 1.0).abs() < 1e-12);
        if !xt_is_mask {
            // A surviving token never re-enters the absorbing state.
            prop_assert!((post.prob_of(x0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn annealed_masks_sit_between_causal_and_full(
        n in 2usize..32,
        ratio in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let spec = AttentionMaskSpec::new(ratio, seed);
        let mask = build_attention_mask(n, &spec);
        let causal = causal_mask(n);
        let full = full_mask(n);
        prop_assert!(mask.count_allowed() >= causal.count_allowed());
        prop_assert!(mask.count_allowed() <= full.count_allowed());
        for i in 0..n {
            for j in 0..=i {
                prop_assert!(mask.allowed(i, j), "causal entry ({i},{j}) must stay allowed");
            }
        }
        // More anneal never shrinks the context for the same seed.
        let wider = build_attention_mask(n, &AttentionMaskSpec::new((ratio + 0.3).min(1.0), seed));
        prop_assert!(wider.count_allowed() >= mask.count_allowed());
    }
}
