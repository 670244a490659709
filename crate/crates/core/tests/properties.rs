use proptest::prelude::*;
use smartreply_core::corpus::{detokenize, split, tokenize, MessageReplyPair};
use smartreply_core::encoder::{EncoderConfig, EncoderKind, EncoderParams, Mode, Side};
use smartreply_core::lm::{LmConfig, NgramLm};
use smartreply_core::matching::symmetric_loss;
use smartreply_core::mcvae::{decode_batch, CvaeParams};
use smartreply_core::rng::sample_gaussian;
use smartreply_core::{Rng, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f32..1.0, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

fn token() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z]{1,8}",
        "[0-9]{1,3}",
        "(can't|don't|i'm|it's)",
        "[!?.,:;]",
    ]
}

fn pair(i: usize) -> MessageReplyPair {
    MessageReplyPair::from_text(&format!("message {i}"), "ok", None, 30).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matmul_is_associative(a in matrix(3, 4), b in matrix(4, 5), c in matrix(5, 2)) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (l, r) in left.data().iter().zip(right.data()) {
            prop_assert!((l - r).abs() < 1e-4, "{l} vs {r}");
        }
    }

    #[test]
    fn tokenize_inverts_detokenize(tokens in prop::collection::vec(token(), 1..12)) {
        prop_assert_eq!(tokenize(&detokenize(&tokens)), tokens);
    }

    #[test]
    fn split_is_a_partition(n in 2usize..200, fraction in 0.01f64..0.99, seed in any::<u64>()) {
        let pairs: Vec<MessageReplyPair> = (0..n).map(pair).collect();
        let (train, val) = split(&pairs, fraction, seed).unwrap();
        prop_assert_eq!(train.len() + val.len(), n);
        prop_assert!(!train.is_empty() && !val.is_empty());
        let mut all: Vec<String> = train.iter().chain(&val).map(|p| detokenize(&p.message)).collect();
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        let (train2, val2) = split(&pairs, fraction, seed).unwrap();
        prop_assert_eq!(train, train2);
        prop_assert_eq!(val, val2);
    }

    #[test]
    fn golden_probability_is_at_most_one(n in 1usize..7, vals in prop::collection::vec(-8.0f32..8.0, 36)) {
        let theta = Tensor::new(vec![n, n], vals[..n * n].to_vec()).unwrap();
        let loss = symmetric_loss(&theta).unwrap();
        prop_assert!(loss.is_finite());
        if n == 1 {
            prop_assert_eq!(loss, 0.0);
        } else {
            prop_assert!(loss > 0.0);
        }
    }

    #[test]
    fn lm_distributions_sum_to_one(
        replies in prop::collection::vec(prop::collection::vec(1u32..12, 1..6), 1..20),
        history in prop::collection::vec(1u32..14, 0..4),
    ) {
        let lm = NgramLm::train(&replies, 14, LmConfig::default()).unwrap();
        let total: f64 = lm.distribution(&history).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-5, "{total}");
    }

    #[test]
    fn forward_passes_are_bit_identical(seed in any::<u64>(), tokens in prop::collection::vec(2u32..40, 1..10)) {
        let cfg = EncoderConfig {
            kind: EncoderKind::BiLstm,
            vocab_size: 40,
            embed_dim: 8,
            hidden: 6,
            ..EncoderConfig::default()
        };
        let a = EncoderParams::new(cfg.clone(), &mut Rng::new(seed)).unwrap();
        let b = EncoderParams::new(cfg, &mut Rng::new(seed)).unwrap();
        let va = a.encode(Side::Message, &tokens, &mut Mode::Infer).unwrap();
        let vb = b.encode(Side::Message, &tokens, &mut Mode::Infer).unwrap();
        prop_assert_eq!(va.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), vb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());

        let cvae = CvaeParams::new(va.len(), 4, 5, 0.3, &mut Rng::new(seed)).unwrap();
        let z1 = sample_gaussian(&mut Rng::new(seed), &[3, 4]).unwrap();
        let z2 = sample_gaussian(&mut Rng::new(seed), &[3, 4]).unwrap();
        prop_assert_eq!(&z1, &z2);
        let d1 = decode_batch(&cvae, &z1, &va).unwrap();
        let d2 = decode_batch(&cvae, &z2, &vb).unwrap();
        prop_assert!(d1.data().iter().zip(d2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
