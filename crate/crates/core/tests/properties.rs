use flowseq_core::compute::{ops, DType};
use flowseq_core::data::{padded_length, pad_with_eos, Vocabulary, EOS, NUM_RESERVED};
use flowseq_core::decoding::trim_at_eos;
use flowseq_core::eval::{corpus_bleu, pairwise_bleu, sentence_bleu};
use flowseq_core::flow::{concat, split, squeeze, squeeze_mask, unsqueeze, CouplingType};
use flowseq_core::nets::{class_difference, length_class, LENGTH_CLASSES, MAX_LENGTH_DIFF};
use flowseq_core::training::kl_weight;
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = CouplingType> {
    prop_oneof![
        Just(CouplingType::TimeAlternate),
        Just(CouplingType::FeatureContinuous),
        Just(CouplingType::FeatureAlternate),
    ]
}

fn sentence(max_len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..6, 0..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_then_concat_is_identity(b in 1usize..3, half_t in 1usize..5, half_d in 1usize..4, k in kind(), swap in any::<bool>(), seed in any::<u64>()) {
        let (t, d) = (2 * half_t, 2 * half_d);
        let data: Vec<f64> = (0..b * t * d).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64).collect();
        let h = ops::from_f64(data.clone(), &[b, t, d], DType::F64).unwrap();
        let (a, c) = split(&h, k, swap).unwrap();
        let back = concat(&a, &c, k, swap).unwrap();
        prop_assert_eq!(ops::to_f64_vec(&back).unwrap(), data);
        // The two halves partition the entries.
        let mut parts = ops::to_f64_vec(&a.flatten_all().unwrap()).unwrap();
        parts.extend(ops::to_f64_vec(&c.flatten_all().unwrap()).unwrap());
        prop_assert_eq!(parts.len(), b * t * d);
    }

    #[test]
    fn squeeze_round_trips(b in 1usize..3, half_t in 1usize..6, d in 1usize..5) {
        let t = 2 * half_t;
        let data: Vec<f64> = (0..b * t * d).map(|i| i as f64).collect();
        let h = ops::from_f64(data.clone(), &[b, t, d], DType::F64).unwrap();
        let s = squeeze(&h).unwrap();
        prop_assert_eq!(s.dims(), &[b, half_t, 2 * d]);
        prop_assert_eq!(ops::to_f64_vec(&unsqueeze(&s).unwrap()).unwrap(), data);
    }

    #[test]
    fn squeezed_mask_follows_first_constituent(lens in prop::collection::vec(0usize..5, 1..4)) {
        let t = 8;
        let rows: Vec<f64> = lens.iter().flat_map(|&l| (0..t).map(move |i| if i < 2 * l { 1.0 } else { 0.0 })).collect();
        let m = ops::from_f64(rows, &[lens.len(), t], DType::F64).unwrap();
        let got = ops::to_f64_vec(&squeeze_mask(&m).unwrap()).unwrap();
        let want: Vec<f64> = lens.iter().flat_map(|&l| (0..t / 2).map(move |i| if i < l { 1.0 } else { 0.0 })).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn trim_is_idempotent(ids in prop::collection::vec(0u32..8, 0..20)) {
        let once = trim_at_eos(&ids);
        prop_assert_eq!(trim_at_eos(&once), once.clone());
        prop_assert!(!once.contains(&EOS));
        prop_assert!(ids.starts_with(&once));
    }

    #[test]
    fn padded_length_is_minimal_multiple(len in 0usize..200, scales in 1usize..5) {
        let p = padded_length(len, scales);
        let m = 1usize << (scales - 1);
        prop_assert!(p >= len && p % m == 0 && p < len + m);
    }

    #[test]
    fn eos_padding_ends_in_eos(row in prop::collection::vec(4u32..10, 0..20), scales in 1usize..4) {
        let p = pad_with_eos(&row, scales);
        prop_assert_eq!(p.len() % (1 << (scales - 1)), 0);
        prop_assert_eq!(p.last(), Some(&EOS));
        prop_assert_eq!(trim_at_eos(&p), row);
    }

    #[test]
    fn length_class_round_trips(src in 1usize..100, tgt in 1usize..100) {
        let c = length_class(src, tgt);
        prop_assert!(c < LENGTH_CLASSES);
        let diff = tgt as i64 - src as i64;
        prop_assert_eq!(class_difference(c), diff.clamp(-MAX_LENGTH_DIFF, MAX_LENGTH_DIFF));
    }

    #[test]
    fn kl_weight_is_monotone_and_bounded(zero in 0usize..100, ramp in 0usize..100, a in 0usize..300, b in 0usize..300) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (wl, wh) = (kl_weight(lo, zero, ramp), kl_weight(hi, zero, ramp));
        prop_assert!((0.0..=1.0).contains(&wl) && wl <= wh);
        if hi < zero {
            prop_assert_eq!(wh, 0.0);
        }
        if lo >= zero + ramp {
            prop_assert_eq!(wl, 1.0);
        }
    }

    #[test]
    fn vocab_round_trips(words in prop::collection::btree_set("[a-z]{1,6}", 1..30)) {
        let v = Vocabulary::from_tokens(words.iter().cloned()).unwrap();
        prop_assert_eq!(v.len(), words.len() + NUM_RESERVED);
        let toks: Vec<String> = words.iter().cloned().collect();
        prop_assert_eq!(v.decode(&v.encode(&toks)), toks.clone());
        prop_assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn bleu_is_bounded(pairs in prop::collection::vec((sentence(12), sentence(12)), 1..6)) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let b = corpus_bleu(&h, &r).unwrap().bleu;
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
    }

    #[test]
    fn bleu_of_identity_is_100(refs in prop::collection::vec(prop::collection::vec(0u8..6, 4..12), 1..6)) {
        let b = corpus_bleu(&refs, &refs).unwrap().bleu;
        prop_assert!((b - 100.0).abs() < 1e-9);
        for r in &refs {
            prop_assert!((sentence_bleu(r, r) - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pairwise_bleu_ignores_candidate_order(sets in prop::collection::vec(prop::collection::vec(sentence(8), 3), 1..4), rot in 0usize..3) {
        let a = pairwise_bleu(&sets, 3).unwrap();
        let rotated: Vec<Vec<Vec<u8>>> = sets.iter().map(|s| {
            let mut s = s.clone();
            s.rotate_left(rot);
            s
        }).collect();
        let b = pairwise_bleu(&rotated, 3).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((0.0..=100.0 + 1e-9).contains(&a));
    }
}
