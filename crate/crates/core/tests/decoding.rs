use flowseq_core::compute::{ops, NoiseRng, Precision};
use flowseq_core::data::{TokenBatch, BOS, EOS, NUM_RESERVED};
use flowseq_core::decoding::{
    argmax_decode, importance_log_likelihood, iwd_candidates, iwd_decode, length_candidates, log_mean_exp, npd_candidates, npd_decode, ArConfig, ArModel,
    DecodeConfig, Method,
};
use flowseq_core::model::{FlowSeq, FlowSeqConfig, Preset};
use flowseq_core::nets::{class_difference, ranked_length_classes, Ctx};
use flowseq_core::verify;
use flowseq_core::Error;

const VOCAB: usize = NUM_RESERVED + 12;

fn model(seed: u64) -> FlowSeq {
    let mut cfg = FlowSeqConfig::preset(Preset::Tiny);
    cfg.model.src_vocab = VOCAB;
    cfg.model.tgt_vocab = VOCAB;
    cfg.model.d_model = 32;
    cfg.model.d_hidden = 64;
    cfg.model.precision = Precision::F64;
    let m = FlowSeq::new(cfg, seed).unwrap();
    m.store.perturb(&mut NoiseRng::new(seed), 0.05, |_| true).unwrap();
    let (src, tgt) = batch(&[5, 7, 3], seed);
    let tgt = TokenBatch::from_rows(&(0..3).map(|i| flowseq_core::data::pad_with_eos(tgt.row(i), 2)).collect::<Vec<_>>(), 0).unwrap();
    m.initialize_flow(&src, &tgt, &mut NoiseRng::new(seed)).unwrap();
    m
}

fn ar(tgt_vocab: usize) -> ArModel {
    ArModel::new(
        ArConfig {
            src_vocab: VOCAB,
            tgt_vocab,
            d_model: 32,
            d_hidden: 64,
            n_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            max_extra_len: 6,
            precision: Precision::F64,
            ..ArConfig::default()
        },
        5,
    )
    .unwrap()
}

fn rows(lens: &[usize], seed: u64) -> Vec<Vec<u32>> {
    let mut rng = NoiseRng::new(seed);
    lens.iter()
        .map(|&l| (0..l).map(|_| (NUM_RESERVED + rng.below(VOCAB - NUM_RESERVED)) as u32).chain([EOS]).collect())
        .collect()
}

fn batch(lens: &[usize], seed: u64) -> (TokenBatch, TokenBatch) {
    (
        TokenBatch::from_rows(&rows(lens, seed), 0).unwrap(),
        TokenBatch::from_rows(&rows(lens, seed + 1), 0).unwrap(),
    )
}

fn tokens(h: &[flowseq_core::decoding::Hypothesis]) -> Vec<Vec<u32>> {
    h.iter().map(|h| h.tokens.clone()).collect()
}

#[test]
fn argmax_is_deterministic_and_pad_neutral() {
    let m = model(1);
    let src_rows = rows(&[3, 9, 6], 40);
    let src = TokenBatch::from_rows(&src_rows, 0).unwrap();
    let a = argmax_decode(&m, &src).unwrap();
    let b = argmax_decode(&m, &src).unwrap();
    assert_eq!(tokens(&a), tokens(&b));
    for (i, row) in src_rows.iter().enumerate() {
        let alone = argmax_decode(&m, &TokenBatch::from_rows(std::slice::from_ref(row), 0).unwrap()).unwrap();
        assert_eq!(alone[0].tokens, a[i].tokens, "row {i} changed with batch padding");
        assert_eq!(alone[0].raw_length, a[i].raw_length);
    }
}

#[test]
fn length_candidates_follow_ranked_classes() {
    let m = model(2);
    let src = TokenBatch::from_rows(&rows(&[1, 12], 41), 0).unwrap();
    let enc = m.encode(&src, &Ctx::eval()).unwrap();
    let scores = ops::to_f64_vec(&m.length_logits(&enc).unwrap()).unwrap();
    let cands = length_candidates(&m, &enc, 41).unwrap();
    for (i, c) in cands.iter().enumerate() {
        let src_len = src.lengths[i] as i64;
        let mut want: Vec<usize> = Vec::new();
        for class in ranked_length_classes(&scores[i * 41..(i + 1) * 41]) {
            let t = (src_len + class_difference(class)).max(1) as usize;
            let t = t.div_ceil(2) * 2;
            if !want.contains(&t) {
                want.push(t);
            }
        }
        assert_eq!(c, &want);
        assert!(c.iter().all(|&t| t >= 2 && t % 2 == 0));
    }
    // A one-token source (plus EOS) has at most 11 distinct even lengths in [2, 22].
    assert!(cands[0].len() <= 11);
    assert_eq!(length_candidates(&m, &enc, 3).unwrap()[1], cands[1][..3].to_vec());
}

#[test]
fn npd_with_one_cold_sample_matches_argmax() {
    let m = model(3);
    let r = ar(VOCAB);
    let src = TokenBatch::from_rows(&rows(&[4, 7], 42), 0).unwrap();
    let cfg = DecodeConfig {
        method: Method::Npd,
        l: 1,
        r: 1,
        temperature: 1e-9,
        ..DecodeConfig::default()
    };
    assert_eq!(tokens(&npd_decode(&m, &src, &cfg, &r).unwrap()), tokens(&argmax_decode(&m, &src).unwrap()));
}

#[test]
fn npd_candidates_are_unique_and_best_is_selected() {
    let m = model(4);
    let r = ar(VOCAB);
    let src = TokenBatch::from_rows(&rows(&[4, 7, 5], 43), 0).unwrap();
    let cfg = DecodeConfig {
        method: Method::Npd,
        l: 3,
        r: 4,
        temperature: 1.0,
        ..DecodeConfig::default()
    };
    let sc = npd_candidates(&m, &src, &cfg, &r).unwrap();
    assert_eq!(sc.generated, 12);
    let best = npd_decode(&m, &src, &cfg, &r).unwrap();
    for (set, pick) in sc.hypotheses.iter().zip(&best) {
        assert!(!set.is_empty() && set.len() <= 12);
        let mut seen: Vec<&Vec<u32>> = set.iter().map(|h| &h.tokens).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), set.len());
        let top = set.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(pick.score, top);
        assert!(set.iter().any(|h| h.tokens == pick.tokens));
        // The reported score is the rescorer's length-normalized log-probability.
        let enc = r.encode(&src, &Ctx::eval()).unwrap();
        let owner = best.iter().position(|b| std::ptr::eq(b, pick)).unwrap();
        let again = r.score(&enc, &[owner], std::slice::from_ref(&pick.tokens)).unwrap()[0];
        assert!((again - pick.score).abs() < 1e-9);
    }
}

#[test]
fn rescorer_vocabulary_must_match() {
    let m = model(5);
    let src = TokenBatch::from_rows(&rows(&[4], 44), 0).unwrap();
    let cfg = DecodeConfig { method: Method::Npd, ..DecodeConfig::default() };
    assert!(matches!(npd_decode(&m, &src, &cfg, &ar(VOCAB + 3)), Err(Error::VocabMismatch(_))));
}

#[test]
fn decoder_runs_once_per_batch() {
    let m = model(6);
    let r = ar(VOCAB);
    for lens in [[2usize, 3], [9, 15]] {
        let src = TokenBatch::from_rows(&rows(&lens, 45), 0).unwrap();
        m.decoder.reset_pass_count();
        argmax_decode(&m, &src).unwrap();
        assert_eq!(m.decoder.pass_count(), 1);
        m.decoder.reset_pass_count();
        let cfg = DecodeConfig { method: Method::Npd, l: 2, r: 3, ..DecodeConfig::default() };
        npd_decode(&m, &src, &cfg, &r).unwrap();
        assert_eq!(m.decoder.pass_count(), 1);
    }
}

#[test]
fn log_mean_exp_is_stable() {
    let v = log_mean_exp(&[0.0, -200.0]);
    assert!((v - (-(2f64.ln()) + (-200f64).exp().ln_1p())).abs() < 1e-12);
    assert!((log_mean_exp(&[1000.0, 800.0]) - (1000.0 - 2f64.ln())).abs() < 1e-9);
    assert_eq!(log_mean_exp(&[3.5]), 3.5);
    assert_eq!(log_mean_exp(&[f64::NEG_INFINITY; 2]), f64::NEG_INFINITY);
}

#[test]
fn iwd_with_one_sample_scores_the_single_weight() {
    let m = model(7);
    let src = TokenBatch::from_rows(&rows(&[5, 3], 46), 0).unwrap();
    let cfg = DecodeConfig { method: Method::Iwd, l: 2, r: 2, k_iwd: 1, temperature: 0.8, ..DecodeConfig::default() };
    let sc = iwd_candidates(&m, &src, &cfg).unwrap();
    let enc = m.encode(&src, &Ctx::eval()).unwrap();
    for (s, set) in sc.hypotheses.iter().enumerate() {
        for h in set {
            assert!(h.score.is_finite());
            let mut row = h.tokens.clone();
            row.resize(h.raw_length, EOS);
            let tgt = TokenBatch::from_rows(&[row], 0).unwrap();
            let w = importance_log_likelihood(&m, &enc, &[s], &tgt, 1, &mut NoiseRng::new(9)).unwrap();
            assert_eq!(w[0].len(), 1);
        }
    }
    let best = iwd_decode(&m, &src, &cfg).unwrap();
    for (set, pick) in sc.hypotheses.iter().zip(&best) {
        assert_eq!(pick.score, set.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max));
    }
}

#[test]
fn importance_estimate_tightens_with_more_samples() {
    let m = verify::quadrature_model(11).unwrap();
    let mut rng = NoiseRng::new(11);
    let (src, tgt) = verify::quadrature_input(&m, &mut rng).unwrap();
    let exact = verify::quadrature_log_marginal(&m, &src, &tgt, 241, &mut rng).unwrap();
    let enc = m.encode(&src, &Ctx::eval()).unwrap();
    let reps = 200;
    let mut gaps = Vec::new();
    for k in [1, 8, 64] {
        let tgt_r = tgt.select(&vec![0; reps]).unwrap();
        let w = importance_log_likelihood(&m, &enc, &vec![0; reps], &tgt_r, k, &mut rng).unwrap();
        let est: Vec<f64> = w.iter().map(|ws| log_mean_exp(ws)).collect();
        let mean = est.iter().sum::<f64>() / reps as f64;
        if k == 1 {
            // One sample gives an unbiased estimate of the ELBO.
            let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
            assert!((mean - exact.elbo).abs() < 4.0 * sd / (reps as f64).sqrt(), "{mean} vs ELBO {}", exact.elbo);
        }
        gaps.push(exact.log_marginal - mean);
    }
    assert!(gaps.iter().all(|&g| g > -0.05), "estimate above log-likelihood: {gaps:?}");
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    assert!(gaps[2] < 0.5 * gaps[0], "{gaps:?}");
    assert!(exact.log_marginal - exact.elbo >= -1e-6);
}

#[test]
fn beam_of_one_is_greedy() {
    let r = ar(VOCAB);
    let src_rows = rows(&[4, 6], 47);
    let src = TokenBatch::from_rows(&src_rows, 0).unwrap();
    let beam = r.beam_search(&src, 1).unwrap();
    let enc = r.encode(&src, &Ctx::eval()).unwrap();
    for i in 0..2 {
        let e = enc.select(&[i]).unwrap();
        let cap = src.lengths[i] + 6;
        let mut out: Vec<u32> = Vec::new();
        loop {
            let prev: Vec<u32> = std::iter::once(BOS).chain(out.iter().copied()).collect();
            let logits = r.logits(&TokenBatch::from_rows(&[prev], 0).unwrap(), &e, &Ctx::eval()).unwrap();
            let last = ops::to_f64_vec(&logits.narrow(1, out.len(), 1).unwrap()).unwrap();
            let tok = (0..VOCAB).max_by(|&a, &b| last[a].total_cmp(&last[b]).then(b.cmp(&a))).unwrap() as u32;
            out.push(tok);
            if tok == EOS || out.len() >= cap {
                break;
            }
        }
        let raw_len = out.len();
        let trimmed = flowseq_core::decoding::trim_at_eos(&out);
        assert_eq!(beam[i].tokens, trimmed, "row {i}");
        assert_eq!(beam[i].raw_length, raw_len);
    }
}

#[test]
fn rescorer_score_is_mean_token_log_probability() {
    let r = ar(VOCAB);
    let src = TokenBatch::from_rows(&rows(&[5], 48), 0).unwrap();
    let enc = r.encode(&src, &Ctx::eval()).unwrap();
    let cand: Vec<u32> = vec![6, 9, 4];
    let got = r.score(&enc, &[0], std::slice::from_ref(&cand)).unwrap()[0];
    let full: Vec<u32> = cand.iter().copied().chain([EOS]).collect();
    let prev: Vec<u32> = std::iter::once(BOS).chain(cand.iter().copied()).collect();
    let logits = r.logits(&TokenBatch::from_rows(&[prev], 0).unwrap(), &enc, &Ctx::eval()).unwrap();
    let lp = ops::to_f64_vec(&ops::log_softmax(&logits).unwrap()).unwrap();
    let sum: f64 = full.iter().enumerate().map(|(t, &y)| lp[t * VOCAB + y as usize]).sum();
    assert!((got - sum / 4.0).abs() < 1e-9);
}

#[test]
fn frozen_view_shares_parameters() {
    let m = model(8);
    let f = m.frozen().unwrap();
    let src = TokenBatch::from_rows(&rows(&[4, 9], 49), 0).unwrap();
    let enc_a = m.encode(&src, &Ctx::eval()).unwrap();
    let enc_b = f.encode(&src, &Ctx::eval()).unwrap();
    assert_eq!(ops::to_f64_vec(&enc_a.states).unwrap(), ops::to_f64_vec(&enc_b.states).unwrap());
    assert_eq!(tokens(&argmax_decode(&m, &src).unwrap()), tokens(&argmax_decode(&f, &src).unwrap()));
    m.store.perturb(&mut NoiseRng::new(1), 0.5, |n| n.starts_with("encoder/")).unwrap();
    let enc_a = m.encode(&src, &Ctx::eval()).unwrap();
    let enc_b = f.encode(&src, &Ctx::eval()).unwrap();
    assert_eq!(ops::to_f64_vec(&enc_a.states).unwrap(), ops::to_f64_vec(&enc_b.states).unwrap());
    assert!(f.store.is_frozen() && !m.store.is_frozen());
}
