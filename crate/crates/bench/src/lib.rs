//! Shared fixtures for the criterion benches under `benches/`.

use flowseq_core::compute::NoiseRng;
use flowseq_core::data::{build_vocabs, encode_corpus, make_batch, synth_corpus, EncodedPair, SynthTask};
use flowseq_core::model::{FlowSeq, FlowSeqConfig, Preset};

/// Lexical-swap pairs with the given target length range.
pub fn corpus(n: usize, lengths: (usize, usize), seed: u64) -> Vec<EncodedPair> {
    let c = synth_corpus(SynthTask::LexicalSwap, 64, lengths, n, seed).expect("synthetic corpus");
    let (sv, tv) = build_vocabs(&c, 1, false).expect("vocabularies");
    encode_corpus(&c, &sv, &tv)
}

/// Untrained tiny-preset model with an initialized flow, as an inference view.
pub fn tiny_model(seed: u64) -> FlowSeq {
    let pairs = corpus(64, (4, 16), seed);
    let mut cfg = FlowSeqConfig::preset(Preset::Tiny);
    cfg.model.src_vocab = 64;
    cfg.model.tgt_vocab = 64;
    let model = FlowSeq::new(cfg, seed).expect("model");
    let (src, tgt) = make_batch(&pairs, model.config.flow.n_scales).expect("batch");
    model.initialize_flow(&src, &tgt, &mut NoiseRng::new(seed)).expect("flow init");
    model.frozen().expect("frozen view")
}
