//! Corpora, vocabularies, batching, and synthetic tasks.

mod batch;
mod corpus;
mod vocab;

pub use batch::*;
pub use corpus::{lexical_swap_map, synth_corpus, tokenize, LoadStats, ParallelCorpus, Provenance, SynthTask};
pub use vocab::*;

use crate::Result;

/// Source and target vocabularies; with `shared` both sides use one table
/// built from the union of the corpus.
pub fn build_vocabs(corpus: &ParallelCorpus, min_count: usize, shared: bool) -> Result<(Vocabulary, Vocabulary)> {
    if shared {
        let v = Vocabulary::build(corpus.sources().chain(corpus.targets()), min_count)?;
        Ok((v.clone(), v))
    } else {
        Ok((
            Vocabulary::build(corpus.sources(), min_count)?,
            Vocabulary::build(corpus.targets(), min_count)?,
        ))
    }
}

/// Encodes every pair of `corpus`, appending EOS to both sides.
pub fn encode_corpus(corpus: &ParallelCorpus, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Vec<EncodedPair> {
    corpus
        .pairs
        .iter()
        .map(|(s, t)| EncodedPair::encode(s, t, src_vocab, tgt_vocab))
        .collect()
}
