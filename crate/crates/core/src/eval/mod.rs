//! BLEU, diversity metrics, and the decoding latency harness.

mod bleu;
mod latency;

pub use bleu::*;
pub use latency::*;
