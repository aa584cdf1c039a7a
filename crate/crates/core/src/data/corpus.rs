use std::path::Path;

use crate::compute::NoiseRng;
use crate::{Error, Result};

/// Where a corpus came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    File { src: String, tgt: String },
    Synthetic { task: SynthTask, seed: u64 },
}

/// Aligned source/target sentence pairs, whitespace tokenized.
#[derive(Debug, Clone)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
    pub provenance: Provenance,
}

/// Outcome counters from loading a corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub kept: usize,
    pub empty: usize,
    pub too_long: usize,
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

impl ParallelCorpus {
    /// Reads line-aligned source and target files, dropping pairs with an
    /// empty side or with more than `max_src_len` / `max_tgt_len` tokens.
    pub fn from_files(src: &Path, tgt: &Path, max_src_len: usize, max_tgt_len: usize) -> Result<(Self, LoadStats)> {
        let s = read_lines(src)?;
        let t = read_lines(tgt)?;
        if s.len() != t.len() {
            return Err(Error::Data(format!(
                "{} has {} lines but {} has {}",
                src.display(),
                s.len(),
                tgt.display(),
                t.len()
            )));
        }
        let mut stats = LoadStats::default();
        let mut pairs = Vec::with_capacity(s.len());
        for (a, b) in s.iter().zip(&t) {
            let (a, b) = (tokenize(a), tokenize(b));
            if a.is_empty() || b.is_empty() {
                stats.empty += 1;
            } else if a.len() > max_src_len || b.len() > max_tgt_len {
                stats.too_long += 1;
            } else {
                pairs.push((a, b));
            }
        }
        stats.kept = pairs.len();
        if pairs.is_empty() {
            return Err(Error::Data(format!("no usable sentence pairs in {}", src.display())));
        }
        let provenance = Provenance::File {
            src: src.display().to_string(),
            tgt: tgt.display().to_string(),
        };
        Ok((Self { pairs, provenance }, stats))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|p| p.0.as_slice())
    }

    pub fn targets(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|p| p.1.as_slice())
    }

    /// Splits off the last `n` pairs (e.g. as a dev set).
    pub fn split_tail(mut self, n: usize) -> (Self, Self) {
        let at = self.pairs.len().saturating_sub(n);
        let tail = self.pairs.split_off(at);
        let prov = self.provenance.clone();
        (
            self,
            Self {
                pairs: tail,
                provenance: prov,
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthTask {
    Copy,
    Reverse,
    Sort,
    LexicalSwap,
}

crate::kv_enum!(SynthTask {
    Copy => "copy",
    Reverse => "reverse",
    Sort => "sort",
    LexicalSwap => "lexical-swap",
});

const SWAP_STREAM: u64 = 0x5357_4150;
const SENTENCE_STREAM: u64 = 0x5345_4e54;

/// Token permutation used by the lexical-swap task: `map[i]` is the image of
/// token id `i + 4`, as an id.
pub fn lexical_swap_map(vocab_size: usize, seed: u64) -> Vec<usize> {
    let mut rng = NoiseRng::new(seed).fork(SWAP_STREAM);
    let mut ids: Vec<usize> = (4..vocab_size).collect();
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), rng.as_rng());
    ids
}

/// Generates `n` pairs over the tokens `"4" .. vocab_size-1` with source
/// lengths drawn uniformly from `len_range` (inclusive).
pub fn synth_corpus(task: SynthTask, vocab_size: usize, len_range: (usize, usize), n: usize, seed: u64) -> Result<ParallelCorpus> {
    if vocab_size <= 4 {
        return Err(Error::Data(format!("synthetic vocab_size must exceed 4, got {vocab_size}")));
    }
    if n == 0 {
        return Err(Error::Data("synthetic corpus size must be at least 1".into()));
    }
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(Error::Data(format!("degenerate length range [{lo}, {hi}]")));
    }
    let swap = lexical_swap_map(vocab_size, seed);
    let mut rng = NoiseRng::new(seed).fork(SENTENCE_STREAM);
    let n_tokens = vocab_size - 4;
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let len = lo + rng.below(hi - lo + 1);
        let src: Vec<usize> = (0..len).map(|_| 4 + rng.below(n_tokens)).collect();
        let tgt: Vec<usize> = match task {
            SynthTask::Copy => src.clone(),
            SynthTask::Reverse => src.iter().rev().copied().collect(),
            SynthTask::Sort => {
                let mut s = src.clone();
                s.sort_unstable();
                s
            }
            SynthTask::LexicalSwap => src.iter().map(|&t| swap[t - 4]).collect(),
        };
        let words = |v: Vec<usize>| v.into_iter().map(|t| t.to_string()).collect::<Vec<_>>();
        pairs.push((words(src), words(tgt)));
    }
    Ok(ParallelCorpus {
        pairs,
        provenance: Provenance::Synthetic { task, seed },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn joined(v: &[String]) -> String {
        v.join(" ")
    }

    #[test]
    fn reverse_and_copy_tasks() {
        let c = synth_corpus(SynthTask::Reverse, 10, (3, 3), 20, 1).unwrap();
        for (s, t) in &c.pairs {
            let mut r = s.clone();
            r.reverse();
            assert_eq!(&r, t);
        }
        let c = synth_corpus(SynthTask::Copy, 10, (1, 5), 20, 1).unwrap();
        assert!(c.pairs.iter().all(|(s, t)| s == t));
    }

    #[test]
    fn sort_task_sorts_numerically() {
        let c = synth_corpus(SynthTask::Sort, 40, (6, 6), 10, 2).unwrap();
        for (_, t) in &c.pairs {
            let ids: Vec<usize> = t.iter().map(|x| x.parse().unwrap()).collect();
            assert!(ids.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn lexical_swap_is_a_fixed_bijection() {
        let a = synth_corpus(SynthTask::LexicalSwap, 32, (4, 8), 50, 7).unwrap();
        let b = synth_corpus(SynthTask::LexicalSwap, 32, (4, 8), 50, 7).unwrap();
        for (x, y) in a.pairs.iter().zip(&b.pairs) {
            assert_eq!(joined(&x.0), joined(&y.0));
            assert_eq!(joined(&x.1), joined(&y.1));
        }
        let mut map = lexical_swap_map(32, 7);
        map.sort_unstable();
        assert_eq!(map, (4..32).collect::<Vec<_>>());
    }

    #[test]
    fn degenerate_ranges_rejected() {
        assert!(synth_corpus(SynthTask::Copy, 10, (5, 3), 1, 0).is_err());
        assert!(synth_corpus(SynthTask::Copy, 10, (0, 3), 1, 0).is_err());
        assert!(synth_corpus(SynthTask::Copy, 4, (1, 3), 1, 0).is_err());
    }

    #[test]
    fn file_loading_filters() {
        let dir = tempfile::tempdir().unwrap();
        let s = dir.path().join("s.txt");
        let t = dir.path().join("t.txt");
        std::fs::write(&s, "a b\n\nc d e f\ng\n").unwrap();
        std::fs::write(&t, "x\ny\nz\nw w\n").unwrap();
        let (c, stats) = ParallelCorpus::from_files(&s, &t, 3, 3).unwrap();
        assert_eq!(stats, LoadStats { kept: 2, empty: 1, too_long: 1 });
        assert_eq!(c.pairs[1].1, vec!["w".to_string(), "w".to_string()]);
    }
}
