use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Corpus BLEU-4 with its sufficient statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    /// Orders (2..=4) whose precision was zero and received add-one smoothing.
    pub smoothed: Vec<usize>,
}

/// Clipped n-gram matches and totals per order, plus lengths, summed over
/// sentences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngrams<T: Eq + std::hash::Hash + Clone>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

impl BleuStats {
    /// Adds one hypothesis against one or more references. Counts are
    /// clipped by the maximum reference count; the reference length is the
    /// one closest to the hypothesis length (shorter on ties).
    pub fn add<T: Eq + std::hash::Hash + Clone>(&mut self, hyp: &[T], refs: &[&[T]]) {
        for n in 1..=MAX_ORDER {
            let h = ngrams(hyp, n);
            let mut max_ref: HashMap<&[T], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            self.matches[n - 1] += h.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum::<usize>();
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
        self.hyp_len += hyp.len();
        self.ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap_or(0);
    }

    pub fn report(&self) -> BleuReport {
        let mut precisions = [0.0; MAX_ORDER];
        let mut smoothed = Vec::new();
        for n in 0..MAX_ORDER {
            let (m, t) = (self.matches[n], self.totals[n]);
            precisions[n] = if n > 0 && m == 0 {
                smoothed.push(n + 1);
                1.0 / (t + 1) as f64
            } else if t == 0 {
                0.0
            } else {
                m as f64 / t as f64
            };
        }
        let brevity_penalty = if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        let bleu = if precisions[0] == 0.0 {
            0.0
        } else {
            let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
            (100.0 * brevity_penalty * mean_log.exp()).clamp(0.0, 100.0)
        };
        BleuReport {
            bleu,
            precisions,
            brevity_penalty,
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
            smoothed,
        }
    }
}

/// Case-sensitive token-level corpus BLEU-4 against single references.
pub fn corpus_bleu<T: Eq + std::hash::Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<BleuReport> {
    if hyps.is_empty() {
        return Err(Error::Data("BLEU needs at least one hypothesis".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        stats.add(h, &[r.as_slice()]);
    }
    Ok(stats.report())
}

/// Corpus BLEU with several references per sentence.
pub fn multi_ref_bleu<T: Eq + std::hash::Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<Vec<T>>]) -> Result<BleuReport> {
    if hyps.is_empty() {
        return Err(Error::Data("BLEU needs at least one hypothesis".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!("{} hypotheses but {} reference sets", hyps.len(), refs.len())));
    }
    let mut stats = BleuStats::default();
    for (h, rs) in hyps.iter().zip(refs) {
        if rs.is_empty() {
            return Err(Error::Data("sentence without references".into()));
        }
        let rs: Vec<&[T]> = rs.iter().map(Vec::as_slice).collect();
        stats.add(h, &rs);
    }
    Ok(stats.report())
}

/// BLEU of a single hypothesis against a single reference.
pub fn sentence_bleu<T: Eq + std::hash::Hash + Clone>(hyp: &[T], reference: &[T]) -> f64 {
    let mut stats = BleuStats::default();
    stats.add(hyp, &[reference]);
    stats.report().bleu
}

/// Mean sentence BLEU over all ordered pairs `(h_i, h_j)`, `i != j`, of each
/// sentence's hypothesis set, averaged across sentences. Every set must hold
/// exactly `m` hypotheses.
pub fn pairwise_bleu<T: Eq + std::hash::Hash + Clone>(sets: &[Vec<Vec<T>>], m: usize) -> Result<f64> {
    if m < 2 {
        return Err(Error::Config(format!("pairwise BLEU needs at least 2 hypotheses per sentence, got {m}")));
    }
    if sets.is_empty() {
        return Err(Error::Data("pairwise BLEU needs at least one sentence".into()));
    }
    let mut total = 0.0;
    for (s, set) in sets.iter().enumerate() {
        if set.len() != m {
            return Err(Error::Data(format!("sentence {s} has {} hypotheses, expected {m}", set.len())));
        }
        let mut sum = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    sum += sentence_bleu(&set[i], &set[j]);
                }
            }
        }
        total += sum / (m * (m - 1)) as f64;
    }
    Ok(total / sets.len() as f64)
}

/// Quality of a hypothesis set against multiple references: the `j`-th
/// hypotheses of all sentences form a corpus scored by multi-reference BLEU,
/// and the result is averaged over `j`.
pub fn loo_bleu<T: Eq + std::hash::Hash + Clone>(sets: &[Vec<Vec<T>>], refs: &[Vec<Vec<T>>]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::Data("leave-one-out BLEU needs at least one sentence".into()));
    }
    if sets.len() != refs.len() {
        return Err(Error::Data(format!("{} hypothesis sets but {} reference sets", sets.len(), refs.len())));
    }
    for (s, rs) in refs.iter().enumerate() {
        if rs.len() < 2 {
            return Err(Error::Data(format!("sentence {s} has {} references, need at least 2", rs.len())));
        }
    }
    let m = sets[0].len();
    if m == 0 || sets.iter().any(|s| s.len() != m) {
        return Err(Error::Data("every sentence needs the same non-zero number of hypotheses".into()));
    }
    let mut total = 0.0;
    for j in 0..m {
        let hyps: Vec<Vec<T>> = sets.iter().map(|s| s[j].clone()).collect();
        total += multi_ref_bleu(&hyps, refs)?.bleu;
    }
    Ok(total / m as f64)
}

/// Fraction of aligned positions that agree, over `max(|hyp|, |ref|)` per
/// sentence.
pub fn token_accuracy<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hit += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += h.len().max(r.len());
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identical_is_100() {
        let h = vec![toks("the cat sat on the mat"), toks("a b c d e")];
        let r = corpus_bleu(&h, &h).unwrap();
        assert!((r.bleu - 100.0).abs() < 1e-9);
        assert_eq!(r.brevity_penalty, 1.0);
        assert!(r.smoothed.is_empty());
    }

    #[test]
    fn single_token_match_is_smoothed_100() {
        let r = corpus_bleu(&[toks("x")], &[toks("x")]).unwrap();
        assert!((r.bleu - 100.0).abs() < 1e-9);
        assert_eq!(r.smoothed, vec![2, 3, 4]);
    }

    #[test]
    fn empty_set_errors() {
        assert!(corpus_bleu::<String>(&[], &[]).is_err());
    }

    #[test]
    fn brevity_penalty_short_hyp() {
        let r = corpus_bleu(&[toks("a b c d")], &[toks("a b c d e f g h")]).unwrap();
        assert!((r.brevity_penalty - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn pairwise_extremes() {
        let same = vec![vec![toks("a b c d"), toks("a b c d"), toks("a b c d")]];
        assert!((pairwise_bleu(&same, 3).unwrap() - 100.0).abs() < 1e-9);
        let disjoint = vec![vec![toks("a b c"), toks("d e f")]];
        assert_eq!(pairwise_bleu(&disjoint, 2).unwrap(), 0.0);
        assert!(pairwise_bleu(&disjoint, 3).is_err());
        assert!(pairwise_bleu(&disjoint, 1).is_err());
    }

    #[test]
    fn loo_repeated_hypothesis_equals_multi_ref() {
        let refs = vec![vec![toks("a b c d e"), toks("a b x d e")]];
        let h = toks("a b c d f");
        let sets = vec![vec![h.clone(), h.clone(), h.clone()]];
        let direct = multi_ref_bleu(&[h], &refs).unwrap().bleu;
        assert!((loo_bleu(&sets, &refs).unwrap() - direct).abs() < 1e-12);
        assert!(loo_bleu(&sets, &[vec![toks("a")]]).is_err());
    }

    #[test]
    fn accuracy_counts_length_mismatch() {
        assert_eq!(token_accuracy(&[vec![1, 2, 3]], &[vec![1, 2, 3, 4]]), 0.75);
    }
}
