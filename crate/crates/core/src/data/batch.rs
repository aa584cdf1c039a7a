use candle_core::{DType, Device, Tensor};

use crate::compute::NoiseRng;
use crate::data::{Vocabulary, EOS, PAD};
use crate::{Error, Result};

/// Padded token matrix `[batch, max_len]` with per-row lengths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    /// Row-major `[batch, max_len]`; positions at or past a row's length hold PAD.
    pub tokens: Vec<u32>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl TokenBatch {
    /// Right-pads `rows` with PAD to at least `min_len` and at least the
    /// longest row.
    pub fn from_rows(rows: &[Vec<u32>], min_len: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if rows.iter().any(Vec::is_empty) {
            return Err(Error::Data("empty sequence in batch".into()));
        }
        let max_len = rows.iter().map(Vec::len).max().unwrap_or(0).max(min_len);
        let mut tokens = vec![PAD; rows.len() * max_len];
        for (r, row) in rows.iter().enumerate() {
            tokens[r * max_len..r * max_len + row.len()].copy_from_slice(row);
        }
        Ok(Self {
            tokens,
            lengths: rows.iter().map(Vec::len).collect(),
            max_len,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.max_len..i * self.max_len + self.lengths[i]]
    }

    pub fn is_real(&self, b: usize, t: usize) -> bool {
        t < self.lengths[b]
    }

    /// `[batch, max_len]` with 1 at real positions and 0 at padding.
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.batch_size())
            .flat_map(|b| (0..self.max_len).map(move |t| (b, t)))
            .map(|(b, t)| self.is_real(b, t))
            .collect()
    }

    pub fn ids_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.tokens.clone(), (self.batch_size(), self.max_len), &Device::Cpu)?)
    }

    /// Real-position indicator `[batch, max_len]` as 0/1 floats.
    pub fn mask_tensor(&self, dtype: DType) -> Result<Tensor> {
        let m: Vec<f64> = self.pad_mask().into_iter().map(|r| if r { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::from_vec(m, (self.batch_size(), self.max_len), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn num_real(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Rows `indices` as a new batch, trimmed to the longest selected row.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<u32>> = indices.iter().map(|&i| self.row(i).to_vec()).collect();
        Self::from_rows(&rows, 0)
    }
}

/// A source/target pair already mapped to ids, each ending in EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

impl EncodedPair {
    pub fn encode(src: &[String], tgt: &[String], src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Self {
        Self {
            src: src_vocab.encode_with_eos(src),
            tgt: tgt_vocab.encode_with_eos(tgt),
        }
    }
}

/// Smallest multiple of `2^(num_scales-1)` that is at least `len`.
pub fn padded_length(len: usize, num_scales: usize) -> usize {
    let m = 1usize << num_scales.saturating_sub(1);
    len.div_ceil(m) * m
}

/// `row` extended with EOS up to [`padded_length`], guaranteeing a final EOS.
pub fn pad_with_eos(row: &[u32], num_scales: usize) -> Vec<u32> {
    let mut out = row.to_vec();
    if out.last() != Some(&EOS) {
        out.push(EOS);
    }
    out.resize(padded_length(out.len(), num_scales), EOS);
    out
}

/// Pads one group of pairs: sources with PAD, targets first with EOS to a
/// squeeze-compatible length and then with PAD. Rows keep their input order.
pub fn make_batch(pairs: &[EncodedPair], num_scales: usize) -> Result<(TokenBatch, TokenBatch)> {
    if num_scales == 0 {
        return Err(Error::Config("number of scales must be at least 1".into()));
    }
    let srcs: Vec<Vec<u32>> = pairs.iter().map(|p| p.src.clone()).collect();
    let tgts: Vec<Vec<u32>> = pairs.iter().map(|p| pad_with_eos(&p.tgt, num_scales)).collect();
    Ok((TokenBatch::from_rows(&srcs, 0)?, TokenBatch::from_rows(&tgts, 0)?))
}

#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub num_scales: usize,
    pub batch_sentences: usize,
    /// Cap on padded target tokens per batch.
    pub max_tokens: usize,
    /// Length caps in tokens, including the EOS marker.
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

/// Batches for one epoch plus the number of pairs dropped by the length caps.
#[derive(Debug, Clone)]
pub struct Epoch {
    pub batches: Vec<(TokenBatch, TokenBatch)>,
    pub skipped: usize,
}

/// Groups pairs into length-bucketed batches. The order is a pure function
/// of `(pairs, seed, epoch)`: pairs are shuffled, stably sorted by target
/// length (longest first), cut into batches, and the batch order shuffled.
pub fn epoch_batches(pairs: &[EncodedPair], cfg: &BatchConfig, seed: u64, epoch: u64) -> Result<Epoch> {
    if cfg.batch_sentences == 0 {
        return Err(Error::Config("batch_sentences must be at least 1".into()));
    }
    let mut skipped = 0;
    let mut idx: Vec<usize> = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        if p.src.len() > cfg.max_src_len || p.tgt.len() > cfg.max_tgt_len || p.src.is_empty() || p.tgt.is_empty() {
            skipped += 1;
        } else {
            idx.push(i);
        }
    }
    let mut rng = NoiseRng::new(seed).fork(epoch);
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), rng.as_rng());
    idx.sort_by_key(|&i| std::cmp::Reverse(padded_length(pairs[i].tgt.len(), cfg.num_scales)));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut cur_max = 0;
    for i in idx {
        let len = padded_length(pairs[i].tgt.len(), cfg.num_scales);
        let max = cur_max.max(len);
        if !cur.is_empty() && (cur.len() == cfg.batch_sentences || max * (cur.len() + 1) > cfg.max_tokens) {
            groups.push(std::mem::take(&mut cur));
            cur_max = 0;
        }
        cur_max = cur_max.max(len);
        cur.push(i);
    }
    if !cur.is_empty() {
        groups.push(cur);
    }
    rand::seq::SliceRandom::shuffle(groups.as_mut_slice(), rng.as_rng());
    let batches = groups
        .iter()
        .map(|g| make_batch(&g.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>(), cfg.num_scales))
        .collect::<Result<Vec<_>>>()?;
    Ok(Epoch { batches, skipped })
}

/// Target-length buckets for latency reporting: 1-10, 11-20, 21-30, 31-40, 41+.
pub const LENGTH_BUCKETS: [(usize, usize); 5] = [(1, 10), (11, 20), (21, 30), (31, 40), (41, usize::MAX)];

pub fn length_bucket(len: usize) -> usize {
    LENGTH_BUCKETS
        .iter()
        .position(|&(lo, hi)| len >= lo && len <= hi)
        .unwrap_or(0)
}

pub fn bucket_label(bucket: usize) -> String {
    match LENGTH_BUCKETS[bucket] {
        (lo, usize::MAX) => format!("{lo}+"),
        (lo, hi) => format!("{lo}-{hi}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(src_len: usize, tgt_len: usize) -> EncodedPair {
        let mut src = vec![4; src_len - 1];
        src.push(EOS);
        let mut tgt = vec![5; tgt_len - 1];
        tgt.push(EOS);
        EncodedPair { src, tgt }
    }

    #[test]
    fn target_of_five_pads_to_eight_with_three_scales() {
        let (_, t) = make_batch(&[pair(3, 5)], 3).unwrap();
        assert_eq!(t.lengths, vec![8]);
        assert_eq!(t.row(0), &[5, 5, 5, 5, EOS, EOS, EOS, EOS]);
    }

    #[test]
    fn target_of_eight_is_unchanged() {
        let (_, t) = make_batch(&[pair(3, 8)], 3).unwrap();
        assert_eq!(t.lengths, vec![8]);
        assert_eq!(t.row(0)[7], EOS);
    }

    #[test]
    fn single_scale_keeps_lengths() {
        let (s, t) = make_batch(&[pair(3, 5), pair(6, 2)], 1).unwrap();
        assert_eq!(t.lengths, vec![5, 2]);
        assert_eq!(s.max_len, 6);
        assert_eq!(s.row(0), &[4, 4, EOS]);
        assert_eq!(s.tokens[3..6], [PAD, PAD, PAD]);
    }

    #[test]
    fn caps_skip_and_count() {
        let pairs = vec![pair(3, 5), pair(30, 5), pair(3, 40)];
        let cfg = BatchConfig {
            num_scales: 2,
            batch_sentences: 8,
            max_tokens: 1000,
            max_src_len: 10,
            max_tgt_len: 10,
        };
        let e = epoch_batches(&pairs, &cfg, 0, 0).unwrap();
        assert_eq!(e.skipped, 2);
        assert_eq!(e.batches.len(), 1);
    }

    #[test]
    fn batches_sorted_by_length_and_deterministic() {
        let pairs: Vec<EncodedPair> = (0..40).map(|i| pair(2 + i % 7, 2 + (i * 5) % 11)).collect();
        let cfg = BatchConfig {
            num_scales: 2,
            batch_sentences: 6,
            max_tokens: 10_000,
            max_src_len: 100,
            max_tgt_len: 100,
        };
        let a = epoch_batches(&pairs, &cfg, 9, 3).unwrap();
        let b = epoch_batches(&pairs, &cfg, 9, 3).unwrap();
        assert_eq!(a.batches, b.batches);
        for (_, t) in &a.batches {
            assert!(t.lengths.windows(2).all(|w| w[0] >= w[1]));
            assert!(t.lengths.iter().all(|l| l % 2 == 0));
        }
        assert_eq!(a.batches.iter().map(|b| b.0.batch_size()).sum::<usize>(), 40);
    }

    #[test]
    fn buckets() {
        assert_eq!(length_bucket(1), 0);
        assert_eq!(length_bucket(10), 0);
        assert_eq!(length_bucket(11), 1);
        assert_eq!(length_bucket(40), 3);
        assert_eq!(length_bucket(41), 4);
        assert_eq!(bucket_label(4), "41+");
    }
}
