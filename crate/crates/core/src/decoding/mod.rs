//! Inference: argmax decoding, noisy parallel decoding with autoregressive
//! rescoring, importance-weighted decoding, and the autoregressive baseline.

mod ar;

pub use ar::{ArConfig, ArModel};

use std::collections::HashMap;
use std::time::Instant;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::compute::{ops, NoiseRng};
use crate::data::{padded_length, EncodedPair, TokenBatch, EOS, PAD};
use crate::model::FlowSeq;
use crate::nets::{class_difference, length_mask, ranked_length_classes, sample_posterior, Ctx, SourceEncoding, LENGTH_CLASSES};
use crate::training::sequence_log_likelihood;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Argmax,
    Npd,
    Iwd,
}

crate::kv_enum!(Method {
    Argmax => "argmax",
    Npd => "npd",
    Iwd => "iwd",
});

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub method: Method,
    /// Length candidates per sentence.
    pub l: usize,
    /// Latent samples per length candidate.
    pub r: usize,
    pub temperature: f64,
    /// Importance samples per candidate.
    pub k_iwd: usize,
    /// Beam width of the autoregressive baseline.
    pub beam: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            method: Method::Argmax,
            l: 1,
            r: 1,
            temperature: 0.4,
            k_iwd: 8,
            beam: 5,
            seed: 1,
        }
    }
}

crate::kv_section!(DecodeConfig, "decode", { method, l, r, temperature, k_iwd, beam, seed });

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l < 1 || self.l > LENGTH_CLASSES {
            return Err(Error::Config(format!("decode.l must lie in [1, {LENGTH_CLASSES}], got {}", self.l)));
        }
        if self.r < 1 || self.k_iwd < 1 || self.beam < 1 {
            return Err(Error::Config("decode.r, decode.k_iwd and decode.beam must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("decode.temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// One decoded sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Output tokens up to (excluding) the first EOS.
    pub tokens: Vec<u32>,
    /// Length of the latent sequence / raw output the tokens came from.
    pub raw_length: usize,
    pub score: f64,
    pub latency_seconds: f64,
}

/// Tokens before the first EOS or PAD.
pub fn trim_at_eos(ids: &[u32]) -> Vec<u32> {
    ids.iter().copied().take_while(|&t| t != EOS && t != PAD).collect()
}

/// Top-`l` distinct target lengths per sentence. Each class maps to
/// `max(1, T_src + diff)` rounded up to a multiple of `2^(S-1)`; a class
/// that repeats an earlier length is skipped in favor of the next one.
pub fn length_candidates(model: &FlowSeq, enc: &SourceEncoding, l: usize) -> Result<Vec<Vec<usize>>> {
    let logits = model.length_logits(enc)?;
    let scores = ops::to_f64_vec(&logits)?;
    let mult = model.config.flow.n_scales;
    let max_pos = model.config.model.max_positions;
    Ok(enc
        .lengths
        .iter()
        .enumerate()
        .map(|(i, &src_len)| {
            let row = &scores[i * LENGTH_CLASSES..(i + 1) * LENGTH_CLASSES];
            let mut out: Vec<usize> = Vec::with_capacity(l);
            for class in ranked_length_classes(row) {
                let t = (src_len as i64 + class_difference(class)).max(1) as usize;
                let t = padded_length(t, mult).min(max_pos / model.length_multiple() * model.length_multiple());
                if !out.contains(&t) {
                    out.push(t);
                }
                if out.len() == l {
                    break;
                }
            }
            out
        })
        .collect())
}

/// A batch of latent candidates: `owner[i]` is the source row of candidate `i`.
struct Candidates {
    owner: Vec<usize>,
    lengths: Vec<usize>,
    raw: Vec<Vec<u32>>,
    prior_log_prob: Vec<f64>,
}

/// Samples (or takes the mode of) latents for every (sentence, length,
/// sample) triple and decodes all of them in a single decoder pass.
fn generate(model: &FlowSeq, enc: &SourceEncoding, lengths: &[Vec<usize>], r: usize, temperature: Option<f64>, rng: &mut NoiseRng) -> Result<Candidates> {
    let mut owner = Vec::new();
    let mut lens = Vec::new();
    for (i, ls) in lengths.iter().enumerate() {
        for &t in ls {
            for _ in 0..r {
                owner.push(i);
                lens.push(t);
            }
        }
    }
    let cenc = enc.select(&owner)?;
    let sample = match temperature {
        Some(tau) => model.prior_sample(&cenc, &lens, tau, rng)?,
        None => model.prior_mode(&cenc, &lens)?,
    };
    let logits = model.decode_logits(&sample.z, &sample.mask, &cenc)?;
    let ids = logits.argmax(D::Minus1)?.to_dtype(candle_core::DType::U32)?;
    let ids = ids.to_vec2::<u32>()?;
    let raw = ids.into_iter().zip(&lens).map(|(row, &t)| row[..t].to_vec()).collect();
    Ok(Candidates {
        owner,
        lengths: lens,
        raw,
        prior_log_prob: ops::to_f64_vec(&sample.log_prob)?,
    })
}

fn stamp(hyps: &mut [Hypothesis], start: Instant) {
    let per = start.elapsed().as_secs_f64() / hyps.len().max(1) as f64;
    for h in hyps {
        h.latency_seconds = per;
    }
}

/// Decodes from the zero-temperature latent path at the single most likely
/// length. The score is the prior log-density of that path.
pub fn argmax_decode(model: &FlowSeq, src: &TokenBatch) -> Result<Vec<Hypothesis>> {
    let start = Instant::now();
    let enc = model.encode(src, &Ctx::eval())?;
    let lengths = length_candidates(model, &enc, 1)?;
    let c = generate(model, &enc, &lengths, 1, None, &mut NoiseRng::new(0))?;
    let mut hyps: Vec<Hypothesis> = (0..c.owner.len())
        .map(|i| Hypothesis {
            tokens: trim_at_eos(&c.raw[i]),
            raw_length: c.lengths[i],
            score: c.prior_log_prob[i],
            latency_seconds: 0.0,
        })
        .collect();
    stamp(&mut hyps, start);
    Ok(hyps)
}

/// Unique trimmed candidates per sentence. Among duplicates the one with
/// the higher prior density is kept.
fn dedup(c: &Candidates, n: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut seen: Vec<HashMap<Vec<u32>, usize>> = vec![HashMap::new(); n];
    for i in 0..c.owner.len() {
        let s = c.owner[i];
        let key = trim_at_eos(&c.raw[i]);
        match seen[s].get(&key) {
            Some(&slot) => {
                let j = out[s][slot];
                if c.prior_log_prob[i] > c.prior_log_prob[j] {
                    out[s][slot] = i;
                }
            }
            None => {
                seen[s].insert(key, out[s].len());
                out[s].push(i);
            }
        }
    }
    out
}

/// Every unique candidate of one NPD/IWD call with its selection score.
#[derive(Debug, Clone)]
pub struct ScoredCandidates {
    pub hypotheses: Vec<Vec<Hypothesis>>,
    /// Candidates generated per sentence before deduplication.
    pub generated: usize,
}

/// Noisy parallel decoding: `l x r` latent samples per sentence decoded in
/// one pass, deduplicated, and ranked by the autoregressive rescorer's
/// length-normalized log-probability.
pub fn npd_candidates(model: &FlowSeq, src: &TokenBatch, cfg: &DecodeConfig, rescorer: &ArModel) -> Result<ScoredCandidates> {
    cfg.validate()?;
    if rescorer.tgt_vocab() != model.config.model.tgt_vocab {
        return Err(Error::VocabMismatch(format!(
            "rescorer has {} target tokens, model has {}",
            rescorer.tgt_vocab(),
            model.config.model.tgt_vocab
        )));
    }
    let enc = model.encode(src, &Ctx::eval())?;
    let lengths = length_candidates(model, &enc, cfg.l)?;
    let mut rng = NoiseRng::new(cfg.seed);
    let c = generate(model, &enc, &lengths, cfg.r, Some(cfg.temperature), &mut rng)?;
    let groups = dedup(&c, src.batch_size());
    let flat: Vec<usize> = groups.iter().flatten().copied().collect();
    let cands: Vec<Vec<u32>> = flat.iter().map(|&i| trim_at_eos(&c.raw[i])).collect();
    let owners: Vec<usize> = flat.iter().map(|&i| c.owner[i]).collect();
    let ar_enc = rescorer.encode(src, &Ctx::eval())?;
    let scores = rescorer.score(&ar_enc, &owners, &cands)?;
    let mut hyps: Vec<Vec<Hypothesis>> = vec![Vec::new(); src.batch_size()];
    for (k, &i) in flat.iter().enumerate() {
        hyps[c.owner[i]].push(Hypothesis {
            tokens: cands[k].clone(),
            raw_length: c.lengths[i],
            score: scores[k],
            latency_seconds: 0.0,
        });
    }
    Ok(ScoredCandidates {
        hypotheses: hyps,
        generated: cfg.l * cfg.r,
    })
}

fn pick_best(sets: Vec<Vec<Hypothesis>>, start: Instant) -> Vec<Hypothesis> {
    let mut best: Vec<Hypothesis> = sets
        .into_iter()
        .map(|set| {
            set.into_iter()
                .reduce(|a, b| if b.score > a.score { b } else { a })
                .unwrap_or(Hypothesis {
                    tokens: vec![],
                    raw_length: 0,
                    score: f64::NEG_INFINITY,
                    latency_seconds: 0.0,
                })
        })
        .collect();
    stamp(&mut best, start);
    best
}

pub fn npd_decode(model: &FlowSeq, src: &TokenBatch, cfg: &DecodeConfig, rescorer: &ArModel) -> Result<Vec<Hypothesis>> {
    let start = Instant::now();
    let sc = npd_candidates(model, src, cfg, rescorer)?;
    Ok(pick_best(sc.hypotheses, start))
}

/// `log (1/K) sum_k exp(w_k)`, computed stably.
pub fn log_mean_exp(w: &[f64]) -> f64 {
    let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + (w.iter().map(|x| (x - m).exp()).sum::<f64>() / w.len() as f64).ln()
}

/// Importance-weighted estimates of `log P(y_i | x)` with `k` posterior
/// samples each: `log (1/K) sum_k P(y|z_k,x) p(z_k|x) / q(z_k|y,x)`.
/// `tgt` rows are full latent-length sequences (EOS-filled) and
/// `src_rows[i]` names the source row of `tgt` row `i`.
pub fn importance_log_likelihood(model: &FlowSeq, enc: &SourceEncoding, src_rows: &[usize], tgt: &TokenBatch, k: usize, rng: &mut NoiseRng) -> Result<Vec<Vec<f64>>> {
    let n = tgt.batch_size();
    let rep: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let tgt_k = tgt.select(&rep)?;
    let rows: Vec<usize> = rep.iter().map(|&i| src_rows[i]).collect();
    let cenc = enc.select(&rows)?;
    let post = model.posterior_params(&tgt_k, &cenc, 0.0, &Ctx::eval())?;
    let mask = tgt_k.mask_tensor(model.dtype())?;
    let (z, log_q) = sample_posterior(&post, &mask, rng)?;
    let logits = model.decode_logits(&z, &mask, &cenc)?;
    let log_lik = sequence_log_likelihood(&logits, &tgt_k)?;
    let log_p = model.prior_log_density(&z, &mask, &cenc)?;
    let w = ops::to_f64_vec(&((log_lik + log_p)? - log_q)?)?;
    Ok(w.chunks(k).map(<[f64]>::to_vec).collect())
}

/// Importance-weighted decoding: candidates as in NPD, ranked by a
/// `k_iwd`-sample importance estimate of their marginal likelihood.
/// Candidates whose weights are all non-finite are dropped.
pub fn iwd_candidates(model: &FlowSeq, src: &TokenBatch, cfg: &DecodeConfig) -> Result<ScoredCandidates> {
    cfg.validate()?;
    let enc = model.encode(src, &Ctx::eval())?;
    let lengths = length_candidates(model, &enc, cfg.l)?;
    let mut rng = NoiseRng::new(cfg.seed);
    let c = generate(model, &enc, &lengths, cfg.r, Some(cfg.temperature), &mut rng)?;
    let groups = dedup(&c, src.batch_size());
    let flat: Vec<usize> = groups.iter().flatten().copied().collect();
    let canonical: Vec<Vec<u32>> = flat
        .iter()
        .map(|&i| {
            let mut row = trim_at_eos(&c.raw[i]);
            row.resize(c.lengths[i], EOS);
            row
        })
        .collect();
    let tgt = TokenBatch::from_rows(&canonical, 0)?;
    let owners: Vec<usize> = flat.iter().map(|&i| c.owner[i]).collect();
    let weights = importance_log_likelihood(model, &enc, &owners, &tgt, cfg.k_iwd, &mut rng.fork(0x1d))?;
    let mut hyps: Vec<Vec<Hypothesis>> = vec![Vec::new(); src.batch_size()];
    for (k, &i) in flat.iter().enumerate() {
        let finite: Vec<f64> = weights[k].iter().copied().filter(|w| w.is_finite()).collect();
        if finite.is_empty() {
            log::warn!("dropping candidate {k} of sentence {}: no finite importance weight", c.owner[i]);
            continue;
        }
        if finite.len() < weights[k].len() {
            log::warn!("candidate {k} of sentence {}: ignoring non-finite importance weights", c.owner[i]);
        }
        hyps[c.owner[i]].push(Hypothesis {
            tokens: trim_at_eos(&c.raw[i]),
            raw_length: c.lengths[i],
            score: log_mean_exp(&finite),
            latency_seconds: 0.0,
        });
    }
    Ok(ScoredCandidates {
        hypotheses: hyps,
        generated: cfg.l * cfg.r,
    })
}

pub fn iwd_decode(model: &FlowSeq, src: &TokenBatch, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    let start = Instant::now();
    let sc = iwd_candidates(model, src, cfg)?;
    Ok(pick_best(sc.hypotheses, start))
}

/// Raw per-position argmax tokens for `l x r` prior samples per sentence,
/// decoded in one pass; rows follow (sentence, length, sample) order.
pub fn sample_translations(model: &FlowSeq, src: &TokenBatch, cfg: &DecodeConfig) -> Result<Vec<Vec<Vec<u32>>>> {
    cfg.validate()?;
    let enc = model.encode(src, &Ctx::eval())?;
    let lengths = length_candidates(model, &enc, cfg.l)?;
    let c = generate(model, &enc, &lengths, cfg.r, Some(cfg.temperature), &mut NoiseRng::new(cfg.seed))?;
    let mut out = vec![Vec::new(); src.batch_size()];
    for i in 0..c.owner.len() {
        out[c.owner[i]].push(trim_at_eos(&c.raw[i]));
    }
    Ok(out)
}

/// Decodes with latents drawn from the posterior of the gold targets
/// (reconstruction), or its mean when `rng` is `None`.
pub fn reconstruct(model: &FlowSeq, src: &TokenBatch, tgt: &TokenBatch, rng: Option<&mut NoiseRng>) -> Result<Vec<Vec<u32>>> {
    let enc = model.encode(src, &Ctx::eval())?;
    let post = model.posterior_params(tgt, &enc, 0.0, &Ctx::eval())?;
    let mask = tgt.mask_tensor(model.dtype())?;
    let z = match rng {
        Some(r) => sample_posterior(&post, &mask, r)?.0,
        None => post.mu.clone(),
    };
    let logits = model.decode_logits(&z, &mask, &enc)?;
    let ids = logits.argmax(D::Minus1)?.to_dtype(candle_core::DType::U32)?.to_vec2::<u32>()?;
    Ok(ids
        .into_iter()
        .zip(&tgt.lengths)
        .map(|(row, &t)| trim_at_eos(&row[..t]))
        .collect())
}

/// Dispatches on `cfg.method`; NPD requires a rescorer.
pub fn translate(model: &FlowSeq, src: &TokenBatch, cfg: &DecodeConfig, rescorer: Option<&ArModel>) -> Result<Vec<Hypothesis>> {
    match cfg.method {
        Method::Argmax => argmax_decode(model, src),
        Method::Npd => {
            let r = rescorer.ok_or_else(|| Error::Config("noisy parallel decoding needs an autoregressive rescorer".into()))?;
            npd_decode(model, src, cfg, r)
        }
        Method::Iwd => iwd_decode(model, src, cfg),
    }
}

/// Re-translates the sources of `pairs` with the autoregressive model,
/// replacing targets by its beam outputs (self-distillation).
pub fn distill_pairs(teacher: &ArModel, pairs: &[EncodedPair], beam: usize, batch: usize) -> Result<Vec<EncodedPair>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch.max(1)) {
        let rows: Vec<Vec<u32>> = chunk.iter().map(|p| p.src.clone()).collect();
        let src = TokenBatch::from_rows(&rows, 0)?;
        for (p, h) in chunk.iter().zip(teacher.beam_search(&src, beam)?) {
            let mut tgt = h.tokens;
            tgt.push(EOS);
            out.push(EncodedPair { src: p.src.clone(), tgt });
        }
    }
    Ok(out)
}

/// `[b, t]` mask for the given lengths in the model's dtype.
pub fn candidate_mask(model: &FlowSeq, lengths: &[usize]) -> Result<Tensor> {
    let t = lengths.iter().copied().max().unwrap_or(0);
    length_mask(lengths, t, model.dtype())
}
