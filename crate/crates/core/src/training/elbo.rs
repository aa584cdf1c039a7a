use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::compute::{ops, NoiseRng};
use crate::data::TokenBatch;
use crate::model::FlowSeq;
use crate::nets::{length_class, sample_posterior, Ctx, LENGTH_CLASSES};
use crate::{Error, Result};

/// Loss components of one batch. `recon_loss` and `kl_estimate` are per
/// target token; `elbo = -(recon_loss + kl_weight * kl_estimate)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub step: usize,
    pub recon_loss: f64,
    pub kl_estimate: f64,
    pub kl_weight: f64,
    pub length_loss: f64,
    pub elbo: f64,
    pub n_tokens: usize,
    pub n_sentences: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ElboSettings {
    pub kl_weight: f64,
    pub label_smoothing: f64,
    pub token_dropout: f64,
    /// Posterior samples averaged per sequence.
    pub kl_samples: usize,
}

/// Per-position negative log-likelihood `[b, t]` with label smoothing
/// `eps` spread uniformly over the vocabulary.
pub fn smoothed_nll(logits: &Tensor, targets: &Tensor, eps: f64) -> Result<Tensor> {
    let logp = ops::log_softmax(logits)?;
    let picked = logp.gather(&targets.unsqueeze(D::Minus1)?.contiguous()?, D::Minus1)?.squeeze(D::Minus1)?;
    let nll = picked.neg()?;
    if eps == 0.0 {
        return Ok(nll);
    }
    let uniform = logp.mean(D::Minus1)?.neg()?;
    Ok(((nll * (1.0 - eps))? + (uniform * eps)?)?)
}

/// `log P(y | z, x)` per sequence over real target positions.
pub fn sequence_log_likelihood(logits: &Tensor, tgt: &TokenBatch) -> Result<Tensor> {
    let mask = tgt.mask_tensor(logits.dtype())?;
    let nll = smoothed_nll(logits, &tgt.ids_tensor()?, 0.0)?;
    Ok((nll * mask)?.sum(D::Minus1)?.neg()?)
}

/// Cross-entropy of the length classifier against clamped true differences,
/// averaged over the batch.
pub fn length_loss(model: &FlowSeq, enc: &crate::nets::SourceEncoding, tgt: &TokenBatch) -> Result<Tensor> {
    let logits = model.length_logits(enc)?;
    let classes: Vec<u32> = enc
        .lengths
        .iter()
        .zip(&tgt.lengths)
        .map(|(&s, &t)| length_class(s, t) as u32)
        .collect();
    let n = classes.len();
    let idx = Tensor::from_vec(classes, (n, 1), logits.device())?;
    debug_assert_eq!(logits.dim(1)?, LENGTH_CLASSES);
    let logp = ops::log_softmax(&logits)?;
    Ok(logp.gather(&idx, 1)?.mean_all()?.neg()?)
}

/// Single-batch training objective: per-token reconstruction NLL plus the
/// weighted KL estimate `log q(z|y,x) - log p(z|x)` (summed per sequence,
/// divided by the number of target tokens), plus the length loss. With a
/// zero KL weight the prior is evaluated for reporting only and receives no
/// gradient.
pub fn elbo_loss(model: &FlowSeq, src: &TokenBatch, tgt: &TokenBatch, s: &ElboSettings, ctx: &Ctx, rng: &mut NoiseRng) -> Result<(Tensor, ElboReport)> {
    if src.batch_size() != tgt.batch_size() {
        return Err(Error::Data("source and target batches differ in size".into()));
    }
    let dtype = model.dtype();
    let enc = model.encode(src, ctx)?;
    let post = model.posterior_params(tgt, &enc, s.token_dropout, ctx)?;
    let mask = tgt.mask_tensor(dtype)?;
    let ids = tgt.ids_tensor()?;
    let n_samples = s.kl_samples.max(1);
    let mut recon_sum: Option<Tensor> = None;
    let mut kl_sum: Option<Tensor> = None;
    for _ in 0..n_samples {
        let (z, log_q) = sample_posterior(&post, &mask, rng)?;
        let logits = model.decoder.forward(&z, &mask, &enc, ctx)?;
        let r = (smoothed_nll(&logits, &ids, s.label_smoothing)? * &mask)?.sum_all()?;
        let log_p = if s.kl_weight > 0.0 {
            model.prior_log_density(&z, &mask, &enc)?
        } else {
            model.prior_log_density(&z.detach(), &mask, &enc.detached())?.detach()
        };
        let k = (log_q - log_p)?.sum_all()?;
        recon_sum = Some(match recon_sum {
            Some(acc) => (acc + r)?,
            None => r,
        });
        kl_sum = Some(match kl_sum {
            Some(acc) => (acc + k)?,
            None => k,
        });
    }
    let inv = 1.0 / n_samples as f64;
    let recon_sum = (recon_sum.unwrap() * inv)?;
    let kl_sum = (kl_sum.unwrap() * inv)?;
    let n_tok = tgt.num_real() as f64;
    let len_loss = length_loss(model, &enc, tgt)?;
    let mut loss = (&recon_sum / n_tok)?;
    if s.kl_weight > 0.0 {
        loss = (loss + (&kl_sum * (s.kl_weight / n_tok))?)?;
    }
    let loss = (loss + &len_loss)?;

    let recon = ops::to_f64_scalar(&recon_sum)? / n_tok;
    let kl = ops::to_f64_scalar(&kl_sum)? / n_tok;
    let report = ElboReport {
        step: 0,
        recon_loss: recon,
        kl_estimate: kl,
        kl_weight: s.kl_weight,
        length_loss: ops::to_f64_scalar(&len_loss)?,
        elbo: -(recon + s.kl_weight * kl),
        n_tokens: tgt.num_real(),
        n_sentences: tgt.batch_size(),
    };
    Ok((loss, report))
}
