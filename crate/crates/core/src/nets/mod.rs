//! Attention networks: source encoder, Gaussian posterior, non-autoregressive
//! decoder, and the length-difference classifier.

mod layers;

pub use layers::*;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::{DType, Tensor, D};

use crate::compute::{ops, Init, NoiseRng, ParamBuilder};
use crate::data::TokenBatch;
use crate::{Error, Result};

/// Number of length-difference classes, covering differences -20..=20.
pub const LENGTH_CLASSES: usize = 41;
pub const MAX_LENGTH_DIFF: i64 = 20;

/// Encoded source sentences.
#[derive(Debug, Clone)]
pub struct SourceEncoding {
    /// `[b, t_src, d_model]`
    pub states: Tensor,
    /// `[b, t_src]`, 1 at real tokens.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

impl SourceEncoding {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn attn_mask(&self) -> Result<AttnMask> {
        AttnMask::keys(&self.mask)
    }

    /// Rows `indices` (with repetition allowed), keeping the padded width.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let idx = Tensor::from_vec(indices.iter().map(|&i| i as u32).collect::<Vec<_>>(), indices.len(), self.states.device())?;
        Ok(Self {
            states: self.states.index_select(&idx, 0)?,
            mask: self.mask.index_select(&idx, 0)?,
            lengths: indices.iter().map(|&i| self.lengths[i]).collect(),
        })
    }
}

/// Per-position diagonal Gaussian `[b, t, d_z]`.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub log_var: Tensor,
}

/// Sum over real positions and features of `log N(z; mu, exp(log_var))`,
/// per sequence. `mask` is `[b, t]`.
pub fn gaussian_log_density(p: &GaussianParams, z: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let inv_std = (p.log_var.affine(-0.5, 0.0)?).exp()?;
    let eps = ((z - &p.mu)? * inv_std)?;
    let lp = ((ops::std_normal_logpdf(&eps)? - p.log_var.affine(0.5, 0.0)?)?).broadcast_mul(&expand_mask(mask)?)?;
    Ok(lp.sum(D::Minus1)?.sum(D::Minus1)?)
}

/// Reparameterized draw `z = mu + exp(log_var / 2) * eps` with
/// `eps ~ N(0, I)`, together with `log q(z)` per sequence over real positions.
pub fn sample_posterior(p: &GaussianParams, mask: &Tensor, rng: &mut NoiseRng) -> Result<(Tensor, Tensor)> {
    let eps = rng.normal_tensor(p.mu.dims(), p.mu.dtype())?;
    sample_posterior_with(p, mask, &eps)
}

/// [`sample_posterior`] with caller-supplied standard-normal noise.
pub fn sample_posterior_with(p: &GaussianParams, mask: &Tensor, eps: &Tensor) -> Result<(Tensor, Tensor)> {
    let z = (&p.mu + (p.log_var.affine(0.5, 0.0)?.exp()? * eps)?)?;
    let lp = ((ops::std_normal_logpdf(eps)? - p.log_var.affine(0.5, 0.0)?)?).broadcast_mul(&expand_mask(mask)?)?;
    Ok((z, lp.sum(D::Minus1)?.sum(D::Minus1)?))
}

#[derive(Debug, Clone)]
pub struct Encoder {
    embed: Embedding,
    pos: Embedding,
    blocks: Vec<EncoderBlock>,
    dropout: f64,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(pb: &mut ParamBuilder, vocab: usize, d: usize, hidden: usize, heads: usize, layers: usize, max_pos: usize, dropout: f64) -> Result<Self> {
        let embed = Embedding::new(&mut pb.pp("embed"), vocab, d)?;
        let pos = Embedding::new(&mut pb.pp("pos"), max_pos, d)?;
        let blocks = (0..layers)
            .map(|i| EncoderBlock::new(&mut pb.pp(format!("layer{i}")), d, hidden, heads, dropout))
            .collect::<Result<_>>()?;
        Ok(Self { embed, pos, blocks, dropout })
    }

    pub fn forward(&self, src: &TokenBatch, ctx: &Ctx) -> Result<SourceEncoding> {
        if src.batch_size() == 0 {
            return Err(Error::Data("empty source batch".into()));
        }
        let dtype = self.embed.table.dtype();
        let mask = src.mask_tensor(dtype)?;
        let attn = AttnMask::keys(&mask)?;
        let x = self.embed.forward(&src.ids_tensor()?)?.broadcast_add(&self.pos.prefix(src.max_len)?)?;
        let mut x = ctx.dropout(&x, self.dropout)?;
        for b in &self.blocks {
            x = b.forward(&x, &attn, ctx)?;
        }
        Ok(SourceEncoding {
            states: x,
            mask,
            lengths: src.lengths.clone(),
        })
    }
}

/// `q(z | y, x)`: target embeddings with whole-token dropout, decoder-style
/// blocks over the source, and a zero-initialized projection to mean and
/// log-variance.
#[derive(Debug, Clone)]
pub struct Posterior {
    embed: Embedding,
    mask_embed: Tensor,
    pos: Embedding,
    blocks: Vec<DecoderBlock>,
    head: Linear,
    d_z: usize,
}

impl Posterior {
    #[allow(clippy::too_many_arguments)]
    pub fn new(pb: &mut ParamBuilder, vocab: usize, d: usize, hidden: usize, heads: usize, layers: usize, d_z: usize, max_pos: usize, dropout: f64) -> Result<Self> {
        let embed = Embedding::new(&mut pb.pp("embed"), vocab, d)?;
        let mask_embed = pb.param("mask_embed", &[d], Init::Normal(1.0 / (d as f64).sqrt()))?;
        let pos = Embedding::new(&mut pb.pp("pos"), max_pos, d)?;
        let blocks = (0..layers)
            .map(|i| DecoderBlock::new(&mut pb.pp(format!("layer{i}")), d, d, hidden, heads, dropout))
            .collect::<Result<_>>()?;
        let head = Linear::zeros(&mut pb.pp("head"), d, 2 * d_z)?;
        Ok(Self {
            embed,
            mask_embed,
            pos,
            blocks,
            head,
            d_z,
        })
    }

    /// Posterior parameters for `tgt` given the source. In training mode each
    /// target token embedding is replaced by the mask embedding with
    /// probability `token_dropout`.
    pub fn forward(&self, tgt: &TokenBatch, src: &SourceEncoding, token_dropout: f64, ctx: &Ctx) -> Result<GaussianParams> {
        if !(0.0..=1.0).contains(&token_dropout) {
            return Err(Error::Config(format!("token dropout rate {token_dropout} is outside [0, 1]")));
        }
        let (b, t) = (tgt.batch_size(), tgt.max_len);
        let dtype = self.embed.table.dtype();
        let mut x = self.embed.forward(&tgt.ids_tensor()?)?;
        if ctx.train && token_dropout > 0.0 {
            let drop: Vec<f64> = ctx.with_rng(|r| (0..b * t).map(|_| if r.uniform() < token_dropout { 1.0 } else { 0.0 }).collect());
            let drop = Tensor::from_vec(drop, (b, t, 1), x.device())?.to_dtype(dtype)?;
            let keep = drop.affine(-1.0, 1.0)?;
            x = (x.broadcast_mul(&keep)? + drop.broadcast_mul(&self.mask_embed.reshape((1, 1, ()))?)?)?;
        }
        let mut x = x.broadcast_add(&self.pos.prefix(t)?)?;
        let mask = tgt.mask_tensor(dtype)?;
        let self_mask = AttnMask::keys(&mask)?;
        let src_mask = src.attn_mask()?;
        for blk in &self.blocks {
            x = blk.forward(&x, &self_mask, &src.states, &src_mask, ctx)?;
        }
        let out = self.head.forward(&x)?;
        Ok(GaussianParams {
            mu: out.narrow(D::Minus1, 0, self.d_z)?,
            log_var: out.narrow(D::Minus1, self.d_z, self.d_z)?,
        })
    }
}

/// `P(y | z, x)`: position-wise logits from latents, with unmasked
/// self-attention and attention over the source. Counts its forward passes.
#[derive(Debug, Clone)]
pub struct Decoder {
    proj: Linear,
    pos: Embedding,
    blocks: Vec<DecoderBlock>,
    out: Linear,
    d_z: usize,
    passes: Arc<AtomicUsize>,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(pb: &mut ParamBuilder, vocab: usize, d: usize, hidden: usize, heads: usize, layers: usize, d_z: usize, max_pos: usize, dropout: f64) -> Result<Self> {
        let proj = Linear::new(&mut pb.pp("proj"), d_z, d)?;
        let pos = Embedding::new(&mut pb.pp("pos"), max_pos, d)?;
        let blocks = (0..layers)
            .map(|i| DecoderBlock::new(&mut pb.pp(format!("layer{i}")), d, d, hidden, heads, dropout))
            .collect::<Result<_>>()?;
        let out = Linear::new(&mut pb.pp("out"), d, vocab)?;
        Ok(Self {
            proj,
            pos,
            blocks,
            out,
            d_z,
            passes: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// Logits `[b, t, vocab]` for latents `z: [b, t, d_z]`; `mask` marks the
    /// real target positions `[b, t]`.
    pub fn forward(&self, z: &Tensor, mask: &Tensor, src: &SourceEncoding, ctx: &Ctx) -> Result<Tensor> {
        let (b, t, dz) = z.dims3()?;
        if b != src.batch_size() {
            return Err(Error::Data(format!(
                "latent batch of {b} does not match source batch of {}",
                src.batch_size()
            )));
        }
        if dz != self.d_z {
            return Err(Error::Data(format!("latent width {dz}, decoder expects {}", self.d_z)));
        }
        self.passes.fetch_add(1, Ordering::Relaxed);
        let mut x = self.proj.forward(z)?.broadcast_add(&self.pos.prefix(t)?)?;
        let self_mask = AttnMask::keys(mask)?;
        let src_mask = src.attn_mask()?;
        for blk in &self.blocks {
            x = blk.forward(&x, &self_mask, &src.states, &src_mask, ctx)?;
        }
        self.out.forward(&x)
    }

    pub fn pass_count(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_pass_count(&self) {
        self.passes.store(0, Ordering::Relaxed)
    }
}

/// Classifies the target-minus-source length difference from max-pooled
/// source states.
#[derive(Debug, Clone)]
pub struct LengthPredictor {
    out: Linear,
}

impl LengthPredictor {
    pub fn new(pb: &mut ParamBuilder, d: usize) -> Result<Self> {
        Ok(Self {
            out: Linear::new(&mut pb.pp("out"), d, LENGTH_CLASSES)?,
        })
    }

    /// Logits `[b, 41]`; class `k` stands for difference `k - 20`.
    pub fn forward(&self, src: &SourceEncoding) -> Result<Tensor> {
        let fill = src.mask.affine(1e9, -1e9)?; // 0 at real tokens, -1e9 at padding
        let pooled = src.states.broadcast_add(&expand_mask(&fill)?)?.max(1)?;
        self.out.forward(&pooled)
    }
}

/// Class index for a source/target length pair, clamping the difference
/// into `[-20, 20]`.
pub fn length_class(src_len: usize, tgt_len: usize) -> usize {
    let diff = (tgt_len as i64 - src_len as i64).clamp(-MAX_LENGTH_DIFF, MAX_LENGTH_DIFF);
    (diff + MAX_LENGTH_DIFF) as usize
}

pub fn class_difference(class: usize) -> i64 {
    class as i64 - MAX_LENGTH_DIFF
}

/// Class indices ordered from most to least probable. Equal scores go to the
/// smaller absolute difference, then to the negative difference.
pub fn ranked_length_classes(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| class_difference(a).abs().cmp(&class_difference(b).abs()))
            .then_with(|| class_difference(a).cmp(&class_difference(b)))
    });
    idx
}

/// Zero-variance [`GaussianParams`] cast helper for tests and oracles.
pub fn standard_gaussian(shape: &[usize], dtype: DType) -> Result<GaussianParams> {
    let z = Tensor::zeros(shape, dtype, &candle_core::Device::Cpu)?;
    Ok(GaussianParams {
        mu: z.clone(),
        log_var: z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn posterior_closed_form_sample() {
        let p = standard_gaussian(&[1, 1, 1], DType::F64).unwrap();
        let mask = Tensor::ones((1, 1), DType::F64, &candle_core::Device::Cpu).unwrap();
        let eps = Tensor::new(&[[[0.5f64]]], &candle_core::Device::Cpu).unwrap();
        let (z, lq) = sample_posterior_with(&p, &mask, &eps).unwrap();
        assert_eq!(z.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![0.5]);
        assert_abs_diff_eq!(lq.to_vec1::<f64>().unwrap()[0], -1.043_938_53, epsilon = 1e-8);
    }

    #[test]
    fn log_var_of_log_four_doubles_noise() {
        let dev = candle_core::Device::Cpu;
        let mu = Tensor::new(&[[[1.0f64, -1.0]]], &dev).unwrap();
        let p = GaussianParams {
            log_var: (mu.ones_like().unwrap() * 4f64.ln()).unwrap(),
            mu,
        };
        let eps = Tensor::new(&[[[0.3f64, -0.7]]], &dev).unwrap();
        let mask = Tensor::ones((1, 1), DType::F64, &dev).unwrap();
        let (z, lq) = sample_posterior_with(&p, &mask, &eps).unwrap();
        let z = z.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_abs_diff_eq!(z[0], 1.6, epsilon = 1e-12);
        assert_abs_diff_eq!(z[1], -2.4, epsilon = 1e-12);
        let direct = gaussian_log_density(&p, &Tensor::new(&[[[1.6f64, -2.4]]], &dev).unwrap(), &mask).unwrap();
        assert_abs_diff_eq!(lq.to_vec1::<f64>().unwrap()[0], direct.to_vec1::<f64>().unwrap()[0], epsilon = 1e-12);
    }

    #[test]
    fn padded_positions_excluded_from_log_q() {
        let dev = candle_core::Device::Cpu;
        let p = standard_gaussian(&[1, 2, 1], DType::F64).unwrap();
        let mask = Tensor::new(&[[1.0f64, 0.0]], &dev).unwrap();
        let eps = Tensor::new(&[[[0.5f64], [100.0]]], &dev).unwrap();
        let (_, lq) = sample_posterior_with(&p, &mask, &eps).unwrap();
        assert_abs_diff_eq!(lq.to_vec1::<f64>().unwrap()[0], -1.043_938_53, epsilon = 1e-8);
    }

    #[test]
    fn length_class_clamps() {
        assert_eq!(length_class(30, 5), 0);
        assert_eq!(length_class(5, 5), 20);
        assert_eq!(length_class(5, 40), 40);
        assert_eq!(class_difference(0), -20);
    }

    #[test]
    fn uniform_scores_prefer_small_differences() {
        let r = ranked_length_classes(&[0.0; LENGTH_CLASSES]);
        assert_eq!(&r[..5], &[20, 19, 21, 18, 22]);
    }
}
