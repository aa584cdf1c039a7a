//! Autoregressive encoder-decoder baseline: rescorer for noisy parallel
//! decoding, latency comparator, and distillation teacher.

use candle_core::{Tensor, D};

use crate::compute::{ops, NoiseRng, ParamStore, Parameter, Precision};
use crate::config::{ConfigDigest, KvConfig, KvSection};
use crate::data::{epoch_batches, BatchConfig, EncodedPair, TokenBatch, BOS, EOS, NUM_RESERVED};
use crate::decoding::{trim_at_eos, Hypothesis};
use crate::nets::{AttnMask, Ctx, DecoderBlock, Embedding, Encoder, Linear, SourceEncoding};
use crate::training::{clip_grad_norm, smoothed_nll, Adam, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ArConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub max_positions: usize,
    /// Output length cap is `source length + max_extra_len`.
    pub max_extra_len: usize,
    pub precision: Precision,
}

impl Default for ArConfig {
    fn default() -> Self {
        Self {
            src_vocab: 0,
            tgt_vocab: 0,
            d_model: 64,
            d_hidden: 128,
            n_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            dropout: 0.0,
            max_positions: 256,
            max_extra_len: 20,
            precision: Precision::F32,
        }
    }
}

crate::kv_section!(ArConfig, "ar", {
    src_vocab,
    tgt_vocab,
    d_model,
    d_hidden,
    n_heads,
    encoder_layers,
    decoder_layers,
    dropout,
    max_positions,
    max_extra_len,
    precision,
});

impl ArConfig {
    pub fn digest(&self) -> ConfigDigest {
        self.to_kv().digest()
    }

    pub fn from_kv(kv: &KvConfig, base: Self) -> Result<Self> {
        Self::read_over(base, kv)
    }
}

/// Causal Transformer translation model.
#[derive(Debug, Clone)]
pub struct ArModel {
    pub config: ArConfig,
    pub store: ParamStore,
    encoder: Encoder,
    embed: Embedding,
    pos: Embedding,
    blocks: Vec<DecoderBlock>,
    out: Linear,
}

/// Per-sentence beam search state.
#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<u32>,
    logp: f64,
}

impl ArModel {
    pub fn new(config: ArConfig, seed: u64) -> Result<Self> {
        if config.src_vocab <= NUM_RESERVED || config.tgt_vocab <= NUM_RESERVED {
            return Err(Error::Config("ar.src_vocab and ar.tgt_vocab must be set from the data".into()));
        }
        let store = ParamStore::new(config.precision.dtype());
        Self::build(config, store, seed)
    }

    /// Inference copy sharing this model's parameters but detached from the
    /// gradient graph.
    pub fn frozen(&self) -> Result<Self> {
        Self::build(self.config.clone(), self.store.frozen_view(), 0)
    }

    fn build(config: ArConfig, mut store: ParamStore, seed: u64) -> Result<Self> {
        let c = &config;
        let mut rng = NoiseRng::new(seed).fork(0xa7);
        let mut pb = store.builder(&mut rng);
        let encoder = Encoder::new(&mut pb.pp("encoder"), c.src_vocab, c.d_model, c.d_hidden, c.n_heads, c.encoder_layers, c.max_positions, c.dropout)?;
        let mut dec = pb.pp("decoder");
        let embed = Embedding::new(&mut dec.pp("embed"), c.tgt_vocab, c.d_model)?;
        let pos = Embedding::new(&mut dec.pp("pos"), c.max_positions, c.d_model)?;
        let blocks = (0..c.decoder_layers)
            .map(|i| DecoderBlock::new(&mut dec.pp(format!("layer{i}")), c.d_model, c.d_model, c.d_hidden, c.n_heads, c.dropout))
            .collect::<Result<_>>()?;
        let out = Linear::new(&mut dec.pp("out"), c.d_model, c.tgt_vocab)?;
        Ok(Self {
            config,
            store,
            encoder,
            embed,
            pos,
            blocks,
            out,
        })
    }

    pub fn digest(&self) -> ConfigDigest {
        self.config.digest()
    }

    pub fn tgt_vocab(&self) -> usize {
        self.config.tgt_vocab
    }

    pub fn encode(&self, src: &TokenBatch, ctx: &Ctx) -> Result<SourceEncoding> {
        self.encoder.forward(src, ctx)
    }

    /// Next-token logits `[b, t, vocab]` for decoder inputs `prev` (each row
    /// starting with BOS) under a causal mask.
    pub fn logits(&self, prev: &TokenBatch, enc: &SourceEncoding, ctx: &Ctx) -> Result<Tensor> {
        let dtype = self.store.dtype();
        let mask = prev.mask_tensor(dtype)?;
        let self_mask = AttnMask::causal(&mask)?;
        let src_mask = enc.attn_mask()?;
        let mut x = self.embed.forward(&prev.ids_tensor()?)?.broadcast_add(&self.pos.prefix(prev.max_len)?)?;
        x = ctx.dropout(&x, self.config.dropout)?;
        for b in &self.blocks {
            x = b.forward(&x, &self_mask, &enc.states, &src_mask, ctx)?;
        }
        self.out.forward(&x)
    }

    /// Shifts targets right behind BOS: returns `(inputs, outputs)`.
    fn teacher_forcing(tgt: &TokenBatch) -> Result<(TokenBatch, TokenBatch)> {
        let rows: Vec<Vec<u32>> = (0..tgt.batch_size()).map(|i| tgt.row(i).to_vec()).collect();
        let inputs: Vec<Vec<u32>> = rows
            .iter()
            .map(|r| std::iter::once(BOS).chain(r[..r.len() - 1].iter().copied()).collect())
            .collect();
        Ok((TokenBatch::from_rows(&inputs, 0)?, TokenBatch::from_rows(&rows, 0)?))
    }

    /// Mean label-smoothed cross-entropy per target token.
    pub fn loss(&self, src: &TokenBatch, tgt: &TokenBatch, label_smoothing: f64, ctx: &Ctx) -> Result<Tensor> {
        let enc = self.encode(src, ctx)?;
        let (inp, out) = Self::teacher_forcing(tgt)?;
        let logits = self.logits(&inp, &enc, ctx)?;
        let mask = out.mask_tensor(logits.dtype())?;
        let nll = (smoothed_nll(&logits, &out.ids_tensor()?, label_smoothing)? * mask)?.sum_all()?;
        Ok((nll / out.num_real() as f64)?)
    }

    /// Length-normalized log-probability `sum_t log p(y_t | y_<t, x) / |y|`
    /// of each candidate, where `cands[i]` (EOS-trimmed tokens) is scored
    /// against source row `src_rows[i]` with a final EOS appended.
    pub fn score(&self, enc: &SourceEncoding, src_rows: &[usize], cands: &[Vec<u32>]) -> Result<Vec<f64>> {
        if cands.is_empty() {
            return Ok(Vec::new());
        }
        let v = self.tgt_vocab() as u32;
        if let Some(bad) = cands.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::VocabMismatch(format!("token id {bad} is outside the rescorer vocabulary of {v}")));
        }
        let enc = enc.select(src_rows)?;
        let rows: Vec<Vec<u32>> = cands.iter().map(|c| c.iter().copied().chain([EOS]).collect()).collect();
        let tgt = TokenBatch::from_rows(&rows, 0)?;
        let (inp, out) = Self::teacher_forcing(&tgt)?;
        let logits = self.logits(&inp, &enc, &Ctx::eval())?;
        let lp = smoothed_nll(&logits, &out.ids_tensor()?, 0.0)?.neg()?;
        let lp = (lp * out.mask_tensor(logits.dtype())?)?.sum(D::Minus1)?;
        let sums = ops::to_f64_vec(&lp)?;
        Ok(sums.iter().zip(&rows).map(|(s, r)| s / r.len() as f64).collect())
    }

    /// Beam search with length-normalized final scores. `beam = 1` is greedy
    /// decoding.
    pub fn beam_search(&self, src: &TokenBatch, beam: usize) -> Result<Vec<Hypothesis>> {
        if beam < 1 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        let enc = self.encode(src, &Ctx::eval())?;
        let n = src.batch_size();
        let max_len: Vec<usize> = src
            .lengths
            .iter()
            .map(|&l| (l + self.config.max_extra_len).min(self.config.max_positions))
            .collect();
        let mut live: Vec<Vec<Beam>> = vec![vec![Beam { tokens: vec![], logp: 0.0 }]; n];
        let mut finished: Vec<Vec<(Vec<u32>, f64)>> = vec![Vec::new(); n];
        let mut t = 0;
        loop {
            let active: Vec<usize> = (0..n).filter(|&i| !live[i].is_empty()).collect();
            if active.is_empty() {
                break;
            }
            let mut rows = Vec::new();
            let mut src_rows = Vec::new();
            for &i in &active {
                for b in &live[i] {
                    rows.push(std::iter::once(BOS).chain(b.tokens.iter().copied()).collect::<Vec<_>>());
                    src_rows.push(i);
                }
            }
            let prev = TokenBatch::from_rows(&rows, 0)?;
            let logits = self.logits(&prev, &enc.select(&src_rows)?, &Ctx::eval())?;
            let last = logits.narrow(1, t, 1)?.squeeze(1)?;
            let logp = ops::to_f64_vec(&ops::log_softmax(&last)?)?;
            let v = self.tgt_vocab();
            let mut offset = 0;
            t += 1;
            for &i in &active {
                let mut ext: Vec<(f64, usize, u32)> = Vec::new();
                for (bi, b) in live[i].iter().enumerate() {
                    let row = &logp[(offset + bi) * v..(offset + bi + 1) * v];
                    let mut best: Vec<u32> = (0..v as u32).collect();
                    best.sort_by(|&a, &c| row[c as usize].total_cmp(&row[a as usize]).then(a.cmp(&c)));
                    for &tok in best.iter().take(beam) {
                        ext.push((b.logp + row[tok as usize], bi, tok));
                    }
                }
                offset += live[i].len();
                ext.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                let mut next = Vec::new();
                for (lp, bi, tok) in ext {
                    if next.len() + finished[i].len() >= beam {
                        break;
                    }
                    let mut tokens = live[i][bi].tokens.clone();
                    tokens.push(tok);
                    if tok == EOS || t >= max_len[i] {
                        let len = tokens.len() as f64;
                        finished[i].push((tokens, lp / len));
                    } else {
                        next.push(Beam { tokens, logp: lp });
                    }
                }
                live[i] = if finished[i].len() >= beam { Vec::new() } else { next };
            }
        }
        Ok(finished
            .into_iter()
            .map(|f| {
                let (tokens, score) = f
                    .into_iter()
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap_or((vec![EOS], f64::NEG_INFINITY));
                Hypothesis {
                    raw_length: tokens.len(),
                    tokens: trim_at_eos(&tokens),
                    score,
                    latency_seconds: 0.0,
                }
            })
            .collect())
    }

    /// Teacher-forced training with the optimizer and learning-rate schedule
    /// of `cfg` (the KL settings are unused). Returns the last logged loss.
    pub fn train(&self, pairs: &[EncodedPair], cfg: &TrainConfig, mut on_log: impl FnMut(usize, f64)) -> Result<f64> {
        cfg.validate()?;
        let bcfg = BatchConfig {
            num_scales: 1,
            batch_sentences: cfg.batch_sentences,
            max_tokens: cfg.max_tokens,
            max_src_len: self.config.max_positions,
            max_tgt_len: self.config.max_positions,
        };
        let params: Vec<Parameter> = self.store.trainable().cloned().collect();
        let mut opt = Adam::new(params.clone(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.amsgrad)?;
        let root = NoiseRng::new(cfg.seed).fork(0xa7);
        let mut step = 0;
        let mut epoch = 0;
        let mut last = f64::NAN;
        while step < cfg.steps {
            let ep = epoch_batches(pairs, &bcfg, cfg.seed, epoch)?;
            if ep.batches.is_empty() {
                return Err(Error::Data("no trainable sentence pairs after length filtering".into()));
            }
            epoch += 1;
            for (src, tgt) in &ep.batches {
                if step >= cfg.steps {
                    break;
                }
                let ctx = Ctx::train(root.fork(step as u64));
                let loss = self.loss(src, tgt, cfg.label_smoothing, &ctx)?;
                let value = ops::to_f64_scalar(&loss)?;
                let mut grads = loss.backward()?;
                let norm = clip_grad_norm(&mut grads, &params, cfg.grad_clip)?;
                if !value.is_finite() || !norm.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        detail: format!("autoregressive loss {value}, grad norm {norm}"),
                    });
                }
                opt.step(&grads, cfg.learning_rate(step))?;
                step += 1;
                last = value;
                if cfg.log_interval > 0 && step % cfg.log_interval == 0 {
                    on_log(step, value);
                }
            }
        }
        Ok(last)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.store.save(path, self.digest())
    }

    pub fn load(&self, path: &std::path::Path) -> Result<()> {
        self.store.load(path, self.digest())
    }
}
