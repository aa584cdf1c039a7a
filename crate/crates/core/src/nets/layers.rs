//! Basic layers: linear, embedding, layer norm, attention, and the
//! post-norm encoder/decoder blocks built from them.

use std::cell::RefCell;

use candle_core::{DType, Tensor, D};

use crate::compute::{layer_norm, masked_softmax, Init, NoiseRng, ParamBuilder};
use crate::Result;

/// Forward-pass context: training flag plus the noise source for dropout.
pub struct Ctx {
    pub train: bool,
    rng: RefCell<NoiseRng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: RefCell::new(NoiseRng::new(0)),
        }
    }

    pub fn train(rng: NoiseRng) -> Self {
        Self {
            train: true,
            rng: RefCell::new(rng),
        }
    }

    pub fn with_rng<T>(&self, f: impl FnOnce(&mut NoiseRng) -> T) -> T {
        f(&mut self.rng.borrow_mut())
    }

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout(&self, x: &Tensor, rate: f64) -> Result<Tensor> {
        if !self.train || rate <= 0.0 {
            return Ok(x.clone());
        }
        let n = x.elem_count();
        let keep: Vec<f64> = self.with_rng(|r| {
            (0..n)
                .map(|_| if r.uniform() < rate { 0.0 } else { 1.0 / (1.0 - rate) })
                .collect()
        });
        let m = Tensor::from_vec(keep, x.dims(), x.device())?.to_dtype(x.dtype())?;
        Ok((x * m)?)
    }
}

/// Applies a `[n, in] x [in, out]` product to the last axis of any tensor.
pub fn matmul_last(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (din, dout) = w.dims2()?;
    let rows = x.elem_count() / din;
    let y = x.reshape((rows, din))?.matmul(w)?;
    let mut out = dims;
    *out.last_mut().unwrap() = dout;
    Ok(y.reshape(out)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new(pb: &mut ParamBuilder, din: usize, dout: usize) -> Result<Self> {
        let bound = (6.0 / (din + dout) as f64).sqrt();
        Ok(Self {
            w: pb.param("weight", &[din, dout], Init::Uniform(bound))?,
            b: pb.param("bias", &[dout], Init::Zeros)?,
        })
    }

    /// All-zero weights and bias.
    pub fn zeros(pb: &mut ParamBuilder, din: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            w: pb.param("weight", &[din, dout], Init::Zeros)?,
            b: pb.param("bias", &[dout], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(matmul_last(x, &self.w)?.broadcast_add(&self.b)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Tensor,
    dim: usize,
}

impl Embedding {
    pub fn new(pb: &mut ParamBuilder, n: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: pb.param("table", &[n, dim], Init::Normal(1.0 / (dim as f64).sqrt()))?,
            dim,
        })
    }

    /// Looks up `ids` of shape `[b, t]` (u32), returning `[b, t, dim]`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        Ok(self.table.index_select(&ids.flatten_all()?, 0)?.reshape((b, t, self.dim))?)
    }

    /// The first `t` rows, as `[1, t, dim]`.
    pub fn prefix(&self, t: usize) -> Result<Tensor> {
        let n = self.table.dim(0)?;
        if t > n {
            return Err(crate::Error::Config(format!(
                "sequence length {t} exceeds the {n} learned positions"
            )));
        }
        Ok(self.table.narrow(0, 0, t)?.unsqueeze(0)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.param("gamma", &[dim], Init::Const(1.0))?,
            beta: pb.param("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta, 1e-5)
    }
}

/// Key-side keep mask shaped for attention scores `[b, heads, tq, tk]`.
#[derive(Debug, Clone)]
pub struct AttnMask(pub Tensor);

impl AttnMask {
    /// From a `[b, tk]` 0/1 indicator of attendable keys.
    pub fn keys(keep: &Tensor) -> Result<Self> {
        let (b, tk) = keep.dims2()?;
        Ok(Self(keep.reshape((b, 1, 1, tk))?))
    }

    /// Keys allowed by `keep` and at positions `<=` the query (causal).
    pub fn causal(keep: &Tensor) -> Result<Self> {
        let (b, t) = keep.dims2()?;
        let tri: Vec<f64> = (0..t)
            .flat_map(|q| (0..t).map(move |k| if k <= q { 1.0 } else { 0.0 }))
            .collect();
        let tri = Tensor::from_vec(tri, (1, 1, t, t), keep.device())?.to_dtype(keep.dtype())?;
        Ok(Self(tri.broadcast_mul(&keep.reshape((b, 1, 1, t))?)?))
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    d: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, d_query: usize, d_kv: usize, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(crate::Error::Config(format!(
                "attention width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&mut pb.pp("q"), d_query, d)?,
            k: Linear::new(&mut pb.pp("k"), d_kv, d)?,
            v: Linear::new(&mut pb.pp("v"), d_kv, d)?,
            o: Linear::new(&mut pb.pp("o"), d, d_query)?,
            heads,
            d,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, self.d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// Attention weights and output for queries `x` over `memory`.
    pub fn attend(&self, x: &Tensor, memory: &Tensor, mask: &AttnMask) -> Result<(Tensor, Tensor)> {
        let (b, tq, _) = x.dims3()?;
        let q = self.split_heads(&self.q.forward(x)?)?;
        let k = self.split_heads(&self.k.forward(memory)?)?;
        let v = self.split_heads(&self.v.forward(memory)?)?;
        let scale = 1.0 / ((self.d / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let w = masked_softmax(&scores, &mask.0)?;
        let ctx = w.matmul(&v)?.transpose(1, 2)?.reshape((b, tq, self.d))?;
        Ok((self.o.forward(&ctx)?, w))
    }

    pub fn forward(&self, x: &Tensor, memory: &Tensor, mask: &AttnMask) -> Result<Tensor> {
        Ok(self.attend(x, memory, mask)?.0)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, d: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(&mut pb.pp("up"), d, hidden)?,
            down: Linear::new(&mut pb.pp("down"), hidden, d)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu()?)
    }
}

/// Self-attention and feed-forward, each followed by residual + layer norm.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
    dropout: f64,
}

impl EncoderBlock {
    pub fn new(pb: &mut ParamBuilder, d: usize, hidden: usize, heads: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&mut pb.pp("self_attn"), d, d, d, heads)?,
            ln1: LayerNorm::new(&mut pb.pp("ln1"), d)?,
            ffn: FeedForward::new(&mut pb.pp("ffn"), d, hidden)?,
            ln2: LayerNorm::new(&mut pb.pp("ln2"), d)?,
            dropout,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &AttnMask, ctx: &Ctx) -> Result<Tensor> {
        let a = ctx.dropout(&self.attn.forward(x, x, mask)?, self.dropout)?;
        let x = self.ln1.forward(&(x + a)?)?;
        let f = ctx.dropout(&self.ffn.forward(&x)?, self.dropout)?;
        self.ln2.forward(&(x + f)?)
    }
}

/// Self-attention, attention over source states, and feed-forward, each
/// followed by residual + layer norm.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln3: LayerNorm,
    dropout: f64,
}

impl DecoderBlock {
    pub fn new(pb: &mut ParamBuilder, d: usize, d_src: usize, hidden: usize, heads: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(&mut pb.pp("self_attn"), d, d, d, heads)?,
            ln1: LayerNorm::new(&mut pb.pp("ln1"), d)?,
            cross_attn: MultiHeadAttention::new(&mut pb.pp("cross_attn"), d, d_src, d, heads)?,
            ln2: LayerNorm::new(&mut pb.pp("ln2"), d)?,
            ffn: FeedForward::new(&mut pb.pp("ffn"), d, hidden)?,
            ln3: LayerNorm::new(&mut pb.pp("ln3"), d)?,
            dropout,
        })
    }

    pub fn forward(&self, x: &Tensor, self_mask: &AttnMask, src: &Tensor, src_mask: &AttnMask, ctx: &Ctx) -> Result<Tensor> {
        let a = ctx.dropout(&self.self_attn.forward(x, x, self_mask)?, self.dropout)?;
        let x = self.ln1.forward(&(x + a)?)?;
        let c = ctx.dropout(&self.cross_attn.forward(&x, src, src_mask)?, self.dropout)?;
        let x = self.ln2.forward(&(x + c)?)?;
        let f = ctx.dropout(&self.ffn.forward(&x)?, self.dropout)?;
        self.ln3.forward(&(x + f)?)
    }

    pub fn cross_attention_weights(&self, x: &Tensor, self_mask: &AttnMask, src: &Tensor, src_mask: &AttnMask) -> Result<Tensor> {
        let a = self.self_attn.forward(x, x, self_mask)?;
        let x = self.ln1.forward(&(x + a)?)?;
        Ok(self.cross_attn.attend(&x, src, src_mask)?.1)
    }
}

/// `[b, t]` 0/1 mask from per-row lengths.
pub fn length_mask(lengths: &[usize], t: usize, dtype: DType) -> Result<Tensor> {
    let m: Vec<f64> = lengths
        .iter()
        .flat_map(|&l| (0..t).map(move |i| if i < l { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(m, (lengths.len(), t), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Broadcasts a `[b, t]` mask over a trailing feature axis.
pub fn expand_mask(mask: &Tensor) -> Result<Tensor> {
    Ok(mask.unsqueeze(D::Minus1)?)
}
