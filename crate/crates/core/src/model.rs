//! The assembled sequence-to-sequence model and its configuration.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::compute::{NoiseRng, ParamStore, Precision};
use crate::config::{ConfigDigest, KvConfig, KvSection};
use crate::data::TokenBatch;
use crate::flow::{Flow, FlowConfig, PriorSample};
use crate::nets::{gaussian_log_density, Ctx, Decoder, Encoder, GaussianParams, LengthPredictor, Posterior, SourceEncoding};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub posterior_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    /// Latent width; `auto` uses `d_model`.
    pub d_z: Option<usize>,
    pub max_positions: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            src_vocab: 0,
            tgt_vocab: 0,
            d_model: 64,
            d_hidden: 128,
            n_heads: 4,
            encoder_layers: 2,
            posterior_layers: 2,
            decoder_layers: 2,
            dropout: 0.0,
            d_z: None,
            max_positions: 256,
            precision: Precision::F32,
        }
    }
}

crate::kv_section!(ModelConfig, "model", {
    src_vocab,
    tgt_vocab,
    d_model,
    d_hidden,
    n_heads,
    encoder_layers,
    posterior_layers,
    decoder_layers,
    dropout,
    d_z,
    max_positions,
    precision,
});

impl ModelConfig {
    pub fn d_z(&self) -> usize {
        self.d_z.unwrap_or(self.d_model)
    }
}

/// Model architecture: networks plus flow prior.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSeqConfig {
    pub model: ModelConfig,
    pub flow: FlowConfig,
}

/// Named architecture presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Desk,
    Base,
    Large,
}

crate::kv_enum!(Preset {
    Tiny => "tiny",
    Desk => "desk",
    Base => "base",
    Large => "large",
});

impl FlowSeqConfig {
    pub fn preset(p: Preset) -> Self {
        let mut model = ModelConfig::default();
        let mut flow = FlowConfig::default();
        match p {
            Preset::Desk => {}
            Preset::Tiny => {
                model.encoder_layers = 1;
                model.posterior_layers = 1;
                model.decoder_layers = 2;
                model.d_z = Some(16);
                flow.steps_per_scale = vec![4, 4];
                flow.n_linear_heads = 2;
                flow.coupling_width = 32;
                flow.coupling_hidden = 64;
                flow.coupling_heads = 2;
            }
            Preset::Base | Preset::Large => {
                let large = p == Preset::Large;
                model.d_model = if large { 512 } else { 256 };
                model.d_hidden = if large { 1024 } else { 512 };
                model.n_heads = 8;
                model.encoder_layers = 6;
                model.posterior_layers = 4;
                model.decoder_layers = 4;
                model.dropout = 0.1;
                flow.n_scales = 3;
                flow.steps_per_scale = vec![48, 48, 16];
                flow.n_linear_heads = 8;
                flow.coupling_width = model.d_model;
                flow.coupling_hidden = model.d_hidden;
                flow.coupling_heads = 8;
            }
        }
        Self { model, flow }
    }

    pub fn from_kv(kv: &KvConfig, base: Self) -> Result<Self> {
        Ok(Self {
            model: ModelConfig::read_over(base.model, kv)?,
            flow: FlowConfig::read_over(base.flow, kv)?,
        })
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = self.model.to_kv();
        self.flow.write_into(&mut kv);
        kv
    }

    /// SHA-256 of the canonical text of both sections.
    pub fn digest(&self) -> ConfigDigest {
        self.to_kv().digest()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.src_vocab <= crate::data::NUM_RESERVED || m.tgt_vocab <= crate::data::NUM_RESERVED {
            return Err(Error::Config("model.src_vocab and model.tgt_vocab must be set from the data".into()));
        }
        if m.n_heads == 0 || m.d_model % m.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model = {} is not divisible by model.n_heads = {}",
                m.d_model, m.n_heads
            )));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config(format!("model.dropout = {} is outside [0, 1)", m.dropout)));
        }
        self.flow.validate(m.d_z())
    }
}

/// FlowSeq: encoder, posterior, decoder, length predictor, and flow prior,
/// all owning parameters in one store.
#[derive(Debug, Clone)]
pub struct FlowSeq {
    pub config: FlowSeqConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub posterior: Posterior,
    pub decoder: Decoder,
    pub length: LengthPredictor,
    pub flow: Flow,
}

impl FlowSeq {
    pub fn new(config: FlowSeqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(config.model.precision.dtype());
        Self::build(config, store, seed)
    }

    /// Inference copy sharing this model's parameters but detached from the
    /// gradient graph, so decoding does not retain activations.
    pub fn frozen(&self) -> Result<Self> {
        Self::build(self.config.clone(), self.store.frozen_view(), 0)
    }

    fn build(config: FlowSeqConfig, mut store: ParamStore, seed: u64) -> Result<Self> {
        let m = &config.model;
        let mut rng = NoiseRng::new(seed).fork(0x1417);
        let mut pb = store.builder(&mut rng);
        let (d, h, nh, mp, dz) = (m.d_model, m.d_hidden, m.n_heads, m.max_positions, m.d_z());
        let encoder = Encoder::new(&mut pb.pp("encoder"), m.src_vocab, d, h, nh, m.encoder_layers, mp, m.dropout)?;
        let posterior = Posterior::new(&mut pb.pp("posterior"), m.tgt_vocab, d, h, nh, m.posterior_layers, dz, mp, m.dropout)?;
        let decoder = Decoder::new(&mut pb.pp("decoder"), m.tgt_vocab, d, h, nh, m.decoder_layers, dz, mp, m.dropout)?;
        let length = LengthPredictor::new(&mut pb.pp("length"), d)?;
        let flow = Flow::new(&mut pb.pp("flow"), &config.flow, dz, d, mp)?;
        Ok(Self {
            config,
            store,
            encoder,
            posterior,
            decoder,
            length,
            flow,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn digest(&self) -> ConfigDigest {
        self.config.digest()
    }

    pub fn length_multiple(&self) -> usize {
        self.config.flow.length_multiple()
    }

    pub fn encode(&self, src: &TokenBatch, ctx: &Ctx) -> Result<SourceEncoding> {
        self.encoder.forward(src, ctx)
    }

    pub fn posterior_params(&self, tgt: &TokenBatch, src: &SourceEncoding, token_dropout: f64, ctx: &Ctx) -> Result<GaussianParams> {
        self.posterior.forward(tgt, src, token_dropout, ctx)
    }

    pub fn decode_logits(&self, z: &Tensor, mask: &Tensor, src: &SourceEncoding) -> Result<Tensor> {
        self.decoder.forward(z, mask, src, &Ctx::eval())
    }

    pub fn length_logits(&self, src: &SourceEncoding) -> Result<Tensor> {
        self.length.forward(src)
    }

    pub fn prior_log_density(&self, z: &Tensor, mask: &Tensor, src: &SourceEncoding) -> Result<Tensor> {
        self.flow.log_density(z, mask, src)
    }

    pub fn prior_sample(&self, src: &SourceEncoding, lengths: &[usize], temperature: f64, rng: &mut NoiseRng) -> Result<PriorSample> {
        self.flow.sample(src, lengths, temperature, rng, self.dtype())
    }

    pub fn prior_mode(&self, src: &SourceEncoding, lengths: &[usize]) -> Result<PriorSample> {
        self.flow.mode(src, lengths, self.dtype())
    }

    /// `log q(z | y, x)` per sequence.
    pub fn posterior_log_density(&self, p: &GaussianParams, z: &Tensor, mask: &Tensor) -> Result<Tensor> {
        gaussian_log_density(p, z, mask)
    }

    /// Data-dependent actnorm initialization from posterior samples of one
    /// batch.
    pub fn initialize_flow(&self, src: &TokenBatch, tgt: &TokenBatch, rng: &mut NoiseRng) -> Result<()> {
        let enc = self.encode(src, &Ctx::eval())?;
        let p = self.posterior_params(tgt, &enc, 0.0, &Ctx::eval())?;
        let mask = tgt.mask_tensor(self.dtype())?;
        let (z, _) = crate::nets::sample_posterior(&p, &mask, rng)?;
        self.flow.forward(&z.detach(), &mask, &enc.detached(), true)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path, self.digest())
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        self.store.load(path, self.digest())
    }
}

impl SourceEncoding {
    /// Copy cut from the gradient graph.
    pub fn detached(&self) -> Self {
        Self {
            states: self.states.detach(),
            mask: self.mask.clone(),
            lengths: self.lengths.clone(),
        }
    }
}
