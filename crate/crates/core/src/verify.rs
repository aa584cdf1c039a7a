//! Numerical oracles behind `selftest` and the acceptance suite: flow
//! round trips, brute-force Jacobian log-determinants, grid quadrature of the
//! prior and the marginal likelihood, and an end-to-end ELBO gradient check.

use std::time::Instant;

use candle_core::{DType, Tensor};
use nalgebra::DMatrix;

use crate::compute::{finite_difference_check, ops, slogdet, GradCheckReport, NoiseRng, ParamStore, Precision};
use crate::data::{pad_with_eos, TokenBatch, EOS, NUM_RESERVED};
use crate::flow::{factor_out, squeeze, squeeze_mask, CouplingType, Flow, FlowConfig, Layer};
use crate::model::{FlowSeq, FlowSeqConfig, Preset};
use crate::nets::{gaussian_log_density, length_mask, Ctx, SourceEncoding};
use crate::training::{elbo_loss, sequence_log_likelihood, ElboSettings, TrainConfig};
use crate::{Error, Result};

/// Parameter noise of the invertibility suite, relative to each tensor's
/// root-mean-square value. Matches the 90th percentile of the drift from
/// initialization seen in a trained tiny model.
pub const RANDOM_RELATIVE_STD: f64 = 0.2;
/// Absolute parameter noise for zero-initialized tensors, from the same
/// trained-model percentile.
pub const RANDOM_ZERO_INIT_STD: f64 = 0.043;
pub const INVERT_TOL_F64: f64 = 1e-10;
pub const INVERT_TOL_F32: f64 = 1e-5;
pub const LOG_DET_REL_TOL: f64 = 1e-4;
pub const GRAD_REL_TOL: f64 = 1e-3;
pub const DENSITY_TOL: f64 = 1e-2;
pub const ELBO_SLACK: f64 = 1e-2;

/// One row of a pass/fail table.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    fn timed(name: &str, start: Instant, outcome: Result<(bool, String)>) -> Self {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        Self {
            name: name.to_string(),
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}

pub fn render_checks(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    checks
        .iter()
        .map(|c| {
            format!(
                "{:<width$}  {}  {:>7.2}s  {}\n",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.seconds,
                c.detail
            )
        })
        .collect()
}

/// A standalone flow with its own parameters.
pub struct FlowFixture {
    pub store: ParamStore,
    pub flow: Flow,
    pub d_src: usize,
}

impl FlowFixture {
    pub fn new(cfg: &FlowConfig, d_z: usize, d_src: usize, dtype: DType, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(dtype);
        let mut rng = NoiseRng::new(seed);
        let flow = {
            let mut pb = store.builder(&mut rng);
            Flow::new(&mut pb.pp("flow"), cfg, d_z, d_src, 64)?
        };
        Ok(Self { store, flow, d_src })
    }

    /// Randomizes every trainable tensor (see [`randomize_store`]), then runs
    /// the data-dependent actnorm initialization on a random batch.
    pub fn randomize(&self, rng: &mut NoiseRng, relative: f64, zero_init: f64) -> Result<()> {
        randomize_store(&self.store, rng, relative, zero_init)?;
        let (b, t) = (8, 4 * self.flow.config.length_multiple());
        let z = rng.normal_tensor(&[b, t, self.flow.d_z()], self.store.dtype())?;
        let mask = Tensor::ones((b, t), self.store.dtype(), &candle_core::Device::Cpu)?;
        self.flow.forward(&z, &mask, &self.source(b, rng)?, true)?;
        Ok(())
    }

    /// Random source states for `b` sentences of 1 to 5 tokens.
    pub fn source(&self, b: usize, rng: &mut NoiseRng) -> Result<SourceEncoding> {
        random_source(b, self.d_src, self.store.dtype(), rng)
    }
}

/// Adds Gaussian noise to every trainable tensor: `relative` times the
/// tensor's root-mean-square value, or `zero_init` for all-zero tensors such
/// as the coupling output heads.
pub fn randomize_store(store: &ParamStore, rng: &mut NoiseRng, relative: f64, zero_init: f64) -> Result<()> {
    for p in store.trainable() {
        let t = p.var.as_tensor();
        let v = ops::to_f64_vec(t)?;
        let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let scale = if rms > 0.0 { relative * rms } else { zero_init };
        p.var.set(&(t + (rng.normal_tensor(t.dims(), t.dtype())? * scale)?)?)?;
    }
    Ok(())
}

pub fn random_source(b: usize, d_src: usize, dtype: DType, rng: &mut NoiseRng) -> Result<SourceEncoding> {
    let t = 5;
    let lengths: Vec<usize> = (0..b).map(|_| 1 + rng.below(t)).collect();
    Ok(SourceEncoding {
        states: rng.normal_tensor(&[b, t, d_src], dtype)?,
        mask: length_mask(&lengths, t, dtype)?,
        lengths,
    })
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (a, b) = (ops::to_f64_vec(a)?, ops::to_f64_vec(b)?);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// `max |g(f(z)) - z|` over every element.
pub fn round_trip_error(flow: &Flow, z: &Tensor, mask: &Tensor, src: &SourceEncoding) -> Result<f64> {
    let state = flow.forward(z, mask, src, false)?;
    let (back, _) = flow.inverse(&state.h, &state.factored_out, mask, src)?;
    max_abs_diff(&back, z)
}

/// Walks the flow layer by layer and names the first layer whose own round
/// trip exceeds `tol`.
pub fn locate_inversion_failure(flow: &Flow, z: &Tensor, mask: &Tensor, src: &SourceEncoding, tol: f64) -> Result<Option<(String, f64)>> {
    let mut h = z.clone();
    let mut mask = mask.clone();
    for (s, layers) in flow.scales.iter().enumerate() {
        for layer in layers {
            let (y, _) = layer.forward(&h, &mask, src, false)?;
            let (x, _) = layer.inverse(&y, &mask, src)?;
            let err = max_abs_diff(&x, &h)?;
            if !(err <= tol) {
                return Ok(Some((layer.name().to_string(), err)));
            }
            h = y;
        }
        if s + 1 < flow.scales.len() {
            h = squeeze(&factor_out(&h)?.0)?;
            mask = squeeze_mask(&mask)?;
        }
    }
    Ok(None)
}

/// Worst round-trip error over `n_params` random parameterizations of `cfg`
/// and every latent length in `lengths`, and the layer to blame when the
/// tolerance is exceeded.
pub struct InvertibilityReport {
    pub max_error: f64,
    pub failing_layer: Option<String>,
}

#[allow(clippy::too_many_arguments)]
pub fn invertibility_suite(
    cfg: &FlowConfig,
    d_z: usize,
    precision: Precision,
    lengths: &[usize],
    n_params: usize,
    seed: u64,
    corrupt: Option<&str>,
) -> Result<InvertibilityReport> {
    let tol = match precision {
        Precision::F64 => INVERT_TOL_F64,
        Precision::F32 => INVERT_TOL_F32,
    };
    let dtype = precision.dtype();
    let mut rng = NoiseRng::new(seed);
    let mut worst: f64 = 0.0;
    for p in 0..n_params {
        let fx = FlowFixture::new(cfg, d_z, 8, dtype, seed.wrapping_add(p as u64))?;
        fx.randomize(&mut rng, RANDOM_RELATIVE_STD, RANDOM_ZERO_INIT_STD)?;
        if let Some(name) = corrupt {
            fx.flow
                .coupling(name)
                .ok_or_else(|| Error::Config(format!("no coupling layer named {name}")))?
                .set_corrupt_inverse(true);
        }
        for &t in lengths {
            let b = 3;
            let src = fx.source(b, &mut rng)?;
            let z = rng.normal_tensor(&[b, t, d_z], dtype)?;
            let mask = Tensor::ones((b, t), dtype, &candle_core::Device::Cpu)?;
            let err = round_trip_error(&fx.flow, &z, &mask, &src)?;
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
            if !(err < tol) {
                let layer = locate_inversion_failure(&fx.flow, &z, &mask, &src, tol)?.map(|(n, _)| n);
                return Ok(InvertibilityReport {
                    max_error: worst,
                    failing_layer: layer,
                });
            }
        }
    }
    Ok(InvertibilityReport {
        max_error: worst,
        failing_layer: None,
    })
}

/// Central-difference Jacobian `J[i][j] = d f_i / d x_j`.
pub fn numerical_jacobian(f: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>, x: &[f64], eps: f64) -> Result<DMatrix<f64>> {
    let n_out = f(x)?.len();
    let mut j = DMatrix::zeros(n_out, x.len());
    let mut xp = x.to_vec();
    for col in 0..x.len() {
        xp[col] = x[col] + eps;
        let plus = f(&xp)?;
        xp[col] = x[col] - eps;
        let minus = f(&xp)?;
        xp[col] = x[col];
        for row in 0..n_out {
            j[(row, col)] = (plus[row] - minus[row]) / (2.0 * eps);
        }
    }
    Ok(j)
}

/// `|reported - brute| / |brute|`, or the absolute difference when the
/// brute-force value is below 1e-6.
pub fn log_det_relative_error(reported: f64, brute: f64) -> f64 {
    let diff = (reported - brute).abs();
    if brute.abs() < 1e-6 {
        diff
    } else {
        diff / brute.abs()
    }
}

/// Reported and brute-force log-determinant of one layer at `h: [1, t, d]`.
pub fn layer_log_det(layer: &Layer, h: &Tensor, mask: &Tensor, src: &SourceEncoding) -> Result<(f64, f64)> {
    let dims = h.dims().to_vec();
    let (_, ld) = layer.forward(h, mask, src, false)?;
    let mut f = |x: &[f64]| -> Result<Vec<f64>> {
        let t = ops::from_f64(x.to_vec(), &dims, h.dtype())?;
        ops::to_f64_vec(&layer.forward(&t, mask, src, false)?.0)
    };
    let j = numerical_jacobian(&mut f, &ops::to_f64_vec(h)?, 1e-5)?;
    Ok((ops::to_f64_scalar(&ld)?, slogdet(&j).0))
}

/// Reported and brute-force log-determinant of a single-scale flow.
pub fn flow_log_det(flow: &Flow, z: &Tensor, mask: &Tensor, src: &SourceEncoding) -> Result<(f64, f64)> {
    if flow.scales.len() != 1 {
        return Err(Error::Config("the brute-force Jacobian oracle needs a single-scale flow".into()));
    }
    let dims = z.dims().to_vec();
    let state = flow.forward(z, mask, src, false)?;
    let mut f = |x: &[f64]| -> Result<Vec<f64>> {
        let t = ops::from_f64(x.to_vec(), &dims, z.dtype())?;
        ops::to_f64_vec(&flow.forward(&t, mask, src, false)?.h)
    };
    let j = numerical_jacobian(&mut f, &ops::to_f64_vec(z)?, 1e-5)?;
    Ok((ops::to_f64_scalar(&state.log_det)?, slogdet(&j).0))
}

/// Single-scale flow config used by the Jacobian oracles.
pub fn jacobian_flow_config(steps: usize) -> FlowConfig {
    FlowConfig {
        n_scales: 1,
        steps_per_scale: vec![steps],
        n_linear_heads: 2,
        coupling_width: 16,
        coupling_hidden: 32,
        coupling_heads: 2,
        ..FlowConfig::default()
    }
}

/// Per-layer (name, reported, brute) log-determinants on `T = 2, d_z = 4`
/// for every layer of a 6-step flow (every split type with both swap
/// flags, both linear formats), plus the 4-step composite as `"composite"`.
pub fn log_det_table(seed: u64) -> Result<Vec<(String, f64, f64)>> {
    let mut rng = NoiseRng::new(seed);
    let (t, d_z) = (2, 4);
    let mut rows = Vec::new();
    let fx = FlowFixture::new(&jacobian_flow_config(6), d_z, 8, DType::F64, seed)?;
    fx.randomize(&mut rng, 0.3, 0.3)?;
    let src = fx.source(1, &mut rng)?;
    let mask = Tensor::ones((1, t), DType::F64, &candle_core::Device::Cpu)?;
    for layer in fx.flow.layers() {
        let h = rng.normal_tensor(&[1, t, d_z], DType::F64)?;
        let (rep, brute) = layer_log_det(layer, &h, &mask, &src)?;
        rows.push((layer.name().to_string(), rep, brute));
    }
    let comp = FlowFixture::new(&jacobian_flow_config(4), d_z, 8, DType::F64, seed ^ 0x55)?;
    comp.randomize(&mut rng, 0.3, 0.3)?;
    let z = rng.normal_tensor(&[1, t, d_z], DType::F64)?;
    let (rep, brute) = flow_log_det(&comp.flow, &z, &mask, &src)?;
    rows.push(("composite".to_string(), rep, brute));
    Ok(rows)
}

/// Tensor-product trapezoid rule on a box in two dimensions.
#[derive(Debug, Clone, Copy)]
pub struct Grid2 {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub n: usize,
}

impl Grid2 {
    /// `center +- half_width` per axis.
    pub fn around(center: [f64; 2], half_width: [f64; 2], n: usize) -> Self {
        Self {
            lo: [center[0] - half_width[0], center[1] - half_width[1]],
            hi: [center[0] + half_width[0], center[1] + half_width[1]],
            n,
        }
    }

    fn step(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.n - 1) as f64
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        let (h0, h1) = (self.step(0), self.step(1));
        (0..self.n * self.n)
            .map(|k| [self.lo[0] + (k / self.n) as f64 * h0, self.lo[1] + (k % self.n) as f64 * h1])
            .collect()
    }

    pub fn log_weights(&self) -> Vec<f64> {
        let edge = |i: usize| -> f64 { if i == 0 || i == self.n - 1 { 0.5 } else { 1.0 } };
        let base = (self.step(0) * self.step(1)).ln();
        (0..self.n * self.n)
            .map(|k| base + (edge(k / self.n) * edge(k % self.n)).ln())
            .collect()
    }

    /// `log` of the integral of `exp(log_f)` sampled at [`Grid2::points`].
    pub fn log_integral(&self, log_f: &[f64]) -> f64 {
        let terms: Vec<f64> = self.log_weights().iter().zip(log_f).map(|(w, f)| w + f).collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return m;
        }
        m + terms.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    /// Integral of `exp(log_q) * g`.
    pub fn expectation(&self, log_q: &[f64], g: &[f64]) -> f64 {
        self.log_weights()
            .iter()
            .zip(log_q)
            .zip(g)
            .map(|((w, q), g)| (w + q).exp() * g)
            .sum()
    }
}

const QUAD_CHUNK: usize = 8192;

fn grid_latents(points: &[[f64; 2]], dtype: DType) -> Result<Tensor> {
    let flat: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
    ops::from_f64(flat, &[points.len(), 2, 1], dtype)
}

/// `log p(z | x)` at every grid point for a `d_z = 1, T = 2` flow and a
/// single-sentence source.
pub fn prior_on_grid(flow: &Flow, src: &SourceEncoding, grid: &Grid2, dtype: DType) -> Result<Vec<f64>> {
    let pts = grid.points();
    let mut out = Vec::with_capacity(pts.len());
    for chunk in pts.chunks(QUAD_CHUNK) {
        let n = chunk.len();
        let z = grid_latents(chunk, dtype)?;
        let mask = Tensor::ones((n, 2), dtype, &candle_core::Device::Cpu)?;
        out.extend(ops::to_f64_vec(&flow.log_density(&z, &mask, &src.select(&vec![0; n])?)?)?);
    }
    Ok(out)
}

/// Per-coordinate mean and standard deviation of `n` prior draws.
fn prior_moments(flow: &Flow, src: &SourceEncoding, n: usize, rng: &mut NoiseRng, dtype: DType) -> Result<([f64; 2], [f64; 2])> {
    let s = flow.sample(&src.select(&vec![0; n])?, &vec![2; n], 1.0, rng, dtype)?;
    let v = ops::to_f64_vec(&s.z)?;
    let mut mean = [0.0; 2];
    let mut sd = [0.0; 2];
    for a in 0..2 {
        let xs: Vec<f64> = v.iter().skip(a).step_by(2).copied().collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        mean[a] = m;
        sd[a] = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    }
    Ok((mean, sd))
}

/// Flow config of the quadrature-tractable prior: one scale of time
/// couplings over a single latent feature.
pub fn scalar_flow_config(steps: usize) -> FlowConfig {
    FlowConfig {
        n_scales: 1,
        steps_per_scale: vec![steps],
        n_linear_heads: 1,
        coupling_width: 16,
        coupling_hidden: 32,
        coupling_heads: 2,
        coupling_types: vec![CouplingType::TimeAlternate],
    }
}

/// Integral of `exp(log p(z | x))` over `mean +- 8 sd` of a random
/// `d_z = 1, T = 2` flow prior.
pub fn density_normalization(seed: u64, n: usize) -> Result<f64> {
    let mut rng = NoiseRng::new(seed);
    let fx = FlowFixture::new(&scalar_flow_config(4), 1, 8, DType::F64, seed)?;
    fx.randomize(&mut rng, 0.3, 0.3)?;
    let src = fx.source(1, &mut rng)?;
    let (mean, sd) = prior_moments(&fx.flow, &src, 4000, &mut rng, DType::F64)?;
    let grid = Grid2::around(mean, [8.0 * sd[0], 8.0 * sd[1]], n);
    let lp = prior_on_grid(&fx.flow, &src, &grid, DType::F64)?;
    Ok(grid.log_integral(&lp).exp())
}

/// The quadrature-tractable FlowSeq: `d_z = 1`, targets of two tokens, 64-bit,
/// with random parameters.
pub fn quadrature_model(seed: u64) -> Result<FlowSeq> {
    let mut cfg = FlowSeqConfig::preset(Preset::Tiny);
    let m = &mut cfg.model;
    m.src_vocab = NUM_RESERVED + 8;
    m.tgt_vocab = NUM_RESERVED + 8;
    m.d_model = 16;
    m.d_hidden = 32;
    m.n_heads = 2;
    m.encoder_layers = 1;
    m.posterior_layers = 1;
    m.decoder_layers = 1;
    m.dropout = 0.0;
    m.d_z = Some(1);
    m.max_positions = 16;
    m.precision = Precision::F64;
    cfg.flow = scalar_flow_config(4);
    let model = FlowSeq::new(cfg, seed)?;
    let mut rng = NoiseRng::new(seed).fork(0x7a);
    randomize_store(&model.store, &mut rng, 0.3, 0.3)?;
    init_on_random_batch(&model, &mut rng, &[1; 8])?;
    Ok(model)
}

fn random_rows(rng: &mut NoiseRng, vocab: usize, lens: &[usize]) -> Vec<Vec<u32>> {
    lens.iter()
        .map(|&l| (0..l).map(|_| (NUM_RESERVED + rng.below(vocab - NUM_RESERVED)) as u32).chain([EOS]).collect())
        .collect()
}

fn eos_padded(model: &FlowSeq, rows: &[Vec<u32>]) -> Result<TokenBatch> {
    let rows: Vec<Vec<u32>> = rows.iter().map(|r| pad_with_eos(r, model.config.flow.n_scales)).collect();
    TokenBatch::from_rows(&rows, 0)
}

/// Data-dependent actnorm initialization on random pairs whose targets have
/// `tgt_lens` tokens before EOS.
fn init_on_random_batch(model: &FlowSeq, rng: &mut NoiseRng, tgt_lens: &[usize]) -> Result<()> {
    let src_lens: Vec<usize> = tgt_lens.iter().map(|_| 1 + rng.below(4)).collect();
    let src = TokenBatch::from_rows(&random_rows(rng, model.config.model.src_vocab, &src_lens), 0)?;
    let tgt = eos_padded(model, &random_rows(rng, model.config.model.tgt_vocab, tgt_lens))?;
    model.initialize_flow(&src, &tgt, rng)
}

/// A random (source, two-token target) pair for [`quadrature_model`].
pub fn quadrature_input(model: &FlowSeq, rng: &mut NoiseRng) -> Result<(TokenBatch, TokenBatch)> {
    let v = model.config.model.src_vocab - NUM_RESERVED;
    let src: Vec<u32> = (0..1 + rng.below(4)).map(|_| (NUM_RESERVED + rng.below(v)) as u32).chain([EOS]).collect();
    let w = (NUM_RESERVED + rng.below(model.config.model.tgt_vocab - NUM_RESERVED)) as u32;
    Ok((TokenBatch::from_rows(&[src], 0)?, TokenBatch::from_rows(&[vec![w, EOS]], 0)?))
}

/// Exact `log P(y | x)` and exact ELBO `E_q[log P(y|z,x) + log p(z|x) - log q(z|y,x)]`
/// of one pair, both by grid quadrature over a box that covers eight
/// standard deviations of the prior and of the posterior.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureResult {
    pub log_marginal: f64,
    pub elbo: f64,
}

pub fn quadrature_log_marginal(model: &FlowSeq, src: &TokenBatch, tgt: &TokenBatch, n: usize, rng: &mut NoiseRng) -> Result<QuadratureResult> {
    if model.flow.d_z() != 1 || tgt.max_len != 2 || src.batch_size() != 1 {
        return Err(Error::Config("quadrature needs d_z = 1, one sentence, and a two-token target".into()));
    }
    let dtype = model.dtype();
    let enc = model.encode(src, &Ctx::eval())?;
    let post = model.posterior_params(tgt, &enc, 0.0, &Ctx::eval())?;
    let mu = ops::to_f64_vec(&post.mu)?;
    let sd: Vec<f64> = ops::to_f64_vec(&post.log_var)?.iter().map(|lv| (0.5 * lv).exp()).collect();
    let (pm, ps) = prior_moments(&model.flow, &enc, 4000, rng, dtype)?;
    let mut lo = [0.0; 2];
    let mut hi = [0.0; 2];
    for a in 0..2 {
        lo[a] = (pm[a] - 8.0 * ps[a]).min(mu[a] - 8.0 * sd[a]);
        hi[a] = (pm[a] + 8.0 * ps[a]).max(mu[a] + 8.0 * sd[a]);
    }
    let grid = Grid2 { lo, hi, n };
    let pts = grid.points();
    let mut log_lik = Vec::with_capacity(pts.len());
    let mut log_p = Vec::with_capacity(pts.len());
    let mut log_q = Vec::with_capacity(pts.len());
    for chunk in pts.chunks(QUAD_CHUNK) {
        let k = chunk.len();
        let z = grid_latents(chunk, dtype)?;
        let rows = vec![0; k];
        let cenc = enc.select(&rows)?;
        let ctgt = tgt.select(&rows)?;
        let mask = ctgt.mask_tensor(dtype)?;
        let logits = model.decode_logits(&z, &mask, &cenc)?;
        log_lik.extend(ops::to_f64_vec(&sequence_log_likelihood(&logits, &ctgt)?)?);
        log_p.extend(ops::to_f64_vec(&model.prior_log_density(&z, &mask, &cenc)?)?);
        let cpost = crate::nets::GaussianParams {
            mu: post.mu.broadcast_as((k, 2, 1))?.contiguous()?,
            log_var: post.log_var.broadcast_as((k, 2, 1))?.contiguous()?,
        };
        log_q.extend(ops::to_f64_vec(&gaussian_log_density(&cpost, &z, &mask)?)?);
    }
    let joint: Vec<f64> = log_lik.iter().zip(&log_p).map(|(a, b)| a + b).collect();
    let integrand: Vec<f64> = joint.iter().zip(&log_q).map(|(j, q)| j - q).collect();
    Ok(QuadratureResult {
        log_marginal: grid.log_integral(&joint),
        elbo: grid.expectation(&log_q, &integrand),
    })
}

/// Small 64-bit model with every component active (two scales, all split
/// types) for gradient checks.
pub fn gradcheck_model(seed: u64) -> Result<FlowSeq> {
    let mut cfg = FlowSeqConfig::preset(Preset::Tiny);
    let m = &mut cfg.model;
    m.src_vocab = NUM_RESERVED + 10;
    m.tgt_vocab = NUM_RESERVED + 10;
    m.d_model = 16;
    m.d_hidden = 24;
    m.n_heads = 2;
    m.encoder_layers = 1;
    m.posterior_layers = 1;
    m.decoder_layers = 1;
    m.dropout = 0.0;
    m.d_z = Some(4);
    m.max_positions = 16;
    m.precision = Precision::F64;
    cfg.flow.steps_per_scale = vec![3, 3];
    cfg.flow.coupling_width = 8;
    cfg.flow.coupling_hidden = 16;
    let model = FlowSeq::new(cfg, seed)?;
    let mut rng = NoiseRng::new(seed).fork(0x9c);
    randomize_store(&model.store, &mut rng, 0.1, 0.1)?;
    init_on_random_batch(&model, &mut rng, &[3, 1, 5, 2])?;
    Ok(model)
}

/// Central-difference check of the full training loss (reconstruction with
/// label smoothing, weighted KL through the flow prior, length loss) with
/// the posterior noise and token-dropout draws held fixed.
pub fn elbo_gradient_check(seed: u64, n_coords: usize) -> Result<GradCheckReport> {
    let model = gradcheck_model(seed)?;
    let mut rng = NoiseRng::new(seed).fork(0x6c);
    let v = model.config.model.src_vocab;
    let src = TokenBatch::from_rows(&random_rows(&mut rng, v, &[3, 5, 2]), 0)?;
    let tgt = eos_padded(&model, &random_rows(&mut rng, v, &[3, 1, 5]))?;
    let settings = ElboSettings {
        kl_weight: 0.7,
        label_smoothing: 0.1,
        token_dropout: 0.2,
        kl_samples: 1,
    };
    let params: Vec<_> = model.store.trainable().cloned().collect();
    finite_difference_check(
        || {
            let ctx = Ctx::train(NoiseRng::new(seed).fork(1));
            Ok(elbo_loss(&model, &src, &tgt, &settings, &ctx, &mut NoiseRng::new(seed).fork(2))?.0)
        },
        &params,
        1e-6,
        n_coords,
        &mut rng.fork(3),
    )
}

/// Steps at which the recorded schedule differs from the closed form.
pub fn schedule_mismatches(cfg: &TrainConfig) -> Vec<usize> {
    let (zero, ramp) = (cfg.kl_zero(), cfg.kl_ramp());
    (0..=cfg.steps)
        .filter(|&s| {
            let expect = if s < zero {
                0.0
            } else if ramp == 0 {
                1.0
            } else {
                ((s - zero) as f64 / ramp as f64).min(1.0)
            };
            let lr = cfg.lr_init * cfg.lr_decay.powf(s as f64);
            cfg.kl_weight(s) != expect || ((cfg.learning_rate(s) - lr) / lr).abs() > 1e-12
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

crate::kv_enum!(Level {
    Fast => "fast",
    Full => "full",
});

#[derive(Debug, Clone, Default)]
pub struct SelftestOptions {
    /// Coupling layer whose inverse is deliberately corrupted.
    pub corrupt_coupling: Option<String>,
}

fn invertibility_check(name: &str, cfg: &FlowConfig, precision: Precision, n_params: usize, opts: &SelftestOptions) -> Check {
    let start = Instant::now();
    let tol = match precision {
        Precision::F64 => INVERT_TOL_F64,
        Precision::F32 => INVERT_TOL_F32,
    };
    let r = invertibility_suite(cfg, 16, precision, &[4, 8, 16], n_params, 11, opts.corrupt_coupling.as_deref()).map(|r| match r.failing_layer {
        Some(l) => (false, format!("max error {:.3e} >= {tol:e}; first failing layer: {l}", r.max_error)),
        None if r.max_error < tol => (true, format!("max error {:.3e} < {tol:e}", r.max_error)),
        None => (false, format!("max error {:.3e} >= {tol:e}", r.max_error)),
    });
    Check::timed(name, start, r)
}

/// Model forward shapes on a two-sentence batch of the tiny preset.
fn shape_check() -> Result<(bool, String)> {
    let mut cfg = FlowSeqConfig::preset(Preset::Tiny);
    cfg.model.src_vocab = 12;
    cfg.model.tgt_vocab = 14;
    let model = FlowSeq::new(cfg, 5)?;
    let src = TokenBatch::from_rows(&[vec![4, 5, 6, EOS], vec![7, EOS]], 0)?;
    let tgt = eos_padded(&model, &[vec![8, 9, EOS], vec![10, 11, 12, 13, EOS]])?;
    model.initialize_flow(&src, &tgt, &mut NoiseRng::new(1))?;
    let enc = model.encode(&src, &Ctx::eval())?;
    let post = model.posterior_params(&tgt, &enc, 0.0, &Ctx::eval())?;
    let mask = tgt.mask_tensor(model.dtype())?;
    let logits = model.decode_logits(&post.mu, &mask, &enc)?;
    let lens = model.length_logits(&enc)?;
    let lp = model.prior_log_density(&post.mu, &mask, &enc)?;
    let d = model.config.model.d_model;
    let dz = model.flow.d_z();
    let expect: [(&str, &[usize], Vec<usize>); 5] = [
        ("encoder", enc.states.dims(), vec![2, 4, d]),
        ("posterior", post.mu.dims(), vec![2, 6, dz]),
        ("decoder", logits.dims(), vec![2, 6, 14]),
        ("length", lens.dims(), vec![2, crate::nets::LENGTH_CLASSES]),
        ("prior", lp.dims(), vec![2]),
    ];
    for (what, got, want) in expect {
        if got != want.as_slice() {
            return Ok((false, format!("{what} output shape {got:?}, expected {want:?}")));
        }
    }
    Ok((true, "encoder, posterior, decoder, length and prior shapes agree".into()))
}

/// Runs the oracle suite. `fast` covers invertibility in both precisions,
/// model shapes, and the schedules; `full` adds the Jacobian, gradient,
/// density-normalization and ELBO-bound oracles.
pub fn selftest(level: Level, opts: &SelftestOptions) -> Vec<Check> {
    let desk = FlowConfig::default();
    let mut checks = vec![
        invertibility_check("flow invertibility (64-bit)", &desk, Precision::F64, 3, opts),
        invertibility_check("flow invertibility (32-bit)", &desk, Precision::F32, 3, opts),
    ];
    let start = Instant::now();
    checks.push(Check::timed("model shapes", start, shape_check()));
    let start = Instant::now();
    let sched = (|| {
        let mut cfg = TrainConfig {
            steps: 20_000,
            ..TrainConfig::default()
        };
        let mut bad = schedule_mismatches(&cfg);
        cfg.kl_zero_steps = Some(3000);
        cfg.kl_ramp_steps = Some(1000);
        bad.extend(schedule_mismatches(&cfg));
        let mid = cfg.kl_weight(3500);
        Ok(if bad.is_empty() && mid == 0.5 {
            (true, "kl weight and learning rate match the closed forms".into())
        } else {
            (false, format!("{} mismatching steps, kl_weight(3500) = {mid}", bad.len()))
        })
    })();
    checks.push(Check::timed("training schedules", start, sched));
    if level == Level::Fast {
        return checks;
    }

    let start = Instant::now();
    let jac = log_det_table(3).map(|rows| {
        let worst = rows
            .iter()
            .map(|(n, r, b)| (n, log_det_relative_error(*r, *b)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        (
            worst.1 < LOG_DET_REL_TOL,
            format!("{} layers, worst relative error {:.2e} at {}", rows.len(), worst.1, worst.0),
        )
    });
    checks.push(Check::timed("jacobian log-determinant", start, jac));

    let start = Instant::now();
    let grad = elbo_gradient_check(4, 50).map(|r| {
        let w = r.worst().unwrap();
        (
            r.max_error < GRAD_REL_TOL,
            format!("50 coordinates, worst relative error {:.2e} at {}[{}]", r.max_error, w.param, w.index),
        )
    });
    checks.push(Check::timed("ELBO gradient", start, grad));

    let start = Instant::now();
    let dens = density_normalization(6, 321).map(|z| ((z - 1.0).abs() < DENSITY_TOL, format!("integral {z:.6}")));
    checks.push(Check::timed("prior density normalization", start, dens));

    let start = Instant::now();
    let bound = (|| {
        let model = quadrature_model(8)?;
        let mut rng = NoiseRng::new(9);
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..5 {
            let (s, t) = quadrature_input(&model, &mut rng)?;
            let q = quadrature_log_marginal(&model, &s, &t, 241, &mut rng)?;
            worst = worst.max(q.elbo - q.log_marginal);
        }
        Ok((worst <= ELBO_SLACK, format!("max ELBO - log P(y|x) = {worst:.2e} over 5 inputs")))
    })();
    checks.push(Check::timed("ELBO bound", start, bound));
    checks
}
