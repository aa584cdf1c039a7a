//! Conditional normalizing-flow prior `p(z | x)`.
//!
//! A step is actnorm, then an invertible multi-head linear map, then an
//! affine coupling. Steps are grouped into scales; between scales half of the
//! features are factored out (scored against the standard normal right away)
//! and adjacent time steps are squeezed together, so every scale works at
//! width `d_z` and half the previous length.

mod actnorm;
mod coupling;
mod linear;

pub use actnorm::{Actnorm, STD_FLOOR};
pub use coupling::{concat, split, Coupling, CouplingType};
pub use linear::{MultiHeadLinear, SplitFormat, SINGULAR_DET};

use candle_core::{DType, Tensor, D};

use crate::compute::{ops, NoiseRng, ParamBuilder};
use crate::nets::{expand_mask, length_mask, SourceEncoding};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub n_scales: usize,
    pub steps_per_scale: Vec<usize>,
    pub n_linear_heads: usize,
    /// Attention width of the coupling networks.
    pub coupling_width: usize,
    /// Feed-forward width of the coupling networks.
    pub coupling_hidden: usize,
    pub coupling_heads: usize,
    /// Split types cycled through, one per step.
    pub coupling_types: Vec<CouplingType>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            n_scales: 2,
            steps_per_scale: vec![8, 8],
            n_linear_heads: 4,
            coupling_width: 64,
            coupling_hidden: 128,
            coupling_heads: 4,
            coupling_types: vec![
                CouplingType::TimeAlternate,
                CouplingType::FeatureContinuous,
                CouplingType::FeatureAlternate,
            ],
        }
    }
}

crate::kv_section!(FlowConfig, "flow", {
    n_scales,
    steps_per_scale,
    n_linear_heads,
    coupling_width,
    coupling_hidden,
    coupling_heads,
    coupling_types,
});

impl FlowConfig {
    pub fn validate(&self, d_z: usize) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_scales == 0 {
            return err("flow.n_scales must be at least 1".into());
        }
        if self.steps_per_scale.len() != self.n_scales {
            return err(format!(
                "flow.steps_per_scale lists {} scales but flow.n_scales = {}",
                self.steps_per_scale.len(),
                self.n_scales
            ));
        }
        if self.coupling_types.is_empty() {
            return err("flow.coupling_types must not be empty".into());
        }
        if self.n_scales > 1 && d_z % 2 != 0 {
            return err(format!("factoring out between scales needs an even d_z, got {d_z}"));
        }
        if self.n_linear_heads == 0 || d_z % self.n_linear_heads != 0 {
            return err(format!("d_z = {d_z} is not divisible by flow.n_linear_heads = {}", self.n_linear_heads));
        }
        if self.coupling_heads == 0 || self.coupling_width % self.coupling_heads != 0 {
            return err(format!(
                "flow.coupling_width = {} is not divisible by flow.coupling_heads = {}",
                self.coupling_width, self.coupling_heads
            ));
        }
        if d_z % 2 != 0 && self.coupling_types.iter().any(|t| *t != CouplingType::TimeAlternate) {
            return err(format!("feature couplings need an even d_z, got {d_z}"));
        }
        Ok(())
    }

    /// Required divisor of target lengths.
    pub fn length_multiple(&self) -> usize {
        1 << (self.n_scales - 1)
    }

    /// Coupling type, swap flag, and linear split format of step `i` within
    /// a scale.
    pub fn step_pattern(&self, i: usize) -> (CouplingType, bool, SplitFormat) {
        let n = self.coupling_types.len();
        let kind = self.coupling_types[i % n];
        let swap = (i / n) % 2 == 1;
        let format = if i % 2 == 0 { SplitFormat::RowMajor } else { SplitFormat::ColumnMajor };
        (kind, swap, format)
    }
}

/// One elementary invertible layer.
#[derive(Debug, Clone)]
pub enum Layer {
    Actnorm(Actnorm),
    Linear(MultiHeadLinear),
    Coupling(Coupling),
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Actnorm(l) => &l.name,
            Layer::Linear(l) => &l.name,
            Layer::Coupling(l) => &l.name,
        }
    }

    /// Forward map and its per-sequence log-determinant `[b]`.
    pub fn forward(&self, h: &Tensor, mask: &Tensor, src: &SourceEncoding, init: bool) -> Result<(Tensor, Tensor)> {
        match self {
            Layer::Actnorm(l) => l.forward(h, mask, init),
            Layer::Linear(l) => l.forward(h, mask),
            Layer::Coupling(l) => l.forward(h, mask, src),
        }
    }

    /// Inverse map and the log-determinant of the forward map at the result.
    pub fn inverse(&self, y: &Tensor, mask: &Tensor, src: &SourceEncoding) -> Result<(Tensor, Tensor)> {
        match self {
            Layer::Actnorm(l) => l.inverse(y, mask),
            Layer::Linear(l) => l.inverse(y, mask),
            Layer::Coupling(l) => l.inverse(y, mask, src),
        }
    }
}

/// `[b, t, d] -> [b, t/2, 2d]`, concatenating adjacent time steps.
pub fn squeeze(h: &Tensor) -> Result<Tensor> {
    let (b, t, d) = h.dims3()?;
    if t % 2 != 0 {
        return Err(Error::Data(format!("cannot squeeze odd length {t}")));
    }
    Ok(h.reshape((b, t / 2, 2 * d))?)
}

pub fn unsqueeze(h: &Tensor) -> Result<Tensor> {
    let (b, t, d) = h.dims3()?;
    Ok(h.reshape((b, t * 2, d / 2))?)
}

/// A squeezed position is real when its first constituent is.
pub fn squeeze_mask(mask: &Tensor) -> Result<Tensor> {
    let (b, t) = mask.dims2()?;
    Ok(mask.reshape((b, t / 2, 2))?.narrow(2, 0, 1)?.squeeze(2)?)
}

/// `(kept, removed)` = (even features, odd features).
pub fn factor_out(h: &Tensor) -> Result<(Tensor, Tensor)> {
    split(h, CouplingType::FeatureAlternate, false)
}

pub fn factor_in(kept: &Tensor, removed: &Tensor) -> Result<Tensor> {
    concat(kept, removed, CouplingType::FeatureAlternate, false)
}

/// Standard-normal log density per sequence, summed over real positions.
pub fn base_log_density(v: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let lp = ops::std_normal_logpdf(v)?.broadcast_mul(&expand_mask(mask)?)?;
    Ok(lp.sum(D::Minus1)?.sum(D::Minus1)?)
}

/// Intermediate state of the forward (`z -> v`) pass.
#[derive(Debug, Clone)]
pub struct FlowState {
    /// Current representation `[b, t_cur, d_cur]`.
    pub h: Tensor,
    /// Accumulated `log|det df/dz|` per sequence.
    pub log_det: Tensor,
    /// Real-position mask `[b, t_cur]`.
    pub mask: Tensor,
    /// Halves removed at each scale boundary, first boundary first.
    pub factored_out: Vec<Tensor>,
    /// Masks matching `factored_out`.
    pub factored_masks: Vec<Tensor>,
}

impl FlowState {
    /// Standard-normal log density of the top representation and every
    /// factored-out half, over real positions.
    pub fn base_log_density(&self) -> Result<Tensor> {
        let mut lp = base_log_density(&self.h, &self.mask)?;
        for (f, m) in self.factored_out.iter().zip(&self.factored_masks) {
            lp = (lp + base_log_density(f, m)?)?;
        }
        Ok(lp)
    }

    pub fn log_density(&self) -> Result<Tensor> {
        Ok((self.base_log_density()? + &self.log_det)?)
    }
}

/// A latent sequence drawn from the prior.
#[derive(Debug, Clone)]
pub struct PriorSample {
    /// `[b, t, d_z]`
    pub z: Tensor,
    /// `log p(z | x)` per sequence.
    pub log_prob: Tensor,
    pub mask: Tensor,
}

/// The full multi-scale flow.
#[derive(Debug, Clone)]
pub struct Flow {
    pub config: FlowConfig,
    /// `scales[i]` lists the layers of scale `i` in forward order.
    pub scales: Vec<Vec<Layer>>,
    d_z: usize,
}

impl Flow {
    pub fn new(pb: &mut ParamBuilder, cfg: &FlowConfig, d_z: usize, d_src: usize, max_pos: usize) -> Result<Self> {
        cfg.validate(d_z)?;
        let mut scales = Vec::with_capacity(cfg.n_scales);
        for (s, &n_steps) in cfg.steps_per_scale.iter().enumerate() {
            let mut layers = Vec::with_capacity(3 * n_steps);
            for i in 0..n_steps {
                let (kind, swap, format) = cfg.step_pattern(i);
                let prefix = format!("flow/scale{s}/step{i}");
                let mut pb = pb.pp(format!("scale{s}/step{i}"));
                layers.push(Layer::Actnorm(Actnorm::new(&mut pb.pp("actnorm"), format!("{prefix}/actnorm"), d_z)?));
                layers.push(Layer::Linear(MultiHeadLinear::new(
                    &mut pb.pp("linear"),
                    format!("{prefix}/linear"),
                    d_z,
                    cfg.n_linear_heads,
                    format,
                )?));
                layers.push(Layer::Coupling(Coupling::new(
                    &mut pb.pp("coupling"),
                    format!("{prefix}/coupling"),
                    kind,
                    swap,
                    d_z,
                    d_src,
                    cfg.coupling_width,
                    cfg.coupling_hidden,
                    cfg.coupling_heads,
                    max_pos,
                )?));
            }
            scales.push(layers);
        }
        Ok(Self {
            config: cfg.clone(),
            scales,
            d_z,
        })
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.scales.iter().flatten()
    }

    pub fn actnorms(&self) -> impl Iterator<Item = &Actnorm> {
        self.layers().filter_map(|l| match l {
            Layer::Actnorm(a) => Some(a),
            _ => None,
        })
    }

    pub fn is_initialized(&self) -> Result<bool> {
        for a in self.actnorms() {
            if !a.is_initialized()? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Marks every actnorm initialized at its current (identity) values.
    pub fn mark_initialized(&self) -> Result<()> {
        self.actnorms().try_for_each(|a| a.mark_initialized())
    }

    pub fn coupling(&self, name: &str) -> Option<&Coupling> {
        self.layers().find_map(|l| match l {
            Layer::Coupling(c) if c.name == name => Some(c),
            _ => None,
        })
    }

    fn check_input(&self, z: &Tensor, mask: &Tensor) -> Result<()> {
        let (b, t, d) = z.dims3()?;
        if d != self.d_z {
            return Err(Error::Data(format!("latent width {d}, flow expects {}", self.d_z)));
        }
        if mask.dims() != [b, t] {
            return Err(Error::Data(format!("mask shape {:?} does not match latents {:?}", mask.dims(), z.dims())));
        }
        let m = self.config.length_multiple();
        if t % m != 0 {
            return Err(Error::Data(format!("latent length {t} is not a multiple of {m}")));
        }
        Ok(())
    }

    fn run_forward(&self, z: &Tensor, mask: &Tensor, src: &SourceEncoding, init: bool, check: bool) -> Result<FlowState> {
        self.check_input(z, mask)?;
        let total = z.elem_count();
        let mut h = z.clone();
        let mut mask = mask.clone();
        let mut log_det = Tensor::zeros(z.dim(0)?, z.dtype(), z.device())?;
        let mut factored = Vec::new();
        let mut factored_masks = Vec::new();
        let mut index = 0;
        for (s, layers) in self.scales.iter().enumerate() {
            for layer in layers {
                let (y, ld) = layer.forward(&h, &mask, src, init)?;
                if check && !(ops::all_finite(&y)? && ops::all_finite(&ld)?) {
                    return Err(Error::NonFinite {
                        what: format!("at flow layer {index} ({})", layer.name()),
                    });
                }
                h = y;
                log_det = (log_det + ld)?;
                index += 1;
            }
            if s + 1 < self.scales.len() {
                let (kept, removed) = factor_out(&h)?;
                factored.push(removed);
                factored_masks.push(mask.clone());
                h = squeeze(&kept)?;
                mask = squeeze_mask(&mask)?;
            }
        }
        debug_assert_eq!(
            h.elem_count() + factored.iter().map(Tensor::elem_count).sum::<usize>(),
            total,
            "flow changed the element count"
        );
        Ok(FlowState {
            h,
            log_det,
            mask,
            factored_out: factored,
            factored_masks,
        })
    }

    /// Runs `z: [b, t, d_z]` through every layer (`z -> v`). In `init` mode
    /// uninitialized actnorm layers whiten their inputs first.
    pub fn forward(&self, z: &Tensor, mask: &Tensor, src: &SourceEncoding, init: bool) -> Result<FlowState> {
        let state = self.run_forward(z, mask, src, init, false)?;
        if !ops::all_finite(&state.log_det)? || !ops::all_finite(&state.h)? {
            self.run_forward(z, mask, src, false, true)?;
            return Err(Error::NonFinite {
                what: "in the flow output".into(),
            });
        }
        Ok(state)
    }

    /// `log p(z | x)` per sequence.
    pub fn log_density(&self, z: &Tensor, mask: &Tensor, src: &SourceEncoding) -> Result<Tensor> {
        self.forward(z, mask, src, false)?.log_density()
    }

    /// Inverse pass (`v -> z`). `factored` holds the removed halves, first
    /// boundary first. Returns `z` and the forward log-determinant.
    pub fn inverse(&self, v: &Tensor, factored: &[Tensor], mask: &Tensor, src: &SourceEncoding) -> Result<(Tensor, Tensor)> {
        if factored.len() + 1 != self.scales.len() {
            return Err(Error::Data(format!(
                "{} factored halves supplied for {} scales",
                factored.len(),
                self.scales.len()
            )));
        }
        let mut masks = vec![mask.clone()];
        for _ in 1..self.scales.len() {
            let last = masks.last().unwrap().clone();
            masks.push(squeeze_mask(&last)?);
        }
        let mut h = v.clone();
        let mut log_det = Tensor::zeros(v.dim(0)?, v.dtype(), v.device())?;
        for s in (0..self.scales.len()).rev() {
            if s + 1 < self.scales.len() {
                h = factor_in(&unsqueeze(&h)?, &factored[s])?;
            }
            for layer in self.scales[s].iter().rev() {
                let (x, ld) = layer.inverse(&h, &masks[s], src)?;
                h = x;
                log_det = (log_det + ld)?;
            }
        }
        Ok((h, log_det))
    }

    /// Shapes of the top representation and the factored halves for latents
    /// of shape `[b, t, d_z]`.
    pub fn base_shapes(&self, b: usize, t: usize) -> (Vec<usize>, Vec<Vec<usize>>) {
        let mut factored = Vec::new();
        let mut t_cur = t;
        for _ in 1..self.scales.len() {
            factored.push(vec![b, t_cur, self.d_z / 2]);
            t_cur /= 2;
        }
        (vec![b, t_cur, self.d_z], factored)
    }

    fn push_through(&self, v: Tensor, factored: Vec<Tensor>, mask: Tensor, src: &SourceEncoding) -> Result<PriorSample> {
        let mut masks = vec![mask.clone()];
        for _ in 1..self.scales.len() {
            let last = masks.last().unwrap().clone();
            masks.push(squeeze_mask(&last)?);
        }
        let mut base = base_log_density(&v, masks.last().unwrap())?;
        for (f, m) in factored.iter().zip(&masks) {
            base = (base + base_log_density(f, m)?)?;
        }
        let (z, log_det) = self.inverse(&v, &factored, &mask, src)?;
        Ok(PriorSample {
            z,
            log_prob: (base + log_det)?,
            mask,
        })
    }

    /// Draws latents of the given per-sequence lengths with base noise of
    /// standard deviation `temperature`. Noise is drawn in a fixed order:
    /// the top representation, then the factored halves from the last scale
    /// boundary to the first.
    pub fn sample(&self, src: &SourceEncoding, lengths: &[usize], temperature: f64, rng: &mut NoiseRng, dtype: DType) -> Result<PriorSample> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        let (t, mask) = self.length_setup(lengths, dtype)?;
        let (top, fshapes) = self.base_shapes(lengths.len(), t);
        let v = (rng.normal_tensor(&top, dtype)? * temperature)?;
        let mut factored = vec![None; fshapes.len()];
        for i in (0..fshapes.len()).rev() {
            factored[i] = Some((rng.normal_tensor(&fshapes[i], dtype)? * temperature)?);
        }
        let factored = factored.into_iter().map(Option::unwrap).collect();
        self.push_through(v, factored, mask, src)
    }

    /// The zero-temperature path: base noise fixed at 0 and pushed through
    /// the inverse flow.
    pub fn mode(&self, src: &SourceEncoding, lengths: &[usize], dtype: DType) -> Result<PriorSample> {
        let (t, mask) = self.length_setup(lengths, dtype)?;
        let (top, fshapes) = self.base_shapes(lengths.len(), t);
        let zeros = |s: &[usize]| Tensor::zeros(s, dtype, &candle_core::Device::Cpu);
        let v = zeros(&top)?;
        let factored = fshapes.iter().map(|s| zeros(s)).collect::<candle_core::Result<Vec<_>>>()?;
        self.push_through(v, factored, mask, src)
    }

    fn length_setup(&self, lengths: &[usize], dtype: DType) -> Result<(usize, Tensor)> {
        let m = self.config.length_multiple();
        if let Some(l) = lengths.iter().find(|&&l| l == 0 || l % m != 0) {
            return Err(Error::Data(format!("latent length {l} is not a positive multiple of {m}")));
        }
        let t = lengths.iter().copied().max().unwrap_or(0);
        Ok((t, length_mask(lengths, t, dtype)?))
    }
}
