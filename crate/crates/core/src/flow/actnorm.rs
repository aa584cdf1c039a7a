use candle_core::{Tensor, Var, D};

use crate::compute::{ops, Init, ParamBuilder};
use crate::{Error, Result};

/// Per-feature affine map `h * s + b` with `s = exp(log_s)`, whitened from
/// the first batch it sees in initialization mode.
#[derive(Debug, Clone)]
pub struct Actnorm {
    pub name: String,
    log_s: Var,
    bias: Var,
    initialized: Var,
    frozen: bool,
}

/// Smallest per-feature standard deviation used during initialization.
pub const STD_FLOOR: f64 = 1e-6;

impl Actnorm {
    pub fn new(pb: &mut ParamBuilder, name: String, d: usize) -> Result<Self> {
        Ok(Self {
            name,
            log_s: pb.var("log_scale", &[d], Init::Zeros, true)?,
            bias: pb.var("bias", &[d], Init::Zeros, true)?,
            initialized: pb.var("initialized", &[1], Init::Zeros, false)?,
            frozen: pb.frozen(),
        })
    }

    fn param(&self, v: &Var) -> Tensor {
        if self.frozen {
            v.as_tensor().detach()
        } else {
            v.as_tensor().clone()
        }
    }

    pub fn is_initialized(&self) -> Result<bool> {
        Ok(ops::to_f64_scalar(self.initialized.as_tensor())? != 0.0)
    }

    pub fn mark_initialized(&self) -> Result<()> {
        Ok(self.initialized.set(&self.initialized.ones_like()?)?)
    }

    pub fn scale(&self) -> Result<Vec<f64>> {
        Ok(ops::to_f64_vec(&self.log_s.exp()?)?)
    }

    pub fn set(&self, scale: &[f64], bias: &[f64]) -> Result<()> {
        let dtype = self.log_s.dtype();
        let d = scale.len();
        let log_s: Vec<f64> = scale.iter().map(|s| s.ln()).collect();
        self.log_s.set(&ops::from_f64(log_s, &[d], dtype)?)?;
        self.bias.set(&ops::from_f64(bias.to_vec(), &[d], dtype)?)?;
        Ok(())
    }

    /// Sets `s = 1/std` and `b = -mean/std` per feature over the real
    /// positions of `h: [b, t, d]`, then marks the layer initialized.
    pub fn initialize(&self, h: &Tensor, mask: &Tensor) -> Result<()> {
        let (_, _, d) = h.dims3()?;
        let vals = ops::to_f64_vec(h)?;
        let m = ops::to_f64_vec(mask)?;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0.0;
        for (pos, &w) in m.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            n += 1.0;
            for j in 0..d {
                let v = vals[pos * d + j];
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        if n == 0.0 {
            return Err(Error::Data(format!("{}: initialization batch has no real positions", self.name)));
        }
        let mut scale = vec![0.0; d];
        let mut bias = vec![0.0; d];
        for j in 0..d {
            let mean = sum[j] / n;
            let var = (sq[j] / n - mean * mean).max(0.0);
            let mut std = var.sqrt();
            if std < STD_FLOOR {
                log::warn!("{}: feature {j} has near-zero spread; using std floor {STD_FLOOR}", self.name);
                std = STD_FLOOR;
            }
            scale[j] = 1.0 / std;
            bias[j] = -mean / std;
        }
        self.set(&scale, &bias)?;
        self.mark_initialized()
    }

    fn log_det(&self, mask: &Tensor) -> Result<Tensor> {
        let t_eff = mask.sum(D::Minus1)?;
        Ok(t_eff.broadcast_mul(&self.param(&self.log_s).sum_all()?)?)
    }

    fn check(&self) -> Result<()> {
        if !self.is_initialized()? {
            return Err(Error::Uninitialized(self.name.clone()));
        }
        Ok(())
    }

    /// `(s * h + b, T_eff * sum(log s))`.
    pub fn forward(&self, h: &Tensor, mask: &Tensor, init: bool) -> Result<(Tensor, Tensor)> {
        if init && !self.is_initialized()? {
            self.initialize(h, mask)?;
        }
        self.check()?;
        let y = h.broadcast_mul(&self.param(&self.log_s).exp()?)?.broadcast_add(&self.param(&self.bias))?;
        Ok((y, self.log_det(mask)?))
    }

    /// `((h' - b) / s, T_eff * sum(log s))`.
    pub fn inverse(&self, y: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check()?;
        let h = y
            .broadcast_sub(&self.param(&self.bias))?
            .broadcast_mul(&self.param(&self.log_s).neg()?.exp()?)?;
        Ok((h, self.log_det(mask)?))
    }
}
