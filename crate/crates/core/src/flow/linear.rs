use candle_core::{Tensor, Var, D};

use crate::compute::{batched_inverse, log_abs_det, ops, random_orthogonal, ParamBuilder};
use crate::{Error, Result};

/// How a feature vector is cut into heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitFormat {
    /// Head `k` owns the contiguous features `k*d_h .. (k+1)*d_h`.
    RowMajor,
    /// Head `k` owns the strided features `k, k+h, k+2h, ...`.
    ColumnMajor,
}

/// Smallest head determinant magnitude accepted.
pub const SINGULAR_DET: f64 = 1e-12;

/// Invertible linear map applied independently at every position, with the
/// feature vector split into `h` heads that each get their own `d_h x d_h`
/// matrix.
#[derive(Debug, Clone)]
pub struct MultiHeadLinear {
    pub name: String,
    w: Var,
    heads: usize,
    format: SplitFormat,
    frozen: bool,
}

impl MultiHeadLinear {
    /// Each head starts as a random orthogonal matrix.
    pub fn new(pb: &mut ParamBuilder, name: String, d: usize, heads: usize, format: SplitFormat) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{name}: {d} features cannot be split into {heads} heads")));
        }
        let dh = d / heads;
        let mut data = Vec::with_capacity(heads * dh * dh);
        for _ in 0..heads {
            data.extend(random_orthogonal(dh, pb.rng()));
        }
        let w = Tensor::from_vec(data, (heads, dh, dh), &candle_core::Device::Cpu)?;
        Ok(Self {
            name,
            w: pb.var_from("weight", w, true)?,
            heads,
            format,
            frozen: pb.frozen(),
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn format(&self) -> SplitFormat {
        self.format
    }

    pub fn weight(&self) -> &Tensor {
        self.w.as_tensor()
    }

    fn w(&self) -> Tensor {
        if self.frozen {
            self.w.as_tensor().detach()
        } else {
            self.w.as_tensor().clone()
        }
    }

    pub fn set_weight(&self, w: &Tensor) -> Result<()> {
        Ok(self.w.set(&w.to_dtype(self.w.dtype())?)?)
    }

    /// `[b, t, d] -> [h, b*t, d_h]`
    fn to_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        let x = match self.format {
            SplitFormat::RowMajor => x.reshape((b * t, self.heads, dh))?,
            SplitFormat::ColumnMajor => x.reshape((b * t, dh, self.heads))?.transpose(1, 2)?,
        };
        Ok(x.transpose(0, 1)?.contiguous()?)
    }

    fn from_heads(&self, x: &Tensor, b: usize, t: usize) -> Result<Tensor> {
        let (h, _, dh) = x.dims3()?;
        let x = x.transpose(0, 1)?; // [b*t, h, dh]
        let x = match self.format {
            SplitFormat::RowMajor => x.contiguous()?,
            SplitFormat::ColumnMajor => x.transpose(1, 2)?.contiguous()?,
        };
        Ok(x.reshape((b, t, h * dh))?)
    }

    fn apply(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        let y = self.to_heads(x)?.matmul(w)?;
        self.from_heads(&y, b, t)
    }

    /// Per-head `log|det W|`, failing on a near-singular head.
    fn head_log_dets(&self) -> Result<Tensor> {
        let ld = log_abs_det(&self.w())?;
        for (k, v) in ops::to_f64_vec(&ld)?.into_iter().enumerate() {
            if !(v >= SINGULAR_DET.ln()) {
                return Err(Error::Singular {
                    layer: self.name.clone(),
                    head: k,
                    det: v.exp(),
                });
            }
        }
        Ok(ld)
    }

    fn log_det(&self, mask: &Tensor) -> Result<Tensor> {
        let total = self.head_log_dets()?.sum_all()?;
        Ok(mask.sum(D::Minus1)?.broadcast_mul(&total)?)
    }

    /// `(h W, T_eff * sum_k log|det W_k|)`.
    pub fn forward(&self, h: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        let ld = self.log_det(mask)?;
        Ok((self.apply(h, &self.w())?, ld))
    }

    /// Applies freshly computed head inverses.
    pub fn inverse(&self, y: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        let ld = self.log_det(mask)?.detach();
        let inv = batched_inverse(&self.w())?.map_err(|head| Error::Singular {
            layer: self.name.clone(),
            head,
            det: 0.0,
        })?;
        Ok((self.apply(y, &inv)?, ld))
    }
}
