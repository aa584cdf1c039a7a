//! Differentiable building blocks composed from primitive tensor ops.

use candle_core::{DType, Device, Tensor, D};

use crate::Result;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Large negative logit used to hide entries before the softmax.
const MASK_FILL: f64 = -1.0e30;

/// Softmax over the last axis with an optional additive mask (use `-inf` or
/// large negative values for excluded entries). Rows with every entry at
/// `-inf` produce NaN; use [`masked_softmax`] when that can happen.
pub fn softmax(x: &Tensor, additive_mask: Option<&Tensor>) -> Result<Tensor> {
    let x = match additive_mask {
        Some(m) => x.broadcast_add(m)?,
        None => x.clone(),
    };
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Softmax over the last axis restricted to entries where `keep` is 1.
///
/// `keep` holds 0/1 values and broadcasts against `x`. Excluded entries get
/// probability exactly 0; a row with nothing kept yields all zeros.
pub fn masked_softmax(x: &Tensor, keep: &Tensor) -> Result<Tensor> {
    let fill = keep.affine(-MASK_FILL, MASK_FILL)?; // 0 where kept, MASK_FILL elsewhere
    let shifted = x.broadcast_add(&fill)?;
    let max = shifted.max_keepdim(D::Minus1)?.detach();
    let e = shifted.broadcast_sub(&max)?.exp()?.broadcast_mul(keep)?;
    let s = (e.sum_keepdim(D::Minus1)? + 1e-30)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `log(sum(exp(x)))` over `dim`, computed stably.
pub fn logsumexp(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let lse = x.broadcast_sub(&max)?.exp()?.sum_keepdim(dim)?.log()?;
    Ok((lse + max)?.squeeze(dim)?)
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Elementwise standard-normal log density.
pub fn std_normal_logpdf(x: &Tensor) -> Result<Tensor> {
    Ok(x.sqr()?.affine(-0.5, -0.5 * LN_2PI)?)
}

/// Scalar tensor of the given dtype.
pub fn scalar(v: f64, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::new(v, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn to_f64_scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

pub fn from_f64(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// True when every element is finite.
pub fn all_finite(t: &Tensor) -> Result<bool> {
    let s = to_f64_scalar(&t.sum_all()?)?;
    if s.is_finite() {
        return Ok(true);
    }
    Ok(to_f64_vec(t)?.iter().all(|v| v.is_finite()))
}
