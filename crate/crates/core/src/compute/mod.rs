//! Dense differentiable tensor substrate.
//!
//! Tensors and reverse-mode gradients come from `candle-core`; this module
//! adds the pieces the model needs on top: named parameters and checkpoints,
//! a splittable noise source, composed ops (masked softmax, layer norm),
//! batched log-determinants, and a gradient checker.

mod gradcheck;
mod linalg;
pub mod ops;
mod params;
mod rng;

pub use candle_core::{DType, Device, Tensor, Var, D};
pub use gradcheck::{finite_difference_check, gradient_error, CoordCheck, GradCheckReport, ABS_FLOOR};
pub use linalg::{abs_dets, batched_inverse, log_abs_det, random_orthogonal, slogdet};
pub use ops::*;
pub use params::{Checkpoint, Init, ParamBuilder, ParamStore, Parameter, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use rng::NoiseRng;

use std::fmt;

use crate::{Error, Result};

/// Floating-point width used for parameters and activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

crate::kv_enum!(Precision { F32 => "f32", F64 => "f64" });

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Operations the model stack relies on, each with reverse-mode gradients
/// (except Gaussian sampling, which callers reparameterize).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capability {
    MatMul,
    Add,
    Mul,
    Exp,
    Log,
    Tanh,
    Affine,
    Softmax,
    LayerNorm,
    Embedding,
    Concat,
    Split,
    Reshape,
    Transpose,
    Sum,
    Mean,
    Max,
    GaussianSample,
}

impl Capability {
    pub const ALL: [Capability; 18] = [
        Capability::MatMul,
        Capability::Add,
        Capability::Mul,
        Capability::Exp,
        Capability::Log,
        Capability::Tanh,
        Capability::Affine,
        Capability::Softmax,
        Capability::LayerNorm,
        Capability::Embedding,
        Capability::Concat,
        Capability::Split,
        Capability::Reshape,
        Capability::Transpose,
        Capability::Sum,
        Capability::Mean,
        Capability::Max,
        Capability::GaussianSample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Capability::MatMul => "matmul",
            Capability::Add => "add",
            Capability::Mul => "mul",
            Capability::Exp => "exp",
            Capability::Log => "log",
            Capability::Tanh => "tanh",
            Capability::Affine => "affine",
            Capability::Softmax => "softmax",
            Capability::LayerNorm => "layer_norm",
            Capability::Embedding => "embedding",
            Capability::Concat => "concat",
            Capability::Split => "split",
            Capability::Reshape => "reshape",
            Capability::Transpose => "transpose",
            Capability::Sum => "sum",
            Capability::Mean => "mean",
            Capability::Max => "max",
            Capability::GaussianSample => "gaussian_sample",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Every operation this substrate provides.
pub fn required_op_set() -> Vec<Capability> {
    Capability::ALL.to_vec()
}

/// Fails with [`Error::UnsupportedOp`] on the first name not in
/// [`required_op_set`].
pub fn ensure_supported(names: &[&str]) -> Result<Vec<Capability>> {
    names
        .iter()
        .map(|n| Capability::from_name(n).ok_or_else(|| Error::UnsupportedOp((*n).to_string())))
        .collect()
}

/// Runs each capability once on a small 64-bit input, including a backward
/// pass where gradients apply, and returns the capabilities whose gradient
/// came back missing or non-finite.
pub fn probe_capabilities() -> Result<Vec<Capability>> {
    let dev = Device::Cpu;
    let x = Var::from_vec(vec![0.3f64, -1.2, 0.7, 2.0, -0.4, 1.1], (2, 3), &dev)?;
    let xt = x.as_tensor();
    let mut rng = NoiseRng::new(0);
    let mut failed = Vec::new();
    for cap in Capability::ALL {
        let y = match cap {
            Capability::MatMul => xt.matmul(&xt.t()?)?,
            Capability::Add => (xt + xt)?,
            Capability::Mul => (xt * xt)?,
            Capability::Exp => xt.exp()?,
            Capability::Log => (xt.sqr()? + 1.0)?.log()?,
            Capability::Tanh => xt.tanh()?,
            Capability::Affine => xt.affine(2.0, 1.0)?,
            Capability::Softmax => {
                let mask = Tensor::new(&[0.0f64, f64::NEG_INFINITY, 0.0], &dev)?;
                softmax(xt, Some(&mask))?
            }
            Capability::LayerNorm => {
                let g = Tensor::ones(3, DType::F64, &dev)?;
                let b = Tensor::zeros(3, DType::F64, &dev)?;
                (layer_norm(xt, &g, &b, 1e-5)? * xt)?
            }
            Capability::Embedding => xt.index_select(&Tensor::new(&[1u32, 0, 1], &dev)?, 0)?,
            Capability::Concat => Tensor::cat(&[xt, xt], 1)?,
            Capability::Split => xt.narrow(1, 1, 2)?,
            Capability::Reshape => xt.reshape((3, 2))?,
            Capability::Transpose => xt.t()?.contiguous()?,
            Capability::Sum => xt.sum_keepdim(1)?,
            Capability::Mean => xt.mean_keepdim(0)?,
            Capability::Max => xt.max_keepdim(1)?,
            Capability::GaussianSample => {
                let eps = rng.normal_tensor(&[2, 3], DType::F64)?;
                (xt + eps)?
            }
        };
        let grads = (y.sqr()?.sum_all()?).backward()?;
        let ok = match grads.get(xt) {
            Some(g) => ops::all_finite(g)? && to_f64_vec(g)?.iter().any(|v| *v != 0.0),
            None => false,
        };
        if !ok {
            failed.push(cap);
        }
    }
    Ok(failed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_op_is_rejected() {
        assert!(ensure_supported(&["matmul", "softmax"]).is_ok());
        let err = ensure_supported(&["matmul", "fft"]).unwrap_err();
        assert!(matches!(err, Error::UnsupportedOp(ref s) if s == "fft"));
    }

    #[test]
    fn every_capability_has_gradients() {
        assert!(probe_capabilities().unwrap().is_empty());
    }

    #[test]
    fn capability_names_round_trip() {
        for c in required_op_set() {
            assert_eq!(Capability::from_name(c.name()), Some(c));
        }
    }
}
