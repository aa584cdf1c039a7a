use std::sync::atomic::{AtomicBool, Ordering};

use candle_core::{Tensor, D};

use crate::compute::{ops, ParamBuilder};
use crate::nets::{expand_mask, AttnMask, Ctx, DecoderBlock, Embedding, Linear, SourceEncoding};
use crate::{Error, Result};

/// Which variables a coupling layer keeps fixed (`a`) and transforms (`b`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingType {
    /// `a` = even time steps, `b` = odd time steps.
    TimeAlternate,
    /// `a` = first half of the features, `b` = second half.
    FeatureContinuous,
    /// `a` = even features, `b` = odd features.
    FeatureAlternate,
}

crate::kv_enum!(CouplingType {
    TimeAlternate => "time",
    FeatureContinuous => "feature-continuous",
    FeatureAlternate => "feature-alternate",
});

fn pair_axis(h: &Tensor, axis: usize) -> Result<Tensor> {
    let mut dims = h.dims().to_vec();
    let n = dims[axis];
    if n % 2 != 0 {
        return Err(Error::Config(format!("cannot alternate-split an axis of odd size {n}")));
    }
    dims[axis] = n / 2;
    dims.insert(axis + 1, 2);
    Ok(h.reshape(dims)?)
}

fn take_parity(paired: &Tensor, axis: usize, parity: usize) -> Result<Tensor> {
    Ok(paired.narrow(axis + 1, parity, 1)?.squeeze(axis + 1)?)
}

fn interleave(even: &Tensor, odd: &Tensor, axis: usize) -> Result<Tensor> {
    let mut dims = even.dims().to_vec();
    let stacked = Tensor::stack(&[even, odd], axis + 1)?;
    dims[axis] *= 2;
    Ok(stacked.reshape(dims)?)
}

/// Splits `h: [b, t, d]` into `(a, b)` for the given type. With `swap` the
/// roles of the two halves are exchanged.
pub fn split(h: &Tensor, kind: CouplingType, swap: bool) -> Result<(Tensor, Tensor)> {
    let (x, y) = match kind {
        CouplingType::FeatureContinuous => {
            let d = h.dim(2)?;
            if d % 2 != 0 {
                return Err(Error::Config(format!("cannot split {d} features in half")));
            }
            (h.narrow(2, 0, d / 2)?, h.narrow(2, d / 2, d / 2)?)
        }
        CouplingType::FeatureAlternate => {
            let p = pair_axis(h, 2)?;
            (take_parity(&p, 2, 0)?, take_parity(&p, 2, 1)?)
        }
        CouplingType::TimeAlternate => {
            let p = pair_axis(h, 1)?;
            (take_parity(&p, 1, 0)?, take_parity(&p, 1, 1)?)
        }
    };
    Ok(if swap { (y, x) } else { (x, y) })
}

/// Inverse of [`split`].
pub fn concat(a: &Tensor, b: &Tensor, kind: CouplingType, swap: bool) -> Result<Tensor> {
    let (x, y) = if swap { (b, a) } else { (a, b) };
    match kind {
        CouplingType::FeatureContinuous => Ok(Tensor::cat(&[x, y], 2)?),
        CouplingType::FeatureAlternate => interleave(x, y, 2),
        CouplingType::TimeAlternate => interleave(x, y, 1),
    }
}

/// Attention network producing the coupling's scale and shift from the
/// fixed half and the source.
#[derive(Debug, Clone)]
pub struct CouplingNet {
    inp: Linear,
    pos: Embedding,
    block: DecoderBlock,
    out: Linear,
}

impl CouplingNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(pb: &mut ParamBuilder, d_in: usize, d_out: usize, d_src: usize, width: usize, hidden: usize, heads: usize, max_pos: usize) -> Result<Self> {
        Ok(Self {
            inp: Linear::new(&mut pb.pp("in"), d_in, width)?,
            pos: Embedding::new(&mut pb.pp("pos"), max_pos, width)?,
            block: DecoderBlock::new(&mut pb.pp("block"), width, d_src, hidden, heads, 0.0)?,
            out: Linear::zeros(&mut pb.pp("out"), width, 2 * d_out)?,
        })
    }

    /// Returns `(s, shift)` with `s = sigmoid(raw) + 0.5`.
    fn forward(&self, a: &Tensor, keys: &Tensor, src: &SourceEncoding) -> Result<(Tensor, Tensor)> {
        let t = a.dim(1)?;
        let x = self.inp.forward(a)?.broadcast_add(&self.pos.prefix(t)?)?;
        let x = self
            .block
            .forward(&x, &AttnMask::keys(keys)?, &src.states, &src.attn_mask()?, &Ctx::eval())?;
        let raw = self.out.forward(&x)?;
        let d = raw.dim(D::Minus1)? / 2;
        let s = (ops::sigmoid(&raw.narrow(D::Minus1, 0, d)?)? + 0.5)?;
        Ok((s, raw.narrow(D::Minus1, d, d)?))
    }
}

/// Affine coupling: `b' = s(a, x) * b + shift(a, x)` with `a` passed through.
#[derive(Debug)]
pub struct Coupling {
    pub name: String,
    pub kind: CouplingType,
    pub swap: bool,
    net: CouplingNet,
    corrupt_inverse: AtomicBool,
}

impl Clone for Coupling {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            kind: self.kind,
            swap: self.swap,
            net: self.net.clone(),
            corrupt_inverse: AtomicBool::new(self.corrupt_inverse.load(Ordering::Relaxed)),
        }
    }
}

/// `[1, t, 1]` indicator of the time steps a time-alternate split keeps fixed.
fn time_mask(t: usize, swap: bool, like: &Tensor) -> Result<Tensor> {
    let keep = if swap { 1 } else { 0 };
    let m: Vec<f64> = (0..t).map(|i| if i % 2 == keep { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(m, (1, t, 1), like.device())?.to_dtype(like.dtype())?)
}

impl Coupling {
    #[allow(clippy::too_many_arguments)]
    pub fn new(pb: &mut ParamBuilder, name: String, kind: CouplingType, swap: bool, d: usize, d_src: usize, width: usize, hidden: usize, heads: usize, max_pos: usize) -> Result<Self> {
        let (d_in, d_out) = match kind {
            CouplingType::TimeAlternate => (d, d),
            _ => {
                if d % 2 != 0 {
                    return Err(Error::Config(format!("{name}: feature split needs an even width, got {d}")));
                }
                (d / 2, d / 2)
            }
        };
        Ok(Self {
            net: CouplingNet::new(pb, d_in, d_out, d_src, width, hidden, heads, max_pos)?,
            name,
            kind,
            swap,
            corrupt_inverse: AtomicBool::new(false),
        })
    }

    /// Test hook: perturbs the scale used by [`Coupling::inverse`].
    pub fn set_corrupt_inverse(&self, on: bool) {
        self.corrupt_inverse.store(on, Ordering::Relaxed)
    }

    /// `(s, shift)` over the full `[b, t, d]` layout for time splits (1 and 0
    /// at fixed steps), or over the `b` half for feature splits.
    fn params(&self, h: &Tensor, mask: &Tensor, src: &SourceEncoding) -> Result<(Tensor, Tensor)> {
        match self.kind {
            CouplingType::TimeAlternate => {
                let am = time_mask(h.dim(1)?, self.swap, h)?;
                let bm = am.affine(-1.0, 1.0)?;
                let keys = mask.broadcast_mul(&am.squeeze(2)?)?;
                let (s, shift) = self.net.forward(&h.broadcast_mul(&am)?, &keys, src)?;
                let s = ((s - 1.0)?.broadcast_mul(&bm)? + 1.0)?;
                Ok((s, shift.broadcast_mul(&bm)?))
            }
            _ => {
                let (a, _) = split(h, self.kind, self.swap)?;
                self.net.forward(&a, mask, src)
            }
        }
    }

    fn log_det(s: &Tensor, mask: &Tensor) -> Result<Tensor> {
        Ok(s.log()?.broadcast_mul(&expand_mask(mask)?)?.sum(D::Minus1)?.sum(D::Minus1)?)
    }

    pub fn forward(&self, h: &Tensor, mask: &Tensor, src: &SourceEncoding) -> Result<(Tensor, Tensor)> {
        let (s, shift) = self.params(h, mask, src)?;
        let ld = Self::log_det(&s, mask)?;
        let y = match self.kind {
            CouplingType::TimeAlternate => ((h * &s)? + shift)?,
            _ => {
                let (a, b) = split(h, self.kind, self.swap)?;
                concat(&a, &((b * &s)? + shift)?, self.kind, self.swap)?
            }
        };
        Ok((y, ld))
    }

    pub fn inverse(&self, y: &Tensor, mask: &Tensor, src: &SourceEncoding) -> Result<(Tensor, Tensor)> {
        let (mut s, shift) = self.params(y, mask, src)?;
        let ld = Self::log_det(&s, mask)?;
        if self.corrupt_inverse.load(Ordering::Relaxed) {
            s = (s * 1.01)?;
        }
        let h = match self.kind {
            CouplingType::TimeAlternate => ((y - shift)? / &s)?,
            _ => {
                let (a, b) = split(y, self.kind, self.swap)?;
                concat(&a, &((b - shift)? / &s)?, self.kind, self.swap)?
            }
        };
        Ok((h, ld))
    }
}
