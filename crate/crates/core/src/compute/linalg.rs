//! Small dense linear algebra on host memory, plus the differentiable
//! batched log-|det| used by the invertible linear layers.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};
use nalgebra::DMatrix;

use crate::compute::NoiseRng;
use crate::Result;

fn storage_to_f64(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<Vec<f64>> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("log_abs_det expects a contiguous input".into()))?;
    Ok(match storage {
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        _ => return Err(candle_core::Error::Msg("log_abs_det supports f32 and f64".into())),
    })
}

/// Matrices `[n, d, d]` stored row-major, as nalgebra matrices.
fn split_matrices(data: &[f64], d: usize) -> Vec<DMatrix<f64>> {
    data.chunks(d * d)
        .map(|c| DMatrix::from_row_slice(d, d, c))
        .collect()
}

/// `(log|det|, sign)` through an LU factorization.
pub fn slogdet(m: &DMatrix<f64>) -> (f64, f64) {
    let lu = m.clone().lu();
    let u = lu.u();
    let mut logabs = 0.0;
    let mut sign = if lu.p().determinant::<f64>() < 0.0 { -1.0 } else { 1.0 };
    for i in 0..m.nrows() {
        let v = u[(i, i)];
        if v == 0.0 {
            return (f64::NEG_INFINITY, 0.0);
        }
        logabs += v.abs().ln();
        if v < 0.0 {
            sign = -sign;
        }
    }
    (logabs, sign)
}

/// Differentiable `log|det W_i|` for a stack of square matrices `[n, d, d]`.
struct LogAbsDet;

impl CustomOp1 for LogAbsDet {
    fn name(&self) -> &'static str {
        "log-abs-det"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims();
        let (n, d) = (dims[0], dims[1]);
        let data = storage_to_f64(storage, layout)?;
        let out: Vec<f64> = split_matrices(&data, d).iter().map(|m| slogdet(m).0).collect();
        let out = match storage {
            CpuStorage::F32(_) => CpuStorage::F32(out.into_iter().map(|x| x as f32).collect()),
            _ => CpuStorage::F64(out),
        };
        Ok((out, Shape::from(n)))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (n, d, _) = arg.dims3()?;
        let data = arg.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let mut inv_t = Vec::with_capacity(n * d * d);
        for m in split_matrices(&data, d) {
            let inv = m
                .try_inverse()
                .ok_or_else(|| candle_core::Error::Msg("singular matrix in log_abs_det backward".into()))?;
            let t = inv.transpose();
            for r in 0..d {
                for c in 0..d {
                    inv_t.push(t[(r, c)]);
                }
            }
        }
        let inv_t = Tensor::from_vec(inv_t, (n, d, d), arg.device())?.to_dtype(arg.dtype())?;
        Ok(Some(inv_t.broadcast_mul(&grad_res.reshape((n, 1, 1))?)?))
    }
}

/// `log|det W_i|` for `w` of shape `[n, d, d]`, returning `[n]`. Gradients
/// flow back as `W_i^{-T}`.
pub fn log_abs_det(w: &Tensor) -> Result<Tensor> {
    Ok(w.contiguous()?.apply_op1(LogAbsDet)?)
}

/// Host-side inverses of a stack `[n, d, d]`, recomputed from current values.
/// Returns `None` for the index of the first singular matrix.
pub fn batched_inverse(w: &Tensor) -> Result<std::result::Result<Tensor, usize>> {
    let (n, d, _) = w.dims3()?;
    let data = w.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let mut out = Vec::with_capacity(n * d * d);
    for (i, m) in split_matrices(&data, d).into_iter().enumerate() {
        let Some(inv) = m.try_inverse() else {
            return Ok(Err(i));
        };
        for r in 0..d {
            for c in 0..d {
                out.push(inv[(r, c)]);
            }
        }
    }
    Ok(Ok(Tensor::from_vec(out, (n, d, d), w.device())?.to_dtype(w.dtype())?))
}

/// Per-matrix `|det|` of a stack `[n, d, d]`.
pub fn abs_dets(w: &Tensor) -> Result<Vec<f64>> {
    let (_, d, _) = w.dims3()?;
    let data = w.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(split_matrices(&data, d)
        .iter()
        .map(|m| {
            let (l, s) = slogdet(m);
            if s == 0.0 {
                0.0
            } else {
                l.exp()
            }
        })
        .collect())
}

/// Random orthogonal `d x d` matrix (row-major) from the QR factorization of
/// a Gaussian matrix, with column signs fixed so the distribution is uniform.
pub fn random_orthogonal(d: usize, rng: &mut NoiseRng) -> Vec<f64> {
    let g = DMatrix::from_row_slice(d, d, &rng.normal_vec(d * d));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..d {
        if r[(c, c)] < 0.0 {
            for row in 0..d {
                q[(row, c)] = -q[(row, c)];
            }
        }
    }
    let mut out = Vec::with_capacity(d * d);
    for row in 0..d {
        for c in 0..d {
            out.push(q[(row, c)]);
        }
    }
    out
}
