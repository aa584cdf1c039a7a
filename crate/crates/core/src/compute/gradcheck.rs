//! Central-difference gradient verification.

use candle_core::{DType, Tensor};

use crate::compute::{ops, NoiseRng, Parameter};
use crate::{Error, Result};

/// Below this magnitude on both sides the absolute difference is reported.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_error: f64,
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords.iter().max_by(|a, b| a.error.total_cmp(&b.error))
    }
}

/// `|a - n| / (|a| + |n| + 1e-12)`, or `|a - n|` when both are below
/// [`ABS_FLOOR`].
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < ABS_FLOOR && numeric.abs() < ABS_FLOOR {
        diff
    } else {
        diff / (analytic.abs() + numeric.abs() + 1e-12)
    }
}

fn set_element(p: &Parameter, index: usize, value: f64) -> Result<()> {
    let t = p.var.as_tensor();
    let mut data = ops::to_f64_vec(t)?;
    data[index] = value;
    p.var.set(&Tensor::from_vec(data, t.dims(), t.device())?)?;
    Ok(())
}

fn eval_scalar(f: &mut impl FnMut() -> Result<Tensor>, what: &str) -> Result<f64> {
    let v = ops::to_f64_scalar(&f()?)?;
    if !v.is_finite() {
        return Err(Error::NonFinite { what: what.to_string() });
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences at `n_coords` coordinates drawn from `params` (a parameter
/// uniformly, then an element uniformly). `f` must be deterministic, and every
/// parameter must be 64-bit.
pub fn finite_difference_check(
    mut f: impl FnMut() -> Result<Tensor>,
    params: &[Parameter],
    epsilon: f64,
    n_coords: usize,
    rng: &mut NoiseRng,
) -> Result<GradCheckReport> {
    if params.is_empty() {
        return Err(Error::Config("gradient check needs at least one parameter".into()));
    }
    if let Some(p) = params.iter().find(|p| p.var.dtype() != DType::F64) {
        return Err(Error::Config(format!(
            "gradient check requires 64-bit parameters; `{}` is {:?}",
            p.name,
            p.var.dtype()
        )));
    }
    let loss = f()?;
    if !ops::to_f64_scalar(&loss)?.is_finite() {
        return Err(Error::NonFinite { what: "in the checked function at the base point".into() });
    }
    let grads = loss.backward()?;

    let mut coords = Vec::with_capacity(n_coords);
    for _ in 0..n_coords {
        let p = &params[rng.below(params.len())];
        let index = rng.below(p.var.elem_count());
        let analytic = match grads.get(p.var.as_tensor()) {
            Some(g) => ops::to_f64_vec(g)?[index],
            None => 0.0,
        };
        let original = ops::to_f64_vec(p.var.as_tensor())?[index];
        let what = format!("after perturbing `{}`[{index}]", p.name);
        set_element(p, index, original + epsilon)?;
        let plus = eval_scalar(&mut f, &what);
        set_element(p, index, original - epsilon)?;
        let minus = eval_scalar(&mut f, &what);
        set_element(p, index, original)?;
        let numeric = (plus? - minus?) / (2.0 * epsilon);
        coords.push(CoordCheck {
            param: p.name.clone(),
            index,
            analytic,
            numeric,
            error: gradient_error(analytic, numeric),
        });
    }
    let max_error = coords.iter().map(|c| c.error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_error, coords })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::ParamStore;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut store = ParamStore::new(DType::F64);
        let t = Tensor::new(values, &candle_core::Device::Cpu).unwrap();
        store.insert("w", t, true).unwrap();
        store
    }

    #[test]
    fn square_at_three() {
        let store = store_with(&[3.0]);
        let p = store.get("w").unwrap().clone();
        let w = p.var.as_tensor().clone();
        let report =
            finite_difference_check(|| Ok(w.sqr()?.sum_all()?), &[p], 1e-5, 1, &mut NoiseRng::new(0)).unwrap();
        assert!((report.coords[0].analytic - 6.0).abs() < 1e-12);
        assert!(report.max_error < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_function_hits_absolute_floor() {
        let store = store_with(&[1.0, 2.0]);
        let p = store.get("w").unwrap().clone();
        let w = p.var.as_tensor().clone();
        let report = finite_difference_check(
            || Ok(((w.sum_all()? * 0.0)? + 4.0)?),
            &[p],
            1e-5,
            4,
            &mut NoiseRng::new(1),
        )
        .unwrap();
        assert!(report.max_error < 1e-6);
    }

    #[test]
    fn non_finite_names_parameter() {
        let store = store_with(&[0.0]);
        let p = store.get("w").unwrap().clone();
        let w = p.var.as_tensor().clone();
        // log|w| is finite at the base point only after shifting by 1e-6
        let err = finite_difference_check(
            || Ok(((w.clone() - 1e-6)?.abs()?.log()?.sum_all())?),
            &[p],
            1e-6,
            1,
            &mut NoiseRng::new(2),
        )
        .unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }

    #[test]
    fn rejects_32_bit_parameters() {
        let mut store = ParamStore::new(DType::F32);
        store
            .insert("w", Tensor::new(&[1.0f32], &candle_core::Device::Cpu).unwrap(), true)
            .unwrap();
        let p = store.get("w").unwrap().clone();
        let w = p.var.as_tensor().clone();
        assert!(finite_difference_check(|| Ok(w.sum_all()?), &[p], 1e-5, 1, &mut NoiseRng::new(0)).is_err());
    }
}
