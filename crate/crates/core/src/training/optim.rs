use candle_core::{backprop::GradStore, Tensor};

use crate::compute::{ops, Parameter};
use crate::Result;

/// Adam with optional AMSGrad (running maximum of the second moment).
#[derive(Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub amsgrad: bool,
    params: Vec<Parameter>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    v_max: Vec<Tensor>,
    t: usize,
}

impl Adam {
    pub fn new(params: Vec<Parameter>, beta1: f64, beta2: f64, eps: f64, amsgrad: bool) -> Result<Self> {
        let zeros = |p: &Parameter| p.var.as_tensor().zeros_like();
        let m = params.iter().map(zeros).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            beta1,
            beta2,
            eps,
            amsgrad,
            v: m.clone(),
            v_max: m.clone(),
            m,
            params,
            t: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// One update with learning rate `lr`; parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..self.params.len() {
            let p = &self.params[i];
            let g = match grads.get(p.var.as_tensor()) {
                Some(g) => g.detach(),
                None => p.var.as_tensor().zeros_like()?,
            };
            self.m[i] = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            self.v[i] = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let v_hat = if self.amsgrad {
                self.v_max[i] = self.v_max[i].maximum(&self.v[i])?;
                &self.v_max[i]
            } else {
                &self.v[i]
            };
            let denom = ((v_hat / bc2)?.sqrt()? + self.eps)?;
            let update = ((&self.m[i] / bc1)? / denom)?;
            let new = (p.var.as_tensor().detach() - (update * lr)?)?;
            p.var.set(&new)?;
        }
        Ok(())
    }
}

/// Global L2 norm of the gradients of `params`.
pub fn grad_norm(grads: &GradStore, params: &[Parameter]) -> Result<f64> {
    let mut total = 0.0;
    for p in params {
        if let Some(g) = grads.get(p.var.as_tensor()) {
            total += ops::to_f64_scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    Ok(total.sqrt())
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradStore, params: &[Parameter], max_norm: f64) -> Result<f64> {
    let norm = grad_norm(grads, params)?;
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for p in params {
            if let Some(g) = grads.get(p.var.as_tensor()) {
                let scaled = (g * scale)?;
                grads.insert(p.var.as_tensor(), scaled);
            }
        }
    }
    Ok(norm)
}
