/// KL weight: 0 for the first `zero_steps`, then a linear ramp to 1 over
/// `ramp_steps`, then 1.
pub fn kl_weight(step: usize, zero_steps: usize, ramp_steps: usize) -> f64 {
    if step < zero_steps {
        0.0
    } else if ramp_steps == 0 || step >= zero_steps + ramp_steps {
        1.0
    } else {
        (step - zero_steps) as f64 / ramp_steps as f64
    }
}

/// `lr_init * lr_decay^step`.
pub fn learning_rate(step: usize, lr_init: f64, lr_decay: f64) -> f64 {
    lr_init * lr_decay.powf(step as f64)
}
