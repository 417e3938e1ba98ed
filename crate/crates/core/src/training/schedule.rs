use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warmup followed by half-cosine decay to zero.
///
/// During warmup `lr = base_lr·(step+1)/warmup_steps`; afterwards
/// `lr = ½·base_lr·(1 + cos(π·(step−warmup)/(total−warmup)))`.
pub fn lr_at_step(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::invalid(format!("step {step} outside schedule of {total_steps} steps")));
    }
    if warmup_steps >= total_steps {
        return Err(Error::invalid(format!("warmup {warmup_steps} must be shorter than the schedule ({total_steps})")));
    }
    if !(base_lr >= 0.0 && base_lr.is_finite()) {
        return Err(Error::invalid(format!("base learning rate must be finite and >= 0, got {base_lr}")));
    }
    let lr = if step < warmup_steps {
        base_lr * (step + 1) as f64 / warmup_steps as f64
    } else {
        let t = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
        0.5 * base_lr * (1.0 + (PI * t).cos())
    };
    Ok(lr.max(0.0))
}

/// `base_lr × batch / 256`.
pub fn scaled_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}
