use std::f64::consts::PI;

/// Learning-rate multiplier in [0, 1]: linear warmup from 0 at step 0 to 1
/// at `warmup_steps`, then cosine decay reaching 0 at step `total_steps - 1`.
pub fn lr_multiplier(step: usize, total_steps: usize, warmup_steps: usize) -> f64 {
    if total_steps <= 1 {
        return if warmup_steps == 0 { 1.0 } else { 0.0 };
    }
    let last = total_steps - 1;
    let warmup = warmup_steps.min(last);
    if step < warmup {
        return step as f64 / warmup as f64;
    }
    if step >= last {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (last - warmup) as f64;
    0.5 * (1.0 + (PI * progress).cos())
}

pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    (warmup_fraction * total_steps as f64).round() as usize
}
