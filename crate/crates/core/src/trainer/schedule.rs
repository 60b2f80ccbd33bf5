//! Warmup-stable-decay learning rate.

use super::config::TrainPlan;

/// Learning rate at `step`: linear ramp from 0 to `peak_lr` over the warmup,
/// constant `peak_lr`, then a linear decay to 0 over the final
/// `decay_fraction` of the steps.
pub fn wsd_lr(step: usize, plan: &TrainPlan) -> f64 {
    let total = plan.total_steps;
    let warmup = plan.warmup();
    let decay = plan.decay_steps();
    let peak = plan.peak_lr;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let decay_start = total - decay;
    if step >= decay_start && decay > 0 {
        return peak * (total.saturating_sub(step)) as f64 / decay as f64;
    }
    peak
}
