use std::f64::consts::PI;

/// Cosine decay from `lr0` at step 0 to zero at step `total`.
pub fn cosine_lr(t: u64, total: u64, lr0: f64) -> f64 {
    debug_assert!(total > 0);
    let frac = (t.min(total) as f64) / (total as f64);
    lr0 * 0.5 * (1.0 + (PI * frac).cos())
}
