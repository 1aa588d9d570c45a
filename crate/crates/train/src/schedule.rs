use std::f64::consts::PI;

/// Linear warmup to `peak`, then cosine decay to `floor` at `total_steps`.
///
/// Step `t` is zero-based. Warmup steps use `peak * (t + 1) / (warmup + 1)`,
/// so the first step is non-zero and step `warmup` is exactly `peak`. Steps
/// past `total_steps` stay at `floor`.
pub fn learning_rate(t: usize, peak: f64, floor: f64, warmup: usize, total_steps: usize) -> f64 {
    if t < warmup {
        return peak * (t + 1) as f64 / (warmup + 1) as f64;
    }
    let span = total_steps.saturating_sub(warmup).max(1) as f64;
    let progress = ((t - warmup) as f64 / span).min(1.0);
    // Same as floor + (peak - floor)(1 + cos)/2, but exact at the peak.
    peak - 0.5 * (peak - floor) * (1.0 - (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_at_end_of_warmup() {
        assert_eq!(learning_rate(10, 6e-5, 6e-6, 10, 100), 6e-5);
        assert_eq!(learning_rate(0, 6e-5, 6e-6, 0, 100), 6e-5);
    }

    #[test]
    fn constant_when_peak_equals_floor() {
        for t in 0..50 {
            assert_eq!(learning_rate(t, 1e-3, 1e-3, 0, 50), 1e-3);
        }
    }

    #[test]
    fn warmup_ramp_and_floor() {
        assert!((learning_rate(0, 1.0, 0.1, 4, 20) - 0.2).abs() < 1e-15);
        assert!((learning_rate(3, 1.0, 0.1, 4, 20) - 0.8).abs() < 1e-15);
        assert!((learning_rate(20, 1.0, 0.1, 4, 20) - 0.1).abs() < 1e-15);
        assert!((learning_rate(500, 1.0, 0.1, 4, 20) - 0.1).abs() < 1e-15);
        assert!((learning_rate(12, 1.0, 0.1, 4, 20) - 0.55).abs() < 1e-15);
    }

    #[test]
    fn monotone_after_warmup() {
        let lrs: Vec<f64> = (5..=40).map(|t| learning_rate(t, 1.0, 0.1, 5, 40)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
