//! Piecewise-linear monotone maps of the unit interval with equal-width
//! bins. Bin probabilities come from a softmax over unnormalized weights.

/// Coordinates are kept this far away from the interval ends.
pub const UNIT_EPS: f64 = 1e-6;

/// Result of mapping one coordinate.
#[derive(Clone, Copy, Debug)]
pub struct PwlPoint {
    /// Mapped coordinate.
    pub value: f64,
    /// `ln(B * q_b)` for the bin `b` the input fell in (forward) or
    /// `-ln(B * q_b)` for the inverse.
    pub log_det: f64,
    pub bin: usize,
    /// The input after clamping into `[UNIT_EPS, 1 - UNIT_EPS]`.
    pub input: f64,
    pub clamped: bool,
}

/// Numerically stable softmax into `out`.
pub fn softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn clamp_unit(u: f64) -> (f64, bool) {
    if u < UNIT_EPS {
        (UNIT_EPS, true)
    } else if u > 1.0 - UNIT_EPS {
        (1.0 - UNIT_EPS, true)
    } else {
        (u, false)
    }
}

/// Map `u` through the CDF with bin probabilities `probs`.
pub fn forward(u: f64, probs: &[f64]) -> PwlPoint {
    let bins = probs.len();
    let (u, clamped) = clamp_unit(u);
    let scaled = u * bins as f64;
    let bin = (scaled.floor() as usize).min(bins - 1);
    let below: f64 = probs[..bin].iter().sum();
    let value = below + (scaled - bin as f64) * probs[bin];
    PwlPoint {
        value,
        log_det: (bins as f64 * probs[bin]).ln(),
        bin,
        input: u,
        clamped,
    }
}

/// Exact inverse of [`forward`].
pub fn inverse(v: f64, probs: &[f64]) -> PwlPoint {
    let bins = probs.len();
    let (v, clamped) = clamp_unit(v);
    let mut below = 0.0;
    let mut bin = bins - 1;
    for (b, &q) in probs.iter().enumerate() {
        if v < below + q || b == bins - 1 {
            bin = b;
            break;
        }
        below += q;
    }
    let frac = ((v - below) / probs[bin]).clamp(0.0, 1.0);
    PwlPoint {
        value: (bin as f64 + frac) / bins as f64,
        log_det: -(bins as f64 * probs[bin]).ln(),
        bin,
        input: v,
        clamped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_bins_are_identity() {
        let probs = vec![0.1; 10];
        for &u in &[0.03, 0.25, 0.5, 0.77, 0.999] {
            let p = forward(u, &probs);
            assert!((p.value - u).abs() < 1e-15);
            assert!(p.log_det.abs() < 1e-12);
        }
    }

    #[test]
    fn slope_is_bins_times_probability() {
        let mut probs = vec![0.8 / 9.0; 10];
        probs[3] = 0.2;
        let p = forward(0.35, &probs);
        assert_eq!(p.bin, 3);
        assert!((p.log_det - 2f64.ln()).abs() < 1e-12);
        let h = 1e-7;
        let slope = (forward(0.35 + h, &probs).value - forward(0.35 - h, &probs).value) / (2.0 * h);
        assert!((slope - 2.0).abs() < 1e-6);
    }

    #[test]
    fn inverse_undoes_forward() {
        let probs = [0.05, 0.3, 0.1, 0.15, 0.4];
        for i in 1..100 {
            let u = i as f64 / 100.0;
            let f = forward(u, &probs);
            let b = inverse(f.value, &probs);
            assert!((b.value - u).abs() < 1e-12, "{u}");
            assert!((f.log_det + b.log_det).abs() < 1e-12);
        }
    }

    #[test]
    fn endpoints_clamp() {
        let probs = [0.5, 0.5];
        assert!(forward(0.0, &probs).clamped);
        assert!(forward(1.0, &probs).clamped);
        assert!(!forward(0.5, &probs).clamped);
    }
}
