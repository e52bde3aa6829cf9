//! Scalar numeric helpers: log-gamma and small softmax utilities.

/// Natural log of the gamma function for positive arguments, via the
/// Lanczos approximation (g = 7, 9 coefficients), with the reflection
/// formula for x < 0.5. Relative error is well below 1e-12 over the
/// range used here (up to ~1e6).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    const G: f64 = 7.0;

    if x < 0.5 {
        // Reflection: ln Gamma(x) = ln(pi / sin(pi x)) - ln Gamma(1 - x).
        let s = (std::f64::consts::PI * x).sin();
        return (std::f64::consts::PI / s.abs()).ln() - ln_gamma(1.0 - x);
    }

    let x = x - 1.0;
    let mut a = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Numerically stable softmax of a logit slice.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| ((v as f64) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Stable log-softmax of a logit slice.
pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let sum: f64 = logits.iter().map(|&v| ((v as f64) - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|&v| (v as f64) - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_matches_factorials() {
        // Gamma(n+1) = n!; sum logs in f64 as the reference.
        let mut log_fact = 0.0f64;
        for n in 2..60u32 {
            log_fact += (n as f64).ln();
            let got = ln_gamma(n as f64 + 1.0) - ln_gamma(n as f64);
            assert!((got - (n as f64).ln()).abs() < 1e-12);
            let rel = (ln_gamma((n + 1) as f64) - log_fact).abs() / log_fact.max(1.0);
            assert!(rel < 1e-13, "n={n} rel={rel}");
        }
    }

    #[test]
    fn ln_gamma_half_integers() {
        let sqrt_pi = std::f64::consts::PI.sqrt();
        assert!((ln_gamma(0.5) - sqrt_pi.ln()).abs() < 1e-14);
        assert!((ln_gamma(1.5) - (sqrt_pi / 2.0).ln()).abs() < 1e-14);
        assert!((ln_gamma(2.5) - (3.0 * sqrt_pi / 4.0).ln()).abs() < 1e-14);
    }

    #[test]
    fn ln_gamma_duplication_formula() {
        // Gamma(z) Gamma(z + 1/2) = 2^(1-2z) sqrt(pi) Gamma(2z).
        for &z in &[0.7, 1.3, 2.9, 7.5, 31.25, 400.0, 9.5e5] {
            let lhs = ln_gamma(z) + ln_gamma(z + 0.5);
            let rhs = (1.0 - 2.0 * z) * 2.0f64.ln()
                + 0.5 * std::f64::consts::PI.ln()
                + ln_gamma(2.0 * z);
            assert!((lhs - rhs).abs() / rhs.abs().max(1.0) < 1e-12, "z={z}");
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, -3.0, 0.5]);
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let lp = log_softmax(&[1.0, 2.0, -3.0, 0.5]);
        for (a, b) in p.iter().zip(lp.iter()) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }
}
