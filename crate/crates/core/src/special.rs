//! Special functions used by the variational objective.
//!
//! All three gamma-family functions shift the argument upward with the
//! standard recurrences until `x >= SHIFT`, then evaluate an asymptotic
//! series. With `SHIFT = 10` the truncated series error is below 1e-15.

use std::f64::consts::PI;

const SHIFT: f64 = 10.0;

/// B_{2k} / (2k) for k = 1..7.
const DIGAMMA_SERIES: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
];

/// B_{2k} for k = 1..7, the coefficients of x^{-(2k+1)} in trigamma.
const TRIGAMMA_SERIES: [f64; 7] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
];

/// B_{2k} / (2k (2k-1)) for k = 1..7 (Stirling series).
const STIRLING_SERIES: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
];

/// Digamma ψ(x) for x > 0. Returns NaN for x <= 0 or NaN input.
pub fn digamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    if x.is_infinite() {
        return f64::INFINITY;
    }
    let mut acc = 0.0;
    let mut x = x;
    while x < SHIFT {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    let mut pow = inv2;
    let mut series = 0.0;
    for c in DIGAMMA_SERIES {
        series += c * pow;
        pow *= inv2;
    }
    acc + x.ln() - 0.5 / x - series
}

/// Trigamma ψ'(x) for x > 0.
pub fn trigamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    if x.is_infinite() {
        return 0.0;
    }
    let mut acc = 0.0;
    let mut x = x;
    while x < SHIFT {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut pow = inv2 * inv;
    let mut series = 0.0;
    for c in TRIGAMMA_SERIES {
        series += c * pow;
        pow *= inv2;
    }
    acc + inv + 0.5 * inv2 + series
}

/// Natural log of the gamma function for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    if x.is_infinite() {
        return f64::INFINITY;
    }
    let mut x = x;
    let mut prod = 1.0;
    while x < SHIFT {
        prod *= x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut pow = inv;
    let mut series = 0.0;
    for c in STIRLING_SERIES {
        series += c * pow;
        pow *= inv2;
    }
    (x - 0.5) * x.ln() - x + 0.5 * (2.0 * PI).ln() + series - prod.ln()
}

/// log Σ exp(v), stable under large magnitudes. Empty input gives -inf.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalize log-weights in place into a probability vector.
///
/// Returns the log normalizer. If every entry is -inf the vector is left
/// untouched and -inf is returned; callers decide whether that is an error.
pub fn normalize_log_weights(values: &mut [f64]) -> f64 {
    let lse = log_sum_exp(values);
    if !lse.is_finite() {
        return lse;
    }
    for v in values.iter_mut() {
        *v = (*v - lse).exp();
    }
    lse
}

/// Σ p log p with the 0 log 0 = 0 convention.
pub fn neg_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn digamma_known_values() {
        assert!((digamma(1.0) + EULER).abs() < 1e-14);
        assert!((digamma(0.5) + EULER + 2.0 * 2f64.ln()).abs() < 1e-14);
        // ψ(2) = 1 - γ
        assert!((digamma(2.0) - (1.0 - EULER)).abs() < 1e-14);
        // ψ(1/4) = -γ - π/2 - 3 ln 2
        let expected = -EULER - PI / 2.0 - 3.0 * 2f64.ln();
        assert!((digamma(0.25) - expected).abs() < 1e-13);
        assert!(digamma(0.0).is_nan());
        assert!(digamma(-1.5).is_nan());
    }

    #[test]
    fn digamma_recurrence_holds_across_range() {
        for i in 1..400 {
            let x = 0.013 * i as f64 + 1e-3;
            let lhs = digamma(x + 1.0) - digamma(x);
            assert!((lhs - 1.0 / x).abs() < 1e-12 * (1.0 + 1.0 / x), "x={x}");
        }
    }

    #[test]
    fn trigamma_known_values() {
        assert!((trigamma(1.0) - PI * PI / 6.0).abs() < 1e-14);
        assert!((trigamma(0.5) - PI * PI / 2.0).abs() < 1e-13);
        for i in 1..200 {
            let x = 0.05 * i as f64;
            let lhs = trigamma(x) - trigamma(x + 1.0);
            assert!((lhs - 1.0 / (x * x)).abs() < 1e-11 * (1.0 + 1.0 / (x * x)));
        }
    }

    #[test]
    fn trigamma_is_derivative_of_digamma() {
        for &x in &[0.3, 1.0, 2.7, 9.5, 10.5, 40.0] {
            let h = 1e-5;
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!((fd - trigamma(x)).abs() < 1e-8 * trigamma(x).max(1.0));
        }
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - 0.5 * PI.ln()).abs() < 1e-14);
        // Γ(5) = 24
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-14);
        // Γ(21) = 20!
        let fact20: f64 = (1..=20).map(|k| k as f64).product();
        assert!((ln_gamma(21.0) - fact20.ln()).abs() < 1e-12);
        for i in 1..300 {
            let x = 0.02 * i as f64;
            assert!((ln_gamma(x + 1.0) - ln_gamma(x) - x.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        let mut v = vec![0.0, f64::NEG_INFINITY, 0.0];
        normalize_log_weights(&mut v);
        assert_eq!(v, vec![0.5, 0.0, 0.5]);
    }
}
