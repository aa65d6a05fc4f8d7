//! Gamma-family special functions used by the Beta KL and the Beta samplers.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, with reflection below 1/2).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Γ(x)Γ(1-x) = π / sin(πx)
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `ln B(a, b) = ln Γ(a) + ln Γ(b) - ln Γ(a + b)`.
pub fn log_beta_fn(a: f64, b: f64) -> Result<f64> {
    check_positive("a", a)?;
    check_positive("b", b)?;
    Ok(ln_beta_unchecked(a, b))
}

pub(crate) fn ln_beta_unchecked(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Digamma ψ(x) for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    check_positive("digamma argument", x)?;
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    // shift into the asymptotic regime with ψ(x) = ψ(x+1) - 1/x
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * 691.0 / 32760.0)))));
    acc + x.ln() - 0.5 * inv - series
}

/// Trigamma ψ'(x) for `x > 0`; the derivative of [`digamma`].
pub fn trigamma(x: f64) -> Result<f64> {
    check_positive("trigamma argument", x)?;
    Ok(trigamma_unchecked(x))
}

pub(crate) fn trigamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        + 0.5 * inv2
        + inv * inv2
            * (1.0 / 6.0
                - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0))));
    acc + series
}

/// Regularized incomplete Beta function `I_x(a, b)`.
pub fn beta_inc_reg(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - ln_beta_unchecked(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cont_frac(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cont_frac(b, a, 1.0 - x) / b
    }
}

// Modified Lentz evaluation of the incomplete Beta continued fraction.
fn beta_cont_frac(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=1000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Beta density at `x ∈ (0, 1)`.
pub fn beta_pdf(a: f64, b: f64, x: f64) -> f64 {
    ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta_unchecked(a, b)).exp()
}

/// Inverse of `x ↦ I_x(a, b)`: safeguarded Newton on [0, 1].
pub fn beta_inc_reg_inv(a: f64, b: f64, u: f64) -> f64 {
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    // start from the mean; Newton steps that leave the bracket fall back to bisection
    let mut x = (a / (a + b)).clamp(1e-12, 1.0 - 1e-12);
    for _ in 0..200 {
        let f = beta_inc_reg(a, b, x) - u;
        if f.abs() < 1e-15 {
            break;
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let pdf = beta_pdf(a, b, x);
        let mut next = x - f / pdf;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() < 1e-16 * x.max(1e-300) {
            x = next;
            break;
        }
        x = next;
    }
    x
}

fn check_positive(what: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositive { what, value })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER: f64 = 0.577_215_664_901_532_9;

    // composite Simpson on [lo, hi]
    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / n as f64;
        let mut s = f(lo) + f(hi);
        for i in 1..n {
            let x = lo + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - PI.sqrt().ln()).abs() < 1e-14);
        // Γ(10) = 9!
        assert!((ln_gamma(10.0) - 362_880.0_f64.ln()).abs() < 1e-12);
        // Stirling-dominated regime
        let x = 1000.0_f64;
        let stirling = (x - 0.5) * x.ln() - x + 0.5 * (2.0 * PI).ln() + 1.0 / (12.0 * x)
            - 1.0 / (360.0 * x.powi(3));
        assert!(((ln_gamma(x) - stirling) / stirling).abs() < 1e-12);
    }

    #[test]
    fn log_beta_examples() {
        assert!(log_beta_fn(1.0, 1.0).unwrap().abs() < 1e-14);
        // quadrature oracle for B(2,1) = ∫ u du
        let q = simpson(|u| u, 0.0, 1.0, 1000);
        assert!((log_beta_fn(2.0, 1.0).unwrap() - q.ln()).abs() < 1e-12);
        assert!((log_beta_fn(2.0, 1.0).unwrap() + 2.0_f64.ln()).abs() < 1e-12);
        // B(1/2,1/2) = π; substitute u = sin²θ so the integrand is 2 on [0, π/2]
        let q = simpson(|_| 2.0, 0.0, PI / 2.0, 100);
        assert!((log_beta_fn(0.5, 0.5).unwrap() - q.ln()).abs() < 1e-12);
        assert!((log_beta_fn(0.5, 0.5).unwrap() - 1.144_729_885_849_400_2).abs() < 1e-10);
        assert!(log_beta_fn(0.0, 1.0).is_err());
        assert!(log_beta_fn(1.0, -2.0).is_err());
    }

    #[test]
    fn log_beta_relative_accuracy_over_range() {
        // symmetric identity B(a,b)=B(b,a) and recurrence B(a+1,b) = B(a,b)·a/(a+b)
        for &a in &[1e-3, 0.01, 0.3, 1.7, 12.0, 150.0, 1e3] {
            for &b in &[1e-3, 0.05, 0.9, 3.3, 40.0, 1e3] {
                let lhs = ln_beta_unchecked(a + 1.0, b);
                let rhs = ln_beta_unchecked(a, b) + (a / (a + b)).ln();
                assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0), "a={a} b={b}");
                assert!((ln_beta_unchecked(a, b) - ln_beta_unchecked(b, a)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn digamma_examples() {
        assert!((digamma(1.0).unwrap() + EULER).abs() < 1e-12);
        assert!((digamma(2.0).unwrap() - (1.0 - EULER)).abs() < 1e-12);
        assert!(digamma(0.0).is_err());
        assert!(digamma(-1.0).is_err());
        // high-order central difference of ln Γ
        for &x in &[0.3, 1.0, 2.5, 7.0, 33.0] {
            let h = 1e-3;
            let fd = (-ln_gamma(x + 2.0 * h) + 8.0 * ln_gamma(x + h) - 8.0 * ln_gamma(x - h)
                + ln_gamma(x - 2.0 * h))
                / (12.0 * h);
            assert!((digamma(x).unwrap() - fd).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn digamma_recurrence() {
        let mut x = 0.1;
        while x <= 100.0 {
            let d = digamma_unchecked(x + 1.0) - digamma_unchecked(x);
            assert!((d - 1.0 / x).abs() < 1e-9, "x={x}");
            x += 0.37;
        }
    }

    #[test]
    fn trigamma_matches_digamma_derivative() {
        assert!((trigamma(1.0).unwrap() - PI * PI / 6.0).abs() < 1e-12);
        for &x in &[0.05_f64, 0.5, 1.3, 9.9, 10.1, 250.0] {
            let h = 1e-5 * x.max(1.0);
            let fd = (digamma_unchecked(x + h) - digamma_unchecked(x - h)) / (2.0 * h);
            assert!(((trigamma_unchecked(x) - fd) / fd).abs() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn incomplete_beta_matches_closed_forms() {
        // I_x(a,1) = x^a, I_x(1,b) = 1-(1-x)^b
        for &x in &[0.01, 0.3, 0.5, 0.77, 0.999] {
            assert!((beta_inc_reg(2.5, 1.0, x) - x.powf(2.5)).abs() < 1e-13);
            assert!((beta_inc_reg(1.0, 3.0, x) - (1.0 - (1.0 - x).powi(3))).abs() < 1e-13);
            // quadrature of the density
            let q = simpson(|t| beta_pdf(2.0, 3.0, t), 0.0, x, 2000);
            assert!((beta_inc_reg(2.0, 3.0, x) - q).abs() < 1e-10);
        }
    }

    #[test]
    fn incomplete_beta_inverse_round_trip() {
        for &(a, b) in &[(0.5, 0.5), (2.0, 3.0), (20.0, 1.0), (1.0, 1.0), (0.1, 4.0)] {
            for &u in &[1e-4, 0.1, 0.5, 0.9, 0.9999] {
                let x = beta_inc_reg_inv(a, b, u);
                assert!((beta_inc_reg(a, b, x) - u).abs() < 1e-9, "a={a} b={b} u={u}");
            }
        }
    }
}
