//! Special functions: log-gamma, digamma, the regularized incomplete beta
//! function, and the Student-t / normal quantiles built on them.

use std::f64::consts::PI;

use statrs::distribution::{ContinuousCDF, Normal};

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

/// Natural log of the gamma function for `x > 0`.
///
/// Lanczos approximation (g = 7, nine coefficients), with the reflection
/// formula below 0.5. Returns NaN outside the domain; see [`ln_gamma_checked`].
pub fn ln_gamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1-x) = π / sin(πx); sin(πx) > 0 on (0, 0.5).
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

pub fn ln_gamma_checked(x: f64) -> Result<f64> {
    if x > 0.0 && x.is_finite() {
        Ok(ln_gamma(x))
    } else {
        Err(Error::domain("lgamma", format!("argument must be > 0, got {x}")))
    }
}

/// Digamma ψ(x) = d/dx ln Γ(x) for `x > 0`.
///
/// Shifts the argument above 10 with ψ(x) = ψ(x + 1) − 1/x, then applies the
/// asymptotic expansion in 1/x².
pub fn digamma(x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut x = x;
    let mut shift = 0.0;
    while x < 10.0 {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli-number series: 1/12, 1/120, 1/252, 1/240, 1/132, 691/32760, 1/12
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32_760.0 - inv2 / 12.0))))));
    shift + x.ln() - 0.5 * inv - series
}

/// Stirling remainder: ln Γ(x) − [(x − ½) ln x − x + ½ ln 2π], for large x.
fn stirling_tail(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 / 1680.0)))
}

fn ln_beta(a: f64, b: f64) -> f64 {
    let (small, large) = if a < b { (a, b) } else { (b, a) };
    if large < 50.0 {
        return ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    }
    // ln Γ(large) − ln Γ(large + small) without subtracting two huge numbers.
    let diff = -(large - 0.5) * (small / large).ln_1p() - small * (large + small).ln()
        + small
        + stirling_tail(large)
        - stirling_tail(large + small);
    ln_gamma(small) + diff
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 20_000;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;

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
    for m in 1..=MAX_ITER {
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

/// Regularized incomplete beta function I_x(a, b).
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    inc_beta_split(a, b, x, 1.0 - x)
}

/// I_x(a, b) with the complement `y = 1 − x` supplied separately, so callers
/// that know `y` accurately (x close to 1) keep full precision.
fn inc_beta_split(a: f64, b: f64, x: f64, y: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if y <= 0.0 {
        return 1.0;
    }
    let ln_x = if x > 0.5 { (-y).ln_1p() } else { x.ln() };
    let ln_y = if y > 0.5 { (-x).ln_1p() } else { y.ln() };
    let ln_front = a * ln_x + b * ln_y - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_continued_fraction(b, a, y) / b
    }
}

/// CDF of the standard Student-t distribution with `dof` degrees of freedom.
pub fn student_t_cdf(t: f64, dof: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let t2 = t * t;
    let x = dof / (dof + t2);
    let y = t2 / (dof + t2);
    let tail = 0.5 * inc_beta_split(0.5 * dof, 0.5, x, y);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Quantile of the standard Student-t distribution, found by bisection on
/// [`student_t_cdf`].
pub fn student_t_quantile(dof: f64, prob: f64) -> Result<f64> {
    if !(dof > 0.0) || !dof.is_finite() {
        return Err(Error::domain("student_t_quantile", format!("dof must be > 0, got {dof}")));
    }
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::domain(
            "student_t_quantile",
            format!("probability must lie in (0, 1), got {prob}"),
        ));
    }
    if prob == 0.5 {
        return Ok(0.0);
    }
    if prob < 0.5 {
        return student_t_quantile(dof, 1.0 - prob).map(|q| -q);
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while student_t_cdf(hi, dof) < prob {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::domain("student_t_quantile", "quantile overflows f64"));
        }
    }
    for _ in 0..2_000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let c = student_t_cdf(mid, dof);
        if c < prob {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Quantile of the standard normal distribution.
pub fn normal_quantile(prob: f64) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::domain(
            "normal_quantile",
            format!("probability must lie in (0, 1), got {prob}"),
        ));
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(prob))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factorial(n: u64) -> f64 {
        (1..=n).map(|k| k as f64).product()
    }

    #[test]
    fn ln_gamma_integers_and_half() {
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(5.0) - 3.178_054).abs() < 1e-6);
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        for n in 1..20u64 {
            let exact = factorial(n - 1).ln();
            assert!((ln_gamma(n as f64) - exact).abs() < 1e-12 * exact.abs().max(1.0), "n={n}");
        }
        assert!((ln_gamma(0.5) - PI.sqrt().ln()).abs() < 1e-13);
        // Γ(0.1) = 9.513507698668732
        assert!((ln_gamma(0.1) - 9.513_507_698_668_732f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ln_gamma_rejects_non_positive() {
        assert!(ln_gamma(0.0).is_nan());
        assert!(ln_gamma(-1.5).is_nan());
        assert!(matches!(ln_gamma_checked(-2.0), Err(Error::Domain { .. })));
    }

    #[test]
    fn digamma_known_values() {
        let euler = 0.577_215_664_901_532_9;
        assert!((digamma(1.0) + euler).abs() < 1e-13);
        assert!((digamma(0.5) + euler + 2.0 * 2f64.ln()).abs() < 1e-13);
        assert!((digamma(10.0) - 2.251_752_589_066_721).abs() < 1e-13);
    }

    #[test]
    fn digamma_matches_ln_gamma_finite_difference() {
        // Central difference on the log-gamma forward, h = 1e-6.
        let h = 1e-6;
        for &x in &[0.3, 1.0, 1.7, 2.5, 7.3, 42.0] {
            let fd = (ln_gamma(x + h) - ln_gamma(x - h)) / (2.0 * h);
            assert!((digamma(x) - fd).abs() < 1e-7, "x={x}");
        }
        let fd1 = (ln_gamma(1.0 + h) - ln_gamma(1.0 - h)) / (2.0 * h);
        assert!((fd1 + 0.577_216).abs() < 1e-6);
    }

    #[test]
    fn ln_beta_large_argument_branch_is_continuous() {
        for &(a, b) in &[(49.9, 0.5), (50.0, 0.5), (60.0, 3.0), (80.0, 70.0)] {
            let direct = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
            assert!((ln_beta(a, b) - direct).abs() < 1e-11, "a={a} b={b}");
        }
    }

    #[test]
    fn student_t_cdf_closed_forms() {
        // dof = 1 is Cauchy, dof = 2 has an algebraic CDF.
        for &t in &[-3.0, -0.5, 0.0, 0.7, 2.0, 10.0] {
            let cauchy = 0.5 + (t as f64).atan() / PI;
            assert!((student_t_cdf(t, 1.0) - cauchy).abs() < 1e-13);
            let two = 0.5 + t / (2.0 * (2.0 + t * t).sqrt());
            assert!((student_t_cdf(t, 2.0) - two).abs() < 1e-13);
        }
    }

    #[test]
    fn student_t_quantile_examples() {
        assert!((student_t_quantile(1.0, 0.75).unwrap() - 1.0).abs() < 1e-10);
        for &dof in &[0.5, 1.0, 3.0, 30.0, 1e4] {
            assert_eq!(student_t_quantile(dof, 0.5).unwrap(), 0.0);
        }
        // Bisection against the closed-form dof = 2 CDF, ½ + t / (2√(2 + t²)).
        let oracle = {
            let (mut lo, mut hi) = (0.0f64, 100.0f64);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if 0.5 + mid / (2.0 * (2.0 + mid * mid).sqrt()) < 0.95 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let q = student_t_quantile(2.0, 0.95).unwrap();
        assert!((q - oracle).abs() < 1e-9);
        assert!((q - 2.919_986).abs() < 1e-6);
    }

    #[test]
    fn student_t_quantile_inverts_cdf() {
        for &dof in &[0.8, 2.0, 4.0, 9.5, 60.0, 2e6] {
            for &p in &[0.001, 0.05, 0.3, 0.6, 0.95, 0.999] {
                let q = student_t_quantile(dof, p).unwrap();
                assert!((student_t_cdf(q, dof) - p).abs() < 1e-10, "dof={dof} p={p} q={q} cdf={}", student_t_cdf(q, dof));
            }
        }
    }

    #[test]
    fn quantile_domain_errors() {
        assert!(student_t_quantile(2.0, 0.0).is_err());
        assert!(student_t_quantile(2.0, 1.0).is_err());
        assert!(student_t_quantile(0.0, 0.5).is_err());
        assert!(normal_quantile(1.5).is_err());
    }

    #[test]
    fn normal_quantile_reference() {
        assert!((normal_quantile(0.95).unwrap() - 1.644_853_626_951_472_2).abs() < 1e-12);
        assert!(normal_quantile(0.5).unwrap().abs() < 1e-15);
    }
}
