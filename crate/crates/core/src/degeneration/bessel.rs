//! Modified Bessel function of the second kind, order zero.
//!
//! Three regions: the ascending series up to `x = 2`, Steed's continued
//! fraction (Temme's CF2) up to `x = 20`, and the asymptotic expansion
//! beyond. Each gives about 15 significant digits in its range.

use std::f64::consts::PI;

use crate::error::{Error, Result};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
pub const SERIES_LIMIT: f64 = 2.0;
pub const ASYMPTOTIC_FROM: f64 = 20.0;
const MAX_TERMS: usize = 10_000;

/// `K₀(x)` for `x > 0`.
pub fn bessel_k0(x: f64) -> Result<f64> {
    check(x)?;
    Ok(if x <= SERIES_LIMIT { series(x) } else { (-x).exp() * scaled_large(x) })
}

/// `eˣ·K₀(x)`, finite for every `x > 0`.
pub fn bessel_k0_scaled(x: f64) -> Result<f64> {
    check(x)?;
    Ok(if x <= SERIES_LIMIT { x.exp() * series(x) } else { scaled_large(x) })
}

fn check(x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("K0 needs a finite x > 0, got {x}")))
    }
}

fn series(x: f64) -> f64 {
    let y = 0.25 * x * x;
    let (mut term, mut i0, mut sum, mut harmonic) = (1.0, 1.0, 0.0, 0.0);
    for k in 1..MAX_TERMS {
        let kf = k as f64;
        term *= y / (kf * kf);
        harmonic += 1.0 / kf;
        i0 += term;
        sum += term * harmonic;
        if term < 1e-17 * i0 {
            break;
        }
    }
    -((0.5 * x).ln() + EULER_GAMMA) * i0 + sum
}

fn scaled_large(x: f64) -> f64 {
    if x < ASYMPTOTIC_FROM {
        steed(x)
    } else {
        asymptotic(x)
    }
}

fn steed(x: f64) -> f64 {
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut delh = d;
    let (mut q1, mut q2) = (0.0, 1.0);
    let a1 = 0.25;
    let (mut q, mut c, mut a) = (a1, a1, -a1);
    let mut s = 1.0 + q * delh;
    for i in 1..MAX_TERMS {
        let fi = i as f64;
        a -= 2.0 * fi;
        c = -a * c / (fi + 1.0);
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh *= b * d - 1.0;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < 1e-17 {
            break;
        }
    }
    (PI / (2.0 * x)).sqrt() / s
}

fn asymptotic(x: f64) -> f64 {
    let (mut term, mut sum) = (1.0f64, 1.0f64);
    for k in 1..MAX_TERMS {
        let odd = (2 * k - 1) as f64;
        let next = -term * odd * odd / (8.0 * k as f64 * x);
        if next.abs() >= term.abs() || next.abs() < 1e-17 * sum.abs() {
            break;
        }
        term = next;
        sum += term;
    }
    (PI / (2.0 * x)).sqrt() * sum
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `eˣ·K₀(x) = ∫₀^∞ exp(−x(cosh t − 1)) dt`, by composite Simpson.
    fn oracle_scaled(x: f64) -> f64 {
        let upper = (1.0 + 40.0 / x).acosh();
        let n = 40_000;
        let h = upper / n as f64;
        let f = |t: f64| (-x * (t.cosh() - 1.0)).exp();
        let mut s = f(0.0) + f(upper);
        for i in 1..n {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn reference_values() {
        for (x, want) in [
            (0.1, 2.427_069_024_702_016_6),
            (1.0, 0.421_024_438_240_708_34),
            (2.0, 0.113_893_872_749_533_44),
            (5.0, 0.003_691_098_334_042_594_2),
            (10.0, 1.778_006_231_616_917e-5),
        ] {
            assert!(rel(bessel_k0(x).unwrap(), want) < 1e-12, "x = {x}");
        }
    }

    #[test]
    fn matches_integral_across_regions() {
        for x in [1e-3, 0.5, 1.9, 2.0, 2.1, 3.7, 8.0, 19.9, 20.0, 20.1, 35.0, 80.0, 700.0] {
            let got = bessel_k0_scaled(x).unwrap();
            assert!(rel(got, oracle_scaled(x)) < 1e-10, "x = {x}: {got} vs {}", oracle_scaled(x));
        }
    }

    #[test]
    fn log_singularity() {
        let k = bessel_k0(1e-8).unwrap();
        assert!(k > 17.0);
        assert!((k - (-(0.5e-8f64).ln() - EULER_GAMMA)).abs() < 1e-12);
    }

    #[test]
    fn large_argument_underflows_gracefully() {
        assert_eq!(bessel_k0(800.0).unwrap(), 0.0);
        assert!(bessel_k0_scaled(800.0).unwrap() > 0.0);
    }

    #[test]
    fn domain() {
        for x in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(bessel_k0(x), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn decreasing() {
        let xs: Vec<f64> = (1..400).map(|i| i as f64 * 0.1).collect();
        let ks: Vec<f64> = xs.iter().map(|&x| bessel_k0_scaled(x).unwrap() * (-x).exp()).collect();
        assert!(ks.windows(2).all(|w| w[1] < w[0]));
    }
}
