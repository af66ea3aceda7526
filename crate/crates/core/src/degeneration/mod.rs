//! ON-probability of a neuron whose pre-activation is the product of two
//! correlated zero-mean Gaussians `X·W`.
//!
//! The product density is
//!
//! ```text
//! f(z) = exp(ρz / a) · K₀(|z| / a) / (π s √(1 − ρ²)),   s = σx·σw,  a = s(1 − ρ²)
//! ```
//!
//! and `p[Z > 0]` is its mass on the positive half-line. The orthant
//! probability `1/2 + asin(ρ)/π` gives the same number in closed form and
//! serves as a cross-check.

pub mod bessel;
pub mod quadrature;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use bessel::{bessel_k0, bessel_k0_scaled};
use quadrature::{integrate, integrate_to_infinity};

const ABS_TOL: f64 = 1e-13;
const REL_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductDistribution {
    pub sigma_x: f64,
    pub sigma_w: f64,
    pub rho: f64,
}

impl ProductDistribution {
    pub fn new(sigma_x: f64, sigma_w: f64, rho: f64) -> Result<Self> {
        let d = ProductDistribution { sigma_x, sigma_w, rho };
        d.validate()?;
        Ok(d)
    }

    /// Unit variances.
    pub fn standard(rho: f64) -> Result<Self> {
        Self::new(1.0, 1.0, rho)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("sigma_x", self.sigma_x), ("sigma_w", self.sigma_w)] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Domain(format!("{name} must be finite and > 0, got {s}")));
            }
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::Domain(format!("rho must lie strictly inside (-1, 1), got {}", self.rho)));
        }
        Ok(())
    }

    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        Self::new(self.sigma_x, self.sigma_w, rho)
    }

    fn scale(&self) -> f64 {
        self.sigma_x * self.sigma_w * (1.0 - self.rho * self.rho)
    }

    /// `f_Z(z)`; `z = 0` is the log singularity and is rejected.
    pub fn density(&self, z: f64) -> Result<f64> {
        if z == 0.0 || !z.is_finite() {
            return Err(Error::Domain(format!("density is evaluated at finite z != 0, got {z}")));
        }
        let a = self.scale();
        let s = self.sigma_x * self.sigma_w;
        let norm = PI * s * (1.0 - self.rho * self.rho).sqrt();
        // exp(ρz/a)·K₀(|z|/a) = exp((ρz − |z|)/a)·eˣK₀(x), which never overflows.
        Ok(((self.rho * z - z.abs()) / a).exp() * bessel_k0_scaled(z.abs() / a)? / norm)
    }

    /// Mass of the density on one side of zero, `sign` = +1 or −1.
    fn half_mass(&self, sign: f64) -> Result<f64> {
        let a = self.scale();
        let f = |u: f64| self.density(sign * a * u).map_or(f64::NAN, |v| a * v);
        let near = integrate(f, 0.0, 1.0, ABS_TOL, REL_TOL)?;
        let far = integrate_to_infinity(f, 1.0, ABS_TOL, REL_TOL)?;
        Ok(near.value + far.value)
    }

    /// `p[Z > 0]` by quadrature of the density, as the positive mass over
    /// the total so that the two halves share their quadrature error. At
    /// `ρ = 0` the halves are mirror images and the result is exactly 1/2.
    pub fn prob_on(&self) -> Result<f64> {
        let (on, off) = (self.half_mass(1.0)?, self.half_mass(-1.0)?);
        Ok(on / (on + off))
    }

    /// Total mass, which should be 1.
    pub fn total_mass(&self) -> Result<f64> {
        Ok(self.half_mass(1.0)? + self.half_mass(-1.0)?)
    }

    pub fn prob_on_closed_form(&self) -> f64 {
        0.5 + self.rho.asin() / PI
    }
}

/// Convenience for unit variances.
pub fn prob_on(rho: f64) -> Result<f64> {
    ProductDistribution::standard(rho)?.prob_on()
}

pub fn prob_on_closed_form(rho: f64) -> f64 {
    0.5 + rho.asin() / PI
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    pub p_on: f64,
    pub p_on_closed_form: f64,
    pub abs_err: f64,
}

/// `p[Z > 0]` at each `rho`, keeping the template's variances.
pub fn sweep(template: &ProductDistribution, rhos: &[f64]) -> Result<Vec<SweepRow>> {
    rhos.iter()
        .map(|&rho| {
            let d = template.with_rho(rho)?;
            let (p, c) = (d.prob_on()?, d.prob_on_closed_form());
            Ok(SweepRow {
                rho,
                p_on: p,
                p_on_closed_form: c,
                abs_err: (p - c).abs(),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("rho,p_on,p_on_closed_form,abs_err\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:e}\n", r.rho, r.p_on, r.p_on_closed_form, r.abs_err));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub z: f64,
    pub f: f64,
}

/// Density on `points` evenly spaced values of `[lo, hi]`; a grid point
/// landing exactly on zero is dropped.
pub fn density_grid(d: &ProductDistribution, lo: f64, hi: f64, points: usize) -> Result<Vec<DensityRow>> {
    if !(lo < hi) || points < 2 {
        return Err(Error::Config(format!("density grid needs lo < hi and >= 2 points, got [{lo}, {hi}] x {points}")));
    }
    let step = (hi - lo) / (points - 1) as f64;
    (0..points)
        .map(|i| lo + i as f64 * step)
        .filter(|&z| z != 0.0)
        .map(|z| Ok(DensityRow { z, f: d.density(z)? }))
        .collect()
}

pub fn density_csv(rows: &[DensityRow]) -> String {
    let mut out = String::from("z,f_z\n");
    for r in rows {
        out.push_str(&format!("{},{:e}\n", r.z, r.f));
    }
    out
}

/// Parses `start:stop:step` into an inclusive grid.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("grid must look like start:stop:step, got `{text}`"));
    let parts: Vec<f64> = text
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [start, stop, step] = parts[..] else { return Err(bad()) };
    if !(step > 0.0) || !(start <= stop) || !start.is_finite() || !stop.is_finite() {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    // Round away representation noise such as 0.30000000000000004.
    // Adding 0.0 turns a rounded -0.0 into 0.0.
    Ok((0..=n).map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12 + 0.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_parameters() {
        assert!(ProductDistribution::new(0.0, 1.0, 0.0).is_err());
        assert!(ProductDistribution::new(1.0, -1.0, 0.0).is_err());
        assert!(ProductDistribution::new(1.0, 1.0, 1.0).is_err());
        assert!(ProductDistribution::new(1.0, 1.0, -1.0).is_err());
        assert!(ProductDistribution::new(1.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn zero_is_a_domain_error() {
        let d = ProductDistribution::standard(0.3).unwrap();
        assert!(matches!(d.density(0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn symmetric_without_correlation() {
        let d = ProductDistribution::standard(0.0).unwrap();
        assert_eq!(d.density(1.0).unwrap(), d.density(-1.0).unwrap());
        // K₀(1)/π
        assert!((d.density(1.0).unwrap() - 0.421_024_438_240_708_34 / PI).abs() < 1e-15);
    }

    #[test]
    fn mirror_in_rho() {
        let p = ProductDistribution::standard(0.6).unwrap();
        let m = ProductDistribution::standard(-0.6).unwrap();
        for z in [0.01, 0.5, 3.0] {
            assert!((p.density(z).unwrap() - m.density(-z).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn normalized() {
        for rho in [-0.9, 0.0, 0.9] {
            let m = ProductDistribution::standard(rho).unwrap().total_mass().unwrap();
            assert!((m - 1.0).abs() <= 1e-6, "rho {rho}: {m}");
        }
    }

    #[test]
    fn prob_on_examples() {
        assert_eq!(prob_on(0.0).unwrap(), 0.5);
        assert!((prob_on(0.9).unwrap() - prob_on_closed_form(0.9)).abs() <= 1e-6);
        assert!((prob_on_closed_form(0.9) - 0.856).abs() < 5e-4);
        assert!(prob_on(0.9999).unwrap() > 0.99);
        assert!(prob_on(-0.9999).unwrap() < 0.01);
    }

    #[test]
    fn scale_invariant() {
        let base = prob_on(0.4).unwrap();
        for s in [0.1, 1.0, 10.0] {
            for t in [0.1, 1.0, 10.0] {
                let p = ProductDistribution::new(s, t, 0.4).unwrap().prob_on().unwrap();
                assert!((p - base).abs() < 1e-9, "{s} {t}");
            }
        }
    }

    #[test]
    fn single_row_sweep() {
        let rows = sweep(&ProductDistribution::standard(0.0).unwrap(), &[0.0]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].rho, 0.0);
        assert_eq!(rows[0].p_on, 0.5);
        assert!(sweep(&ProductDistribution::standard(0.0).unwrap(), &[1.0]).is_err());
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("-0.99:0.99:0.01").unwrap();
        assert_eq!(g.len(), 199);
        assert_eq!(g[0], -0.99);
        assert_eq!(g[198], 0.99);
        assert_eq!(g[99].to_bits(), 0.0f64.to_bits());
        assert_eq!(parse_grid("0:0:1").unwrap(), vec![0.0]);
        for bad in ["0:1", "1:0:0.1", "0:1:0", "a:b:c"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn density_grid_skips_zero() {
        let d = ProductDistribution::standard(0.2).unwrap();
        let rows = density_grid(&d, -1.0, 1.0, 5).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.f > 0.0));
    }
}
