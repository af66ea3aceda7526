//! The rectifier family, plus the identity used to linearize a layer.
//!
//! A neuron is "ON" when its pre-activation is positive and "OFF" when it is
//! negative. For LeakyReLU and PReLU the negative region keeps the OFF name
//! even though the output does not vanish there.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const PRELU_INIT_SLOPE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActivationKind {
    ReLU,
    LeakyReLU { slope: f64 },
    /// Slope is a trainable per-layer scalar held in the network parameters.
    PReLU,
    /// Exact erf-based form.
    GELU,
    SiLU,
    Identity,
}

impl ActivationKind {
    pub fn leaky() -> Self {
        ActivationKind::LeakyReLU {
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    /// Everything except `Identity` is a rectifier.
    pub fn is_rectifier(self) -> bool {
        !matches!(self, ActivationKind::Identity)
    }

    /// Scalar forward. `prelu_slope` is only read for `PReLU`.
    #[inline]
    pub fn eval(self, z: f64, prelu_slope: f64) -> f64 {
        match self {
            ActivationKind::ReLU => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyReLU { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            ActivationKind::PReLU => {
                if z > 0.0 {
                    z
                } else {
                    prelu_slope * z
                }
            }
            ActivationKind::GELU => 0.5 * z * (1.0 + libm::erf(z * std::f64::consts::FRAC_1_SQRT_2)),
            ActivationKind::SiLU => z * sigmoid(z),
            ActivationKind::Identity => z,
        }
    }

    /// Scalar derivative dψ/dz.
    #[inline]
    pub fn derivative(self, z: f64, prelu_slope: f64) -> f64 {
        match self {
            ActivationKind::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyReLU { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            ActivationKind::PReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    prelu_slope
                }
            }
            ActivationKind::GELU => {
                let cdf = 0.5 * (1.0 + libm::erf(z * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + z * pdf
            }
            ActivationKind::SiLU => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
            ActivationKind::Identity => 1.0,
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Elementwise `ψ(z)`. `prelu_slope` defaults to the PReLU initial slope.
pub fn apply(kind: ActivationKind, z: &Tensor, prelu_slope: Option<f64>) -> Tensor {
    if kind == ActivationKind::Identity {
        return z.clone();
    }
    let a = prelu_slope.unwrap_or(PRELU_INIT_SLOPE);
    z.map(|v| kind.eval(v, a))
}

/// Backpropagates `upstream` through `ψ` at `z`.
///
/// The second value is the PReLU slope gradient `Σ_{z<0} upstream·z`, and is
/// `None` for every other kind.
pub fn apply_grad(
    kind: ActivationKind,
    z: &Tensor,
    upstream: &Tensor,
    prelu_slope: Option<f64>,
) -> Result<(Tensor, Option<f64>)> {
    if z.shape() != upstream.shape() {
        return Err(Error::shape(
            "activation",
            format!("z {:?} vs upstream {:?}", z.shape(), upstream.shape()),
        ));
    }
    let a = prelu_slope.unwrap_or(PRELU_INIT_SLOPE);
    let data = z
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&zv, &g)| g * kind.derivative(zv, a))
        .collect();
    let dz = Tensor::new(z.shape().to_vec(), data)?;
    let dslope = (kind == ActivationKind::PReLU).then(|| {
        z.data()
            .iter()
            .zip(upstream.data())
            .filter(|(&zv, _)| zv < 0.0)
            .map(|(&zv, &g)| g * zv)
            .sum()
    });
    Ok((dz, dslope))
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationKind::ReLU => f.write_str("relu"),
            ActivationKind::LeakyReLU { slope } if *slope == DEFAULT_LEAKY_SLOPE => {
                f.write_str("leakyrelu")
            }
            ActivationKind::LeakyReLU { slope } => write!(f, "leakyrelu({slope})"),
            ActivationKind::PReLU => f.write_str("prelu"),
            ActivationKind::GELU => f.write_str("gelu"),
            ActivationKind::SiLU => f.write_str("silu"),
            ActivationKind::Identity => f.write_str("identity"),
        }
    }
}

impl FromStr for ActivationKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if let Some(arg) = s
            .strip_prefix("leakyrelu(")
            .and_then(|rest| rest.strip_suffix(')'))
        {
            let slope: f64 = arg
                .parse()
                .map_err(|_| format!("bad leakyrelu slope `{arg}`"))?;
            if !(slope > 0.0 && slope < 1.0) {
                return Err(format!("leakyrelu slope {slope} outside (0, 1)"));
            }
            return Ok(ActivationKind::LeakyReLU { slope });
        }
        match s {
            "relu" => Ok(ActivationKind::ReLU),
            "leakyrelu" => Ok(ActivationKind::leaky()),
            "prelu" => Ok(ActivationKind::PReLU),
            "gelu" => Ok(ActivationKind::GELU),
            "silu" => Ok(ActivationKind::SiLU),
            "identity" => Ok(ActivationKind::Identity),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL: [ActivationKind; 6] = [
        ActivationKind::ReLU,
        ActivationKind::LeakyReLU { slope: 0.01 },
        ActivationKind::PReLU,
        ActivationKind::GELU,
        ActivationKind::SiLU,
        ActivationKind::Identity,
    ];

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let y = apply(ActivationKind::ReLU, &t(&[-2.0, 0.0, 3.0]), None);
        assert_eq!(y.data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn leaky_slope() {
        let y = apply(ActivationKind::leaky(), &t(&[-2.0]), None);
        assert!((y.data()[0] + 0.02).abs() < 1e-15);
    }

    #[test]
    fn smooth_rectifiers_vanish_at_origin() {
        assert_eq!(ActivationKind::GELU.eval(0.0, 0.0), 0.0);
        assert_eq!(ActivationKind::SiLU.eval(0.0, 0.0), 0.0);
    }

    #[test]
    fn identity_returns_input() {
        let z = t(&[-1.5, 0.0, 2.25]);
        assert_eq!(apply(ActivationKind::Identity, &z, None), z);
    }

    #[test]
    fn relu_grad() {
        let (dz, ds) = apply_grad(ActivationKind::ReLU, &t(&[5.0, -5.0]), &t(&[1.0, 1.0]), None)
            .unwrap();
        assert_eq!(dz.data(), &[1.0, 0.0]);
        assert!(ds.is_none());
    }

    #[test]
    fn prelu_slope_grad_sums_negative_positions() {
        let z = t(&[-2.0, 3.0, -0.5]);
        let up = t(&[1.0, 10.0, 4.0]);
        let (dz, ds) = apply_grad(ActivationKind::PReLU, &z, &up, Some(0.25)).unwrap();
        assert_eq!(dz.data(), &[0.25, 10.0, 1.0]);
        assert_eq!(ds, Some(-2.0 + -2.0));
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        let h = 1e-6;
        for i in 0..11 {
            let z = -3.0 + 0.6 * i as f64;
            let fd = (ActivationKind::GELU.eval(z + h, 0.0) - ActivationKind::GELU.eval(z - h, 0.0))
                / (2.0 * h);
            let an = ActivationKind::GELU.derivative(z, 0.0);
            let rel = (fd - an).abs() / an.abs().max(1e-12);
            assert!(rel <= 1e-6, "z={z} fd={fd} an={an} rel={rel}");
        }
    }

    #[test]
    fn asymptotes() {
        for kind in ALL {
            let slope = match kind {
                ActivationKind::LeakyReLU { slope } => slope,
                ActivationKind::PReLU => PRELU_INIT_SLOPE,
                ActivationKind::Identity => 1.0,
                _ => 0.0,
            };
            let neg = kind.eval(-100.0, PRELU_INIT_SLOPE) / -100.0;
            assert!((neg - slope).abs() < 1e-6, "{kind}: {neg}");
            assert!((kind.eval(100.0, PRELU_INIT_SLOPE) - 100.0).abs() < 1e-6, "{kind}");
        }
    }

    #[test]
    fn keywords_round_trip() {
        for kind in ALL.into_iter().chain([ActivationKind::LeakyReLU { slope: 0.2 }]) {
            let text = kind.to_string();
            assert_eq!(text.parse::<ActivationKind>().unwrap(), kind, "{text}");
        }
        assert!("leakyrelu(1.5)".parse::<ActivationKind>().is_err());
        assert!("tanh".parse::<ActivationKind>().is_err());
    }
}
