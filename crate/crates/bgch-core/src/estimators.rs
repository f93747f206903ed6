//! Surrogate gradients for the sign function.
//!
//! The forward pass always uses the hard sign; these estimators only shape
//! the backward pass. The Fourier estimator differentiates a truncated
//! square-wave series term by term, so its gradient keeps curvature
//! information that the straight-through estimator throws away. The
//! remaining variants are the usual smooth baselines.
//!
//! Fourier inputs are clamped to +-0.95 of the half-period before evaluation:
//! the series only represents the square wave on the open interval, and the
//! clamp also bounds the oscillatory gradient at the rails.

use alloc::format;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

/// Fraction of the half-period beyond which Fourier inputs are clamped.
const FOURIER_CLAMP: f64 = 0.95;

/// Which backward surrogate replaces the sign function's zero derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EstimatorSpec {
    /// Truncated square-wave series over odd harmonics `1, 3, ..., max_harmonic`.
    Fourier { max_harmonic: u32, half_period: f64 },
    /// Straight-through: gradient 1 inside the clip window, 0 outside.
    Ste { clip: f64 },
    /// `tanh(t * phi)`.
    Tanh { temperature: f64 },
    /// Centered logistic `2 sigma(t * phi) - 1`.
    Sigmoid { temperature: f64 },
    /// SignSwish `2 s (1 + b phi (1 - s)) - 1` with `s = sigma(b phi)`.
    SignSwish { beta: f64 },
}

impl EstimatorSpec {
    /// Fourier estimator where `n` is the inclusive odd upper bound of the
    /// harmonic sum; an even `n` rounds down to `n - 1`. Passing
    /// `n_counts_harmonics` reinterprets `n` as the number of odd harmonics
    /// instead (n harmonics end at bound `2n - 1`).
    pub fn fourier(n: u32, half_period: f64, n_counts_harmonics: bool) -> Self {
        let n = n.max(1);
        let max_harmonic = if n_counts_harmonics {
            2 * n - 1
        } else if n.is_multiple_of(2) {
            n - 1
        } else {
            n
        };
        EstimatorSpec::Fourier { max_harmonic, half_period }
    }

    /// The shipped default: harmonics {1, 3} at unit half-period.
    pub fn default_fourier() -> Self {
        EstimatorSpec::fourier(4, 1.0, false)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EstimatorSpec::Fourier { max_harmonic, half_period } => {
                if max_harmonic == 0 || max_harmonic % 2 == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "fourier bound must be odd and >= 1, got {max_harmonic}"
                    )));
                }
                if !(half_period > 0.0 && half_period.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "fourier half-period must be positive, got {half_period}"
                    )));
                }
            }
            EstimatorSpec::Ste { clip } => {
                if !(clip > 0.0 && clip.is_finite()) {
                    return Err(Error::InvalidConfig(format!("ste clip must be positive, got {clip}")));
                }
            }
            EstimatorSpec::Tanh { temperature } | EstimatorSpec::Sigmoid { temperature } => {
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "temperature must be positive, got {temperature}"
                    )));
                }
            }
            EstimatorSpec::SignSwish { beta } => {
                if !(beta > 0.0 && beta.is_finite()) {
                    return Err(Error::InvalidConfig(format!("beta must be positive, got {beta}")));
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorSpec::Fourier { .. } => "fourier",
            EstimatorSpec::Ste { .. } => "ste",
            EstimatorSpec::Tanh { .. } => "tanh",
            EstimatorSpec::Sigmoid { .. } => "sigmoid",
            EstimatorSpec::SignSwish { .. } => "signswish",
        }
    }

    fn odd_harmonics(max_harmonic: u32) -> impl Iterator<Item = u32> {
        (1..=max_harmonic).step_by(2)
    }
}

/// Hard sign used by every forward pass; zero maps to +1.
pub fn hard_sign(phi: f64) -> f64 {
    if phi >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Value of the smooth surrogate at `phi`. Errors on NaN input.
pub fn surrogate_value(spec: EstimatorSpec, phi: f64) -> Result<f64> {
    if phi.is_nan() {
        return Err(Error::NanInput { context: "surrogate value" });
    }
    Ok(match spec {
        EstimatorSpec::Fourier { max_harmonic, half_period } => {
            let x = phi.clamp(-FOURIER_CLAMP * half_period, FOURIER_CLAMP * half_period);
            let mut acc = 0.0;
            for i in EstimatorSpec::odd_harmonics(max_harmonic) {
                let i = i as f64;
                acc += math::sin(i * core::f64::consts::PI * x / half_period) / i;
            }
            4.0 / core::f64::consts::PI * acc
        }
        EstimatorSpec::Ste { clip } => phi.clamp(-clip, clip),
        EstimatorSpec::Tanh { temperature } => math::tanh(temperature * phi),
        EstimatorSpec::Sigmoid { temperature } => 2.0 * math::sigmoid(temperature * phi) - 1.0,
        EstimatorSpec::SignSwish { beta } => {
            let s = math::sigmoid(beta * phi);
            2.0 * s * (1.0 + beta * phi * (1.0 - s)) - 1.0
        }
    })
}

/// Derivative of the surrogate at `phi`, the factor that replaces the sign
/// function's derivative in the backward pass. Fourier inputs are clamped
/// exactly like in [`surrogate_value`].
pub fn surrogate_grad(spec: EstimatorSpec, phi: f64) -> f64 {
    match spec {
        EstimatorSpec::Fourier { max_harmonic, half_period } => {
            let x = phi.clamp(-FOURIER_CLAMP * half_period, FOURIER_CLAMP * half_period);
            let mut acc = 0.0;
            for i in EstimatorSpec::odd_harmonics(max_harmonic) {
                acc += math::cos(i as f64 * core::f64::consts::PI * x / half_period);
            }
            4.0 / half_period * acc
        }
        EstimatorSpec::Ste { clip } => {
            if math::abs(phi) <= clip {
                1.0
            } else {
                0.0
            }
        }
        EstimatorSpec::Tanh { temperature } => {
            let t = math::tanh(temperature * phi);
            temperature * (1.0 - t * t)
        }
        EstimatorSpec::Sigmoid { temperature } => {
            let s = math::sigmoid(temperature * phi);
            2.0 * temperature * s * (1.0 - s)
        }
        EstimatorSpec::SignSwish { beta } => {
            let s = math::sigmoid(beta * phi);
            2.0 * beta * s * (1.0 - s) * (2.0 + beta * phi * (1.0 - 2.0 * s))
        }
    }
}

/// Chain-rule step through an elementwise sign: `upstream[i] * d_surrogate(phi[i])`.
pub fn backprop_sign(spec: EstimatorSpec, upstream: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != phi.len() {
        return Err(Error::DimensionMismatch { expected: phi.len(), got: upstream.len() });
    }
    Ok(upstream
        .iter()
        .zip(phi)
        .map(|(&u, &p)| u * surrogate_grad(spec, p))
        .collect())
}
