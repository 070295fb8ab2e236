//! Variance-preserving noise schedule and the algebra between the three
//! diffusion quantities.
//!
//! The forward process is `τ_t = α_t τ_0 + σ_t ε` with `α_t² + σ_t² = 1`.
//! The flow velocity is `v = α_t ε − σ_t τ_0`. Any one of data, velocity and
//! noise can be recovered from another given `τ_t`, which is what
//! [`convert`] implements.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};

/// Divisors below this magnitude make a conversion near-singular.
pub const SINGULAR_EPS: f64 = 1e-8;

/// Training times are drawn from `[T_EPS, 1 − T_EPS]`.
pub const T_EPS: f64 = 1e-3;

/// A point on the diffusion time axis, `0` is data and `1` is noise.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct DiffusionTime(f64);

impl DiffusionTime {
    pub fn new(t: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&t) {
            Ok(Self(t))
        } else {
            Err(Error::Domain(t))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// The quantity a network predicts or a loss is measured in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    /// Clean trajectory `τ_0`.
    Data,
    /// Flow velocity `v`.
    Velocity,
    /// Gaussian noise `ε`.
    Noise,
}

impl Space {
    pub const ALL: [Space; 3] = [Space::Data, Space::Velocity, Space::Noise];

    pub fn tag(self) -> &'static str {
        match self {
            Space::Data => "data",
            Space::Velocity => "velocity",
            Space::Noise => "noise",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Space::Data => 0,
            Space::Velocity => 1,
            Space::Noise => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Space::Data),
            1 => Ok(Space::Velocity),
            2 => Ok(Space::Noise),
            _ => Err(Error::Format(format!("unknown space code {code}"))),
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "data" | "tau0" | "x0" => Ok(Space::Data),
            "velocity" | "v" => Ok(Space::Velocity),
            "noise" | "eps" | "epsilon" => Ok(Space::Noise),
            other => Err(Error::Config(format!("unknown space `{other}`"))),
        }
    }
}

/// Prediction space paired with loss space: one cell of the 3×3 grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub pred: Space,
    pub loss: Space,
}

impl SpaceSpec {
    pub fn new(pred: Space, loss: Space) -> Self {
        Self { pred, loss }
    }

    /// All nine cells, prediction-major.
    pub fn all() -> Vec<SpaceSpec> {
        Space::ALL
            .iter()
            .flat_map(|&pred| Space::ALL.iter().map(move |&loss| SpaceSpec { pred, loss }))
            .collect()
    }
}

impl fmt::Display for SpaceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-pred/{}-loss", self.pred, self.loss)
    }
}

/// Linear-β variance-preserving schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

impl NoiseSchedule {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_max > beta_min) {
            return Err(Error::Config(format!(
                "schedule needs 0 < beta_min < beta_max, got {beta_min}, {beta_max}"
            )));
        }
        Ok(Self { beta_min, beta_max })
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `log α_t = −½ ∫₀ᵗ β(s) ds`.
    pub fn log_alpha(&self, t: f64) -> f64 {
        -0.5 * (self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t)
    }

    pub fn alpha_sigma(&self, t: DiffusionTime) -> (f64, f64) {
        let la = self.log_alpha(t.get());
        // σ² = 1 − α² evaluated without cancellation near t = 0.
        (la.exp(), (-(2.0 * la).exp_m1()).sqrt())
    }

    pub fn alpha_sigma_at(&self, t: f64) -> Result<(f64, f64)> {
        Ok(self.alpha_sigma(DiffusionTime::new(t)?))
    }

    /// Drift `f(t) = d log α_t / dt` and squared diffusion
    /// `g²(t) = dσ_t²/dt − 2 f(t) σ_t²` of the probability-flow ODE.
    pub fn drift_diffusion(&self, t: DiffusionTime) -> Result<(f64, f64)> {
        if t.get() == 0.0 {
            return Err(Error::Domain(0.0));
        }
        let f = -0.5 * self.beta(t.get());
        // For VP, α² + σ² = 1 collapses g² to −2f.
        Ok((f, -2.0 * f))
    }

    /// Half log signal-to-noise ratio `λ_t = log(α_t / σ_t)`.
    pub fn log_snr(&self, t: f64) -> f64 {
        let la = self.log_alpha(t);
        la - 0.5 * (-(2.0 * la).exp_m1()).ln()
    }

    /// Inverse of [`Self::log_snr`].
    pub fn time_from_log_snr(&self, lambda: f64) -> f64 {
        // −log α = ½ log(1 + e^{−2λ}), then solve the quadratic in t.
        let neg_log_alpha = 0.5 * softplus(-2.0 * lambda);
        let d = self.beta_max - self.beta_min;
        let b = 0.5 * self.beta_min;
        let a = 0.25 * d;
        (-b + (b * b + 4.0 * a * neg_log_alpha).sqrt()) / (2.0 * a)
    }

    /// Forward perturbation `τ_t = α_t τ_0 + σ_t ε`.
    pub fn perturb(
        &self,
        tau0: ArrayView2<f64>,
        eps: ArrayView2<f64>,
        t: DiffusionTime,
    ) -> Result<Array2<f64>> {
        check_shape("perturb", tau0.shape(), eps.shape())?;
        let (alpha, sigma) = self.alpha_sigma(t);
        Ok(perturb_with(tau0, eps, alpha, sigma))
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn perturb_with(
    tau0: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    alpha: f64,
    sigma: f64,
) -> Array2<f64> {
    Zip::from(&tau0)
        .and(&eps)
        .map_collect(|&x, &e| alpha * x + sigma * e)
}

fn nonsingular(what: &'static str, value: f64) -> Result<f64> {
    if value.abs() < SINGULAR_EPS {
        Err(Error::NearSingular { what, value })
    } else {
        Ok(value)
    }
}

/// Coefficients `(a, b)` such that `target = a·τ_t + b·value`.
pub fn conversion_coeffs(from: Space, to: Space, alpha: f64, sigma: f64) -> Result<(f64, f64)> {
    use Space::*;
    Ok(match (from, to) {
        (a, b) if a == b => (0.0, 1.0),
        (Data, Velocity) => {
            let s = nonsingular("sigma", sigma)?;
            (alpha / s, -1.0 / s)
        }
        (Data, Noise) => {
            let s = nonsingular("sigma", sigma)?;
            (1.0 / s, -alpha / s)
        }
        (Velocity, Data) => (alpha, -sigma),
        (Velocity, Noise) => (sigma, alpha),
        (Noise, Data) => {
            let a = nonsingular("alpha", alpha)?;
            (1.0 / a, -sigma / a)
        }
        (Noise, Velocity) => {
            let a = nonsingular("alpha", alpha)?;
            (-sigma / a, 1.0 / a)
        }
        _ => unreachable!(),
    })
}

/// Convert `value` from one diffusion quantity to another given the noised
/// sample `tau_t` and the schedule values at its time.
pub fn convert(
    value: ArrayView2<f64>,
    from: Space,
    to: Space,
    tau_t: ArrayView2<f64>,
    alpha: f64,
    sigma: f64,
) -> Result<Array2<f64>> {
    check_shape("convert", tau_t.shape(), value.shape())?;
    if from == to {
        return Ok(value.to_owned());
    }
    let (a, b) = conversion_coeffs(from, to, alpha, sigma)?;
    Ok(Zip::from(&tau_t)
        .and(&value)
        .map_collect(|&x, &y| a * x + b * y))
}

/// Score estimate `−ε̂ / σ_t`.
pub fn score_from_noise(eps_hat: ArrayView2<f64>, sigma: f64) -> Result<Array2<f64>> {
    let s = nonsingular("sigma", sigma)?;
    Ok(eps_hat.mapv(|e| -e / s))
}
