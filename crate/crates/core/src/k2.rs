//! Closed forms for the symmetric two-component model `(mu, -mu)`.
//!
//! With `T = <Y, mu>/|mu|` the problem is one-dimensional: the Bayes rule is
//! the sign of `T` and the population hard-assignment centers are
//! `+-E|T| mu/|mu|`, the mean of a folded normal.

use std::f64::consts::{FRAC_2_PI, PI, SQRT_2};

use crate::error::{Error, Result};
use crate::model::{MeanConfig, MixtureModel};
use crate::special::{erf, erfc, erfcx};

/// Symmetric mixture `1/2 N(mu, sigma^2 I) + 1/2 N(-mu, sigma^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct K2Model {
    pub mu: Vec<f64>,
    pub sigma: f64,
}

impl K2Model {
    pub fn new(mu: Vec<f64>, sigma: f64) -> Result<Self> {
        if mu.is_empty() || mu.iter().all(|&x| x == 0.0) {
            return Err(Error::InvalidArgument("mu must be nonzero".into()));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be finite and > 0, got {sigma}")));
        }
        Ok(Self { mu, sigma })
    }

    /// The model with `mu = |mu| e_0` in R^d at the given SNR and `sigma = 1`
    /// scaled so that `|mu| = norm`.
    pub fn from_snr(d: usize, norm: f64, snr: f64) -> Result<Self> {
        let mut mu = vec![0.0; d.max(1)];
        mu[0] = norm;
        Self::new(mu, norm / snr.sqrt())
    }

    pub fn norm(&self) -> f64 {
        self.mu.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn snr(&self) -> f64 {
        let r = self.norm() / self.sigma;
        r * r
    }

    /// `alpha = |mu| / (sqrt(2) sigma)`, so that `alpha^2 = SNR/2`.
    pub fn alpha(&self) -> f64 {
        self.norm() / (SQRT_2 * self.sigma)
    }

    pub fn means(&self) -> MeanConfig {
        MeanConfig::symmetric_pair(&self.mu)
    }

    pub fn mixture(&self) -> MixtureModel {
        MixtureModel { means: self.means(), sigma: self.sigma }
    }
}

/// Folded-normal mean `E|T|` for `T ~ N(m, s^2)`, `m >= 0`.
pub fn folded_normal_mean(m: f64, s: f64) -> f64 {
    let a = m / (SQRT_2 * s);
    m * erf(a) + s * FRAC_2_PI.sqrt() * (-a * a).exp()
}

/// Population hard-assignment centers `(c u, -c u)` with `u = mu/|mu|` and
/// `c = E|T|`.
pub fn ha_target_k2(m: &K2Model) -> MeanConfig {
    let norm = m.norm();
    let c = folded_normal_mean(norm, m.sigma);
    let u: Vec<f64> = m.mu.iter().map(|x| x * c / norm).collect();
    MeanConfig::symmetric_pair(&u)
}

/// Exact normalized population MSE of the hard-assignment centers:
/// `(sqrt(2/pi) sigma e^{-alpha^2} - |mu| erfc(alpha))^2 / |mu|^2`.
pub fn ha_mse_k2(m: &K2Model) -> f64 {
    let norm = m.norm();
    let a = m.alpha();
    let s = m.sigma;
    if m.snr() > 20.0 {
        // Both terms carry e^{-alpha^2}; factor it out and use erfcx for the
        // nearly cancelling remainder.
        let inner = FRAC_2_PI.sqrt() * s - norm * erfcx(a);
        let r = inner / norm;
        r * r * (-2.0 * a * a).exp()
    } else {
        let b = FRAC_2_PI.sqrt() * s * (-a * a).exp() - norm * erfc(a);
        let r = b / norm;
        r * r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Low,
    High,
}

/// Leading-order behavior of [`ha_mse_k2`]: `(2/pi)/snr` at low SNR and
/// `(2/pi) e^{-snr}/snr^3` at high SNR.
pub fn ha_mse_asymptote(snr: f64, regime: Regime) -> f64 {
    match regime {
        Regime::Low => FRAC_2_PI / snr,
        Regime::High => FRAC_2_PI * (-snr).exp() / (snr * snr * snr),
    }
}

/// Bayes misclassification probability `1/2 erfc(sqrt(snr/2))`.
pub fn bayes_error_k2(snr: f64) -> f64 {
    0.5 * erfc((0.5 * snr).sqrt())
}

/// Low-SNR expansion `1/2 - sqrt(snr/(2 pi))` of [`bayes_error_k2`].
pub fn bayes_error_k2_low_snr(snr: f64) -> f64 {
    0.5 - (snr / (2.0 * PI)).sqrt()
}
