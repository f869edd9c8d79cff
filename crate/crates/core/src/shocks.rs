//! Demand and cost shock draws for expected profits.
//!
//! Every draw is addressed by (seed, airline, route, draw index), so any
//! product sees the same shocks no matter which market configuration or
//! worker asks for them.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Result, SkyError};
use crate::linalg::quantile_sorted;
use crate::model::{AirlineIdx, RouteIdx};
use crate::rng;

/// Draws per product used for expected profits.
pub const DEFAULT_DRAWS: usize = 36;
/// Marginal quantiles kept from the empirical residual distribution.
pub const TRIM: (f64, f64) = (0.025, 0.975);
/// Log-scale dispersion of the shifted-lognormal cost shock.
pub const OMEGA_LOG_SD: f64 = 0.5;

pub fn standard_normal_quantile(u: f64) -> f64 {
    Normal::standard().inverse_cdf(u)
}

/// Mean-zero shifted lognormal with standard deviation `sd`, from a
/// standard-normal `z`.
pub fn shifted_lognormal(z: f64, sd: f64) -> f64 {
    if sd <= 0.0 {
        return 0.0;
    }
    let s2 = OMEGA_LOG_SD * OMEGA_LOG_SD;
    let mean = sd / (s2.exp() - 1.0).sqrt();
    mean * (OMEGA_LOG_SD * z - 0.5 * s2).exp() - mean
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DrawSource {
    /// Joint residual pairs, already trimmed to the central marginal quantiles.
    Empirical { pairs: Vec<(f64, f64)> },
    /// Independent normal demand and shifted-lognormal cost shocks.
    Parametric { xi_sd: f64, omega_sd: f64 },
}

impl DrawSource {
    /// Keeps pairs whose two coordinates both lie inside their own
    /// [2.5%, 97.5%] marginal quantiles.
    pub fn empirical(pairs: &[(f64, f64)]) -> Result<Self> {
        let finite: Vec<(f64, f64)> = pairs
            .iter()
            .copied()
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .collect();
        if finite.is_empty() {
            return Err(SkyError::domain("no finite residual pairs to draw from"));
        }
        let bounds = |sel: fn(&(f64, f64)) -> f64| {
            let mut v: Vec<f64> = finite.iter().map(sel).collect();
            v.sort_by(f64::total_cmp);
            (quantile_sorted(&v, TRIM.0), quantile_sorted(&v, TRIM.1))
        };
        let (xl, xh) = bounds(|p| p.0);
        let (wl, wh) = bounds(|p| p.1);
        let kept: Vec<(f64, f64)> = finite
            .into_iter()
            .filter(|&(x, w)| x >= xl && x <= xh && w >= wl && w <= wh)
            .collect();
        if kept.is_empty() {
            return Err(SkyError::domain("residual trimming removed every pair"));
        }
        Ok(DrawSource::Empirical { pairs: kept })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShockSampler {
    pub seed: u64,
    pub draws: usize,
    pub source: DrawSource,
}

impl ShockSampler {
    pub fn new(seed: u64, draws: usize, source: DrawSource) -> Self {
        ShockSampler { seed, draws, source }
    }

    /// `(xi, omega)` for draw `d` of the product `(airline, route)`.
    pub fn draw(&self, airline: AirlineIdx, route: RouteIdx, d: usize) -> (f64, f64) {
        let keys = [airline.0 as u64, route.0 as u64, d as u64];
        match &self.source {
            DrawSource::Empirical { pairs } => {
                let i = rng::mix(self.seed, "profit-draw", &keys) % pairs.len() as u64;
                pairs[i as usize]
            }
            DrawSource::Parametric { xi_sd, omega_sd } => {
                let zx = standard_normal_quantile(rng::uniform(self.seed, "profit-xi", &keys));
                let zw = standard_normal_quantile(rng::uniform(self.seed, "profit-omega", &keys));
                (xi_sd * zx, shifted_lognormal(zw, *omega_sd))
            }
        }
    }
}
