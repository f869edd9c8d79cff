//! Single-nest nested-logit demand.
//!
//! All inside products share one nest; the outside good sits alone. Mean
//! utility is `delta = -alpha * p + x * beta + xi` with `alpha` per USD.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::LinearIndex;
use crate::error::{Result, SkyError};
use crate::linalg::{sigmoid, softplus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandParams {
    /// Price coefficient in utility per USD (enters as `-alpha * p`).
    pub alpha: f64,
    /// Nesting parameter in (0, 1].
    pub lambda: f64,
    pub index: LinearIndex,
}

impl DemandParams {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(SkyError::domain(format!(
                "price coefficient must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(SkyError::domain(format!(
            "nesting parameter must lie in (0, 1], got {lambda}"
        )));
    }
    Ok(())
}

/// Shares implied by a vector of mean utilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Shares {
    pub inside: Vec<f64>,
    pub within: Vec<f64>,
    pub outside: f64,
    /// `ln IV`; negative infinity for an empty market.
    pub log_iv: f64,
}

/// Fills `within` and `inside` and returns `(outside, ln IV)`. Slices must have
/// the length of `deltas`. `lambda` is not checked here.
pub fn shares_into(deltas: &[f64], lambda: f64, within: &mut [f64], inside: &mut [f64]) -> (f64, f64) {
    if deltas.is_empty() {
        return (1.0, f64::NEG_INFINITY);
    }
    let mut top = f64::NEG_INFINITY;
    for &d in deltas {
        top = top.max(d / lambda);
    }
    let mut sum = 0.0;
    for (w, &d) in within.iter_mut().zip(deltas) {
        *w = (d / lambda - top).exp();
        sum += *w;
    }
    let log_iv = top + sum.ln();
    for w in within.iter_mut() {
        *w /= sum;
    }
    let a = lambda * log_iv;
    let nest = sigmoid(a);
    for (s, &w) in inside.iter_mut().zip(within.iter()) {
        *s = nest * w;
    }
    (sigmoid(-a), log_iv)
}

/// Nested-logit shares with log-sum-exp stabilisation.
pub fn market_shares(deltas: &[f64], lambda: f64) -> Result<Shares> {
    check_lambda(lambda)?;
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(SkyError::domain("mean utilities must be finite"));
    }
    let mut within = vec![0.0; deltas.len()];
    let mut inside = vec![0.0; deltas.len()];
    let (outside, log_iv) = shares_into(deltas, lambda, &mut within, &mut inside);
    Ok(Shares {
        inside,
        within,
        outside,
        log_iv,
    })
}

/// Demand shocks that rationalise observed shares:
/// `xi = ln s - ln s0 + alpha p - x beta - (1 - lambda) ln s*`.
/// `xb` holds `x * beta` per product.
pub fn invert_demand(
    inside: &[f64],
    within: &[f64],
    outside: f64,
    xb: &[f64],
    prices: &[f64],
    alpha: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    if !(outside > 0.0) {
        return Err(SkyError::domain("outside share must be positive"));
    }
    let n = inside.len();
    if within.len() != n || xb.len() != n || prices.len() != n {
        return Err(SkyError::domain("share/price/index lengths differ"));
    }
    let ln_s0 = outside.ln();
    (0..n)
        .map(|j| {
            if !(inside[j] > 0.0 && within[j] > 0.0) {
                return Err(SkyError::domain(format!(
                    "share of product {j} is not positive; log undefined"
                )));
            }
            Ok(inside[j].ln() - ln_s0 + alpha * prices[j] - xb[j] - (1.0 - lambda) * within[j].ln())
        })
        .collect()
}

/// `d s_j / d delta_k` written into row-major `out` (`n x n`).
pub fn delta_jacobian_into(inside: &[f64], within: &[f64], lambda: f64, out: &mut [f64]) {
    let n = inside.len();
    for j in 0..n {
        let sj = inside[j] / lambda;
        for k in 0..n {
            let nested = (1.0 - lambda) * within[k] + lambda * inside[k];
            out[j * n + k] = if j == k {
                sj * (1.0 - nested)
            } else {
                -sj * nested
            };
        }
    }
}

/// Price Jacobian: element `(j, k)` is `d s_j / d p_k`.
pub fn share_jacobian(shares: &Shares, alpha: f64, lambda: f64) -> DMatrix<f64> {
    let n = shares.inside.len();
    let mut buf = vec![0.0; n * n];
    delta_jacobian_into(&shares.inside, &shares.within, lambda, &mut buf);
    DMatrix::from_row_slice(n, n, &buf) * (-alpha)
}

/// Derivative of the outside share with respect to each price.
pub fn outside_price_derivative(shares: &Shares, alpha: f64) -> Vec<f64> {
    shares
        .inside
        .iter()
        .map(|s| alpha * shares.outside * s)
        .collect()
}

/// Own-price elasticities `(d s_j / d p_j) p_j / s_j`.
pub fn own_price_elasticity(shares: &Shares, prices: &[f64], alpha: f64, lambda: f64) -> Result<Vec<f64>> {
    shares
        .inside
        .iter()
        .zip(&shares.within)
        .zip(prices)
        .map(|((&s, &w), &p)| {
            if !(s > 0.0) {
                return Err(SkyError::domain("elasticity undefined at zero share"));
            }
            Ok(-alpha / lambda * (1.0 - (1.0 - lambda) * w - lambda * s) * p)
        })
        .collect()
}

fn diversion_denominator(shares: &Shares, j: usize, lambda: f64) -> Result<f64> {
    let den = 1.0 - (1.0 - lambda) * shares.within[j] - lambda * shares.inside[j];
    if !(den > 0.0) {
        return Err(SkyError::domain("diversion denominator is not positive"));
    }
    Ok(den)
}

/// Diversion from `j` to `k` within one market.
pub fn diversion_ratio(shares: &Shares, j: usize, k: usize, lambda: f64) -> Result<f64> {
    if j == k {
        return Err(SkyError::domain("diversion needs two distinct products"));
    }
    let den = diversion_denominator(shares, j, lambda)?;
    Ok(((1.0 - lambda) * shares.within[k] + lambda * shares.inside[k]) / den)
}

/// Diversion from `j` to the outside good.
pub fn diversion_to_outside(shares: &Shares, j: usize, lambda: f64) -> Result<f64> {
    let den = diversion_denominator(shares, j, lambda)?;
    Ok(lambda * shares.outside / den)
}

/// Expected consumer surplus in USD, without the Euler constant:
/// `size / alpha * ln(1 + IV^lambda)`.
pub fn consumer_surplus(log_iv: f64, lambda: f64, alpha: f64, market_size: f64) -> f64 {
    if log_iv == f64::NEG_INFINITY {
        return 0.0;
    }
    market_size / alpha * softplus(lambda * log_iv)
}
