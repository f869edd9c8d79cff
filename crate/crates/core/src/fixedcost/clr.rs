//! Quasi-likelihood-ratio statistic for moment inequalities.
//!
//! `min_{mu <= 0} (m - mu)' S^{-1} (m - mu)`. Writing `nu = -mu >= 0` and
//! `S = L L'` turns it into the nonnegative least-squares problem
//! `min ||A nu - y||^2` with `A = L^{-1}` and `y = -L^{-1} m`, solved by the
//! Lawson-Hanson active-set method on the normal equations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Result, SkyError};

/// Ridge added (relative to the mean variance) when the covariance is singular.
pub const RIDGE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClrResult {
    pub value: f64,
    /// Binding constraints: `mu_k = 0` with a strictly positive multiplier.
    pub active: usize,
    /// Minimiser, componentwise nonpositive.
    pub mu: Vec<f64>,
    pub ridged: bool,
}

fn factor(cov: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, bool)> {
    let k = cov.nrows();
    if cov.ncols() != k {
        return Err(SkyError::domain("covariance must be square"));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(SkyError::NotPsd);
    }
    if let Some(ch) = Cholesky::new(cov.clone()) {
        return Ok((ch, false));
    }
    let mean_var = cov.trace() / k as f64;
    let ridge = RIDGE * mean_var.max(1.0);
    log::debug!("covariance not positive definite; adding ridge {ridge:e}");
    let ridged = cov + DMatrix::identity(k, k) * ridge;
    Cholesky::new(ridged).map(|ch| (ch, true)).ok_or(SkyError::NotPsd)
}

/// Lawson-Hanson NNLS on `min 0.5 nu' P nu - c' nu`, `nu >= 0`, with `P`
/// positive definite. Returns `(nu, gradient P nu - c)`.
fn nnls(p: &DMatrix<f64>, c: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let k = c.len();
    let scale = p.diagonal().abs().max().max(c.abs().max()).max(1e-300);
    let tol = 1e-13 * scale * k.max(1) as f64;
    let mut x = DVector::zeros(k);
    let mut passive = vec![false; k];
    let solve_sub = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..k).filter(|&i| passive[i]).collect();
        let mut s = DVector::zeros(k);
        if idx.is_empty() {
            return s;
        }
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |i, j| p[(idx[i], idx[j])]);
        let rhs = DVector::from_fn(idx.len(), |i, _| c[idx[i]]);
        let sol = match Cholesky::new(sub.clone()) {
            Some(ch) => ch.solve(&rhs),
            None => sub.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(idx.len())),
        };
        for (i, &j) in idx.iter().enumerate() {
            s[j] = sol[i];
        }
        s
    };
    for _ in 0..(3 * k + 10) {
        let w = c - p * &x;
        let next = (0..k)
            .filter(|&i| !passive[i] && w[i] > tol)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let Some(j) = next else { break };
        passive[j] = true;
        for _ in 0..(3 * k + 10) {
            let s = solve_sub(&passive);
            if (0..k).all(|i| !passive[i] || s[i] > 0.0) {
                x = s;
                break;
            }
            let mut step = 1.0f64;
            for i in 0..k {
                if passive[i] && s[i] <= 0.0 {
                    let denom = x[i] - s[i];
                    if denom > 0.0 {
                        step = step.min(x[i] / denom);
                    } else {
                        step = 0.0;
                    }
                }
            }
            x += (s - &x) * step;
            for i in 0..k {
                if passive[i] && x[i] <= tol {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
        }
    }
    let grad = p * &x - c;
    (x, grad)
}

/// Statistic, binding-constraint count and minimiser for moments `m` with
/// covariance `cov`.
pub fn clr_stat(m: &[f64], cov: &DMatrix<f64>) -> Result<ClrResult> {
    let k = m.len();
    if cov.nrows() != k {
        return Err(SkyError::domain("moment and covariance dimensions differ"));
    }
    if k == 0 {
        return Ok(ClrResult {
            value: 0.0,
            active: 0,
            mu: Vec::new(),
            ridged: false,
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(SkyError::domain("non-finite moment"));
    }
    let mv = DVector::from_column_slice(m);
    if m.iter().all(|&v| v <= 0.0) {
        return Ok(ClrResult {
            value: 0.0,
            active: 0,
            mu: m.to_vec(),
            ridged: false,
        });
    }
    let (ch, ridged) = factor(cov)?;
    let p = ch.inverse();
    let p = (&p + p.transpose()) * 0.5;
    let c = -(&p * &mv);
    let (nu, grad) = nnls(&p, &c);
    let resid = &mv + &nu;
    let value = match ch.l().solve_lower_triangular(&resid) {
        Some(z) => z.norm_squared(),
        None => (resid.transpose() * &p * &resid)[(0, 0)],
    };
    let gscale = grad.abs().max().max(c.abs().max()).max(1e-300);
    let mtol = 1e-9 * gscale;
    let active = (0..k).filter(|&i| nu[i] == 0.0 && grad[i] > mtol).count();
    Ok(ClrResult {
        value,
        active,
        mu: (-nu).iter().copied().collect(),
        ridged,
    })
}

/// `1 - level` quantile of chi-square with `df` degrees of freedom.
pub fn critical_value(df: usize, level: f64) -> f64 {
    if df == 0 {
        return 0.0;
    }
    ChiSquared::new(df as f64)
        .map(|d| d.inverse_cdf(1.0 - level))
        .unwrap_or(f64::INFINITY)
}

/// Accept when the statistic is within the critical value for its number of
/// binding constraints; with none binding the statistic is zero.
pub fn accepts(res: &ClrResult, level: f64) -> bool {
    res.active == 0 || res.value <= critical_value(res.active, level)
}
