//! Linear IV estimation of demand and OLS of recovered marginal costs.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::demand::DemandParams;
use crate::design::{Design, FixedEffects, LinearIndex, Obs};
use crate::error::{Result, SkyError};
use crate::model::Dataset;
use crate::pricing::{recover_marginal_costs, CostParams, OwnershipMatrix};

/// Excluded instruments for price and within-nest share.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instrument {
    /// Distinct airline groups in the market-quarter, the product's own included.
    CompetitorCount,
    /// Mean daily frequency of rival groups' products; 0 for a monopolist.
    RivalMeanFrequency,
}

impl Instrument {
    pub fn name(self) -> &'static str {
        match self {
            Instrument::CompetitorCount => "competitor_count",
            Instrument::RivalMeanFrequency => "rival_mean_frequency",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IvSpec {
    pub instruments: Vec<Instrument>,
    pub fixed_effects: FixedEffects,
    /// Two-step efficient GMM instead of 2SLS.
    pub two_step: bool,
}

impl Default for IvSpec {
    fn default() -> Self {
        IvSpec {
            instruments: vec![Instrument::CompetitorCount, Instrument::RivalMeanFrequency],
            fixed_effects: FixedEffects::default(),
            two_step: false,
        }
    }
}

/// Instrument values per product, in dataset product order.
pub fn build_instruments(ds: &Dataset, which: &[Instrument]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; which.len()]; ds.products.len()];
    for (_, _, idxs) in ds.market_quarters() {
        let groups: BTreeSet<_> = idxs.iter().map(|&i| ds.products[i].airline).collect();
        for &i in idxs {
            let own = ds.products[i].airline;
            let rivals: Vec<f64> = idxs
                .iter()
                .filter(|&&k| ds.products[k].airline != own)
                .map(|&k| ds.products[k].freq)
                .collect();
            for (c, inst) in which.iter().enumerate() {
                out[i][c] = match inst {
                    Instrument::CompetitorCount => groups.len() as f64,
                    Instrument::RivalMeanFrequency => {
                        if rivals.is_empty() {
                            0.0
                        } else {
                            rivals.iter().sum::<f64>() / rivals.len() as f64
                        }
                    }
                };
            }
        }
    }
    out
}

/// Result of a linear regression or IV fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub residuals: Vec<f64>,
    pub n_obs: usize,
}

/// Names of columns that are linear combinations of earlier ones.
pub fn collinear_columns(x: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for (c, name) in names.iter().enumerate() {
        let col = x.column(c).into_owned();
        let norm = col.norm();
        let mut v = col;
        for b in &basis {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        // Second pass for numerical orthogonality.
        for b in &basis {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        let rest = v.norm();
        if norm == 0.0 || rest <= 1e-9 * norm {
            bad.push(name.clone());
        } else {
            basis.push(v / rest);
        }
    }
    bad
}

fn check_rank(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let bad = collinear_columns(x, names);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(SkyError::RankDeficient { columns: bad })
    }
}

fn invert_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| m.clone().try_inverse())
        .ok_or_else(|| SkyError::domain(format!("{what} is singular")))
}

/// OLS with heteroskedasticity-robust (HC0) or classical standard errors.
pub fn ols(y: &DVector<f64>, x: &DMatrix<f64>, names: &[String], robust: bool) -> Result<LinearFit> {
    check_rank(x, names)?;
    let xtx_inv = invert_spd(&(x.transpose() * x), "X'X")?;
    let coef = &xtx_inv * x.transpose() * y;
    let resid = y - x * &coef;
    let (n, k) = (x.nrows(), x.ncols());
    let cov = if robust {
        let mut meat = DMatrix::zeros(k, k);
        for i in 0..n {
            let row = x.row(i);
            meat += row.transpose() * row * (resid[i] * resid[i]);
        }
        &xtx_inv * meat * &xtx_inv
    } else {
        let s2 = resid.norm_squared() / (n.saturating_sub(k)).max(1) as f64;
        &xtx_inv * s2
    };
    Ok(LinearFit {
        names: names.to_vec(),
        coef: coef.iter().copied().collect(),
        se: (0..k).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
        residuals: resid.iter().copied().collect(),
        n_obs: n,
    })
}

/// 2SLS (or two-step GMM) of `y` on `x` with instruments `z`; HC0 errors.
pub fn iv_fit(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    x_names: &[String],
    z_names: &[String],
    two_step: bool,
) -> Result<LinearFit> {
    if z.ncols() < x.ncols() {
        return Err(SkyError::domain(format!(
            "under-identified: {} instruments for {} regressors",
            z.ncols(),
            x.ncols()
        )));
    }
    check_rank(x, x_names)?;
    check_rank(z, z_names)?;
    let (n, k) = (x.nrows(), x.ncols());
    let zt = z.transpose();
    let w0 = invert_spd(&(&zt * z), "Z'Z")?;
    let zx = &zt * x;
    let zy = &zt * y;
    let solve = |w: &DMatrix<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let bread = invert_spd(&(zx.transpose() * w * &zx), "X'Z W Z'X")?;
        let coef = &bread * zx.transpose() * w * &zy;
        Ok((coef, bread))
    };
    let (mut coef, mut bread) = solve(&w0)?;
    let mut w = w0;
    if two_step {
        let resid = y - x * &coef;
        let mut s = DMatrix::zeros(z.ncols(), z.ncols());
        for i in 0..n {
            let row = z.row(i);
            s += row.transpose() * row * (resid[i] * resid[i]);
        }
        w = invert_spd(&s, "moment covariance")?;
        (coef, bread) = solve(&w)?;
    }
    let resid = y - x * &coef;
    let mut s = DMatrix::zeros(z.ncols(), z.ncols());
    for i in 0..n {
        let row = z.row(i);
        s += row.transpose() * row * (resid[i] * resid[i]);
    }
    let a = zx.transpose() * &w;
    let cov = &bread * (&a * s * a.transpose()) * &bread;
    Ok(LinearFit {
        names: x_names.to_vec(),
        coef: coef.iter().copied().collect(),
        se: (0..k).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
        residuals: resid.iter().copied().collect(),
        n_obs: n,
    })
}

/// Conventional first-stage F for the excluded instruments (`z` columns at
/// `excluded`) in a regression of `endog` on `z`.
pub fn first_stage_f(endog: &DVector<f64>, z: &DMatrix<f64>, excluded: &[usize]) -> Result<f64> {
    let n = z.nrows();
    let k = z.ncols();
    let full = invert_spd(&(z.transpose() * z), "Z'Z")?;
    let rss_u = (endog - z * (&full * z.transpose() * endog)).norm_squared();
    let kept: Vec<usize> = (0..k).filter(|c| !excluded.contains(c)).collect();
    let zr = z.select_columns(&kept);
    let rss_r = if kept.is_empty() {
        endog.norm_squared()
    } else {
        let inv = invert_spd(&(zr.transpose() * &zr), "restricted Z'Z")?;
        (endog - &zr * (inv * zr.transpose() * endog)).norm_squared()
    };
    let q = excluded.len() as f64;
    let dof = (n as f64 - k as f64).max(1.0);
    if rss_u <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(((rss_r - rss_u) / q) / (rss_u / dof))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandEstimate {
    pub params: DemandParams,
    pub fit: LinearFit,
    pub se_alpha: f64,
    pub se_lambda: f64,
    /// Per endogenous regressor (price, log within-share).
    pub first_stage_f: BTreeMap<String, f64>,
    /// Demand shock per product, dataset product order.
    pub xi: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Regressor names ahead of the design columns.
pub const PRICE: &str = "fare_usd";
pub const LOG_WITHIN: &str = "log_within_share";

fn observation(p: &crate::model::Product) -> Obs {
    Obs {
        airline: p.airline,
        route: p.route,
        quarter: p.quarter,
        freq: p.freq,
    }
}

/// 2SLS of `ln s - ln s0` on price, `ln s*`, and the design.
pub fn estimate_demand(ds: &Dataset, spec: &IvSpec) -> Result<DemandEstimate> {
    if spec.instruments.len() < 2 {
        return Err(SkyError::domain("demand estimation needs at least two excluded instruments"));
    }
    let n = ds.products.len();
    let design = Design::new(ds, spec.fixed_effects, true);
    let k = design.len();
    let mut y = DVector::zeros(n);
    let mut x = DMatrix::zeros(n, k + 2);
    let mut z = DMatrix::zeros(n, k + spec.instruments.len());
    let inst = build_instruments(ds, &spec.instruments);
    let mut row = vec![0.0; k];
    for (_, m, idxs) in ds.market_quarters() {
        let q = ds.products[idxs[0]].quarter;
        let (inside, within, outside) = ds.observed_shares(q, m);
        if !(outside > 0.0) {
            return Err(SkyError::domain(format!(
                "market {} quarter {} has no outside share",
                ds.market_label(m),
                q.get()
            )));
        }
        for (c, &i) in idxs.iter().enumerate() {
            if !(inside[c] > 0.0) {
                return Err(SkyError::domain(format!(
                    "product {} has zero passengers; log share undefined",
                    ds.products[i].id
                )));
            }
            let p = &ds.products[i];
            y[i] = inside[c].ln() - outside.ln();
            x[(i, 0)] = p.fare;
            x[(i, 1)] = within[c].ln();
            design.fill(ds, &observation(p), &mut row);
            for (j, v) in row.iter().enumerate() {
                x[(i, j + 2)] = *v;
                z[(i, j)] = *v;
            }
            for (j, v) in inst[i].iter().enumerate() {
                z[(i, k + j)] = *v;
            }
        }
    }
    let mut x_names = vec![PRICE.to_string(), LOG_WITHIN.to_string()];
    x_names.extend(design.names.iter().cloned());
    let mut z_names: Vec<String> = design.names.clone();
    z_names.extend(spec.instruments.iter().map(|i| i.name().to_string()));
    let fit = iv_fit(&y, &x, &z, &x_names, &z_names, spec.two_step)?;
    let alpha = -fit.coef[0];
    let lambda = 1.0 - fit.coef[1];
    let excluded: Vec<usize> = (k..k + spec.instruments.len()).collect();
    let mut first_stage = BTreeMap::new();
    first_stage.insert(PRICE.to_string(), first_stage_f(&x.column(0).into_owned(), &z, &excluded)?);
    first_stage.insert(LOG_WITHIN.to_string(), first_stage_f(&x.column(1).into_owned(), &z, &excluded)?);
    let mut warnings = Vec::new();
    if !(lambda > 0.0 && lambda <= 1.0) {
        let msg = format!("estimated nesting parameter {lambda} lies outside (0, 1]");
        warn!("{msg}");
        warnings.push(msg);
    }
    if !(alpha > 0.0) {
        let msg = format!("estimated price coefficient {alpha} is not positive");
        warn!("{msg}");
        warnings.push(msg);
    }
    let index = LinearIndex::new(design, fit.coef[2..].to_vec())?;
    Ok(DemandEstimate {
        params: DemandParams { alpha, lambda, index },
        se_alpha: fit.se[0],
        se_lambda: fit.se[1],
        first_stage_f: first_stage,
        xi: fit.residuals.clone(),
        fit,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub params: CostParams,
    pub fit: LinearFit,
    /// Recovered marginal cost per product (USD).
    pub mc: Vec<f64>,
    /// Cost shock per product.
    pub omega: Vec<f64>,
    pub r_squared: f64,
}

/// Marginal costs from the pricing conditions, then OLS on the design used
/// by `demand`.
pub fn estimate_mc(ds: &Dataset, demand: &DemandParams) -> Result<CostEstimate> {
    let n = ds.products.len();
    let mut mc = vec![0.0; n];
    for (q, m, idxs) in ds.market_quarters() {
        let (inside, within, _) = ds.observed_shares(q, m);
        let prices: Vec<f64> = idxs.iter().map(|&i| ds.products[i].fare).collect();
        let owners: Vec<_> = idxs.iter().map(|&i| ds.products[i].airline).collect();
        let o = OwnershipMatrix::from_owners(&owners);
        let label = format!("{} quarter {}", ds.market_label(m), q.get());
        let rec = recover_marginal_costs(&prices, &inside, &within, &o, demand.alpha, demand.lambda, &label)?;
        for (c, &i) in idxs.iter().enumerate() {
            mc[i] = rec[c];
        }
    }
    let design = demand.index.design.clone();
    let k = design.len();
    let mut x = DMatrix::zeros(n, k);
    let mut row = vec![0.0; k];
    for (i, p) in ds.products.iter().enumerate() {
        design.fill(ds, &observation(p), &mut row);
        for (j, v) in row.iter().enumerate() {
            x[(i, j)] = *v;
        }
    }
    let y = DVector::from_vec(mc.clone());
    let fit = ols(&y, &x, &design.names, false)?;
    let mean = mc.iter().sum::<f64>() / n.max(1) as f64;
    let tss: f64 = mc.iter().map(|v| (v - mean) * (v - mean)).sum();
    let rss: f64 = fit.residuals.iter().map(|e| e * e).sum();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    Ok(CostEstimate {
        params: CostParams {
            index: LinearIndex::new(design, fit.coef.clone())?,
        },
        omega: fit.residuals.clone(),
        mc,
        fit,
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::dataset::fixtures::four_city_parts;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn instruments_for_toy_markets() {
        let ds = Dataset::build(four_city_parts()).unwrap();
        let z = build_instruments(&ds, &[Instrument::CompetitorCount, Instrument::RivalMeanFrequency]);
        let find = |id: &str| ds.products.iter().position(|p| p.id == id).unwrap();
        // p1 is alone in its market.
        assert_eq!(z[find("p1")], vec![1.0, 0.0]);
        // p2 (G1) and p3 (G2) share C1-C3.
        assert_eq!(z[find("p2")], vec![2.0, 2.0 / 7.0]);
        assert_eq!(z[find("p3")], vec![2.0, 4.0 / 7.0]);
    }

    #[test]
    fn just_identified_iv_with_own_regressors_is_ols() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let n = 300;
        let x = DMatrix::from_fn(n, 3, |_, c| if c == 0 { 1.0 } else { nd.sample(&mut rng) });
        let y = DVector::from_fn(n, |i, _| 1.0 + 2.0 * x[(i, 1)] - x[(i, 2)] + nd.sample(&mut rng));
        let a = ols(&y, &x, &names(3), true).unwrap();
        let b = iv_fit(&y, &x, &x, &names(3), &names(3), false).unwrap();
        for (u, v) in a.coef.iter().zip(&b.coef) {
            assert!((u - v).abs() < 1e-8);
        }
        for (u, v) in a.se.iter().zip(&b.se) {
            assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn just_identified_iv_zeroes_moments() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let n = 400;
        let z = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { nd.sample(&mut rng) });
        let u: Vec<f64> = (0..n).map(|_| nd.sample(&mut rng)).collect();
        let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { z[(i, 1)] + u[i] });
        let y = DVector::from_fn(n, |i, _| 0.5 - 1.5 * x[(i, 1)] + u[i]);
        let fit = iv_fit(&y, &x, &z, &names(2), &names(2), false).unwrap();
        let e = DVector::from_vec(fit.residuals.clone());
        let m = z.transpose() * e;
        assert!(m.amax() < 1e-10, "{m}");
        // Endogeneity biases OLS but not IV.
        assert!((fit.coef[1] + 1.5).abs() < 0.2);
    }

    #[test]
    fn collinear_columns_are_named() {
        let x = DMatrix::from_fn(10, 3, |i, c| match c {
            0 => 1.0,
            1 => i as f64,
            _ => 2.0 * i as f64 + 3.0,
        });
        let cols = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        assert_eq!(collinear_columns(&x, &cols), vec!["c".to_string()]);
        match ols(&DVector::zeros(10), &x, &cols, false) {
            Err(SkyError::RankDeficient { columns }) => assert_eq!(columns, vec!["c"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn first_stage_f_is_large_for_strong_instrument() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let n = 500;
        let z = DMatrix::from_fn(n, 2, |_, c| if c == 0 { 1.0 } else { nd.sample(&mut rng) });
        let x = DVector::from_fn(n, |i, _| 2.0 * z[(i, 1)] + nd.sample(&mut rng));
        assert!(first_stage_f(&x, &z, &[1]).unwrap() > 500.0);
        let noise = DVector::from_fn(n, |_, _| nd.sample(&mut rng));
        assert!(first_stage_f(&noise, &z, &[1]).unwrap() < 15.0);
    }
}
