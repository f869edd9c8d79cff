//! Fixed cost per flight hour across parameter draws.

use serde::{Deserialize, Serialize};

use super::FixedCostParams;
use crate::linalg::quantile_sorted;
use crate::model::Dataset;
use crate::units::{legs_per_quarter, CRUISE_SPEED_KMH};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub p025: f64,
    pub p975: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(Summary {
            median: quantile_sorted(&v, 0.5),
            p025: quantile_sorted(&v, 0.025),
            p975: quantile_sorted(&v, 0.975),
        })
    }
}

/// Quarterly flight hours of a route at daily frequency `freq`.
pub fn flight_hours(freq: f64, distance_km: f64) -> f64 {
    legs_per_quarter(freq) * distance_km / CRUISE_SPEED_KMH
}

/// Mean over observed products of fixed cost (USD) per flight hour.
pub fn mean_fc_per_flight_hour(params: &FixedCostParams, ds: &Dataset) -> f64 {
    let vals: Vec<f64> = ds
        .products
        .iter()
        .filter(|p| p.freq > 0.0)
        .map(|p| {
            let d = ds.route(p.route).distance_km;
            params.cost_usd(ds, p.route, p.freq) / flight_hours(p.freq, d)
        })
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Median and central 95% band over parameter draws.
pub fn fc_per_flight_hour(draws: &[FixedCostParams], ds: &Dataset) -> Option<Summary> {
    let v: Vec<f64> = draws.iter().map(|d| mean_fc_per_flight_hour(d, ds)).collect();
    Summary::of(&v)
}
