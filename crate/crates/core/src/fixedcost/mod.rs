//! Fixed costs: route characteristics, single-market deviations, moment
//! inequalities, CLR inference and the confidence region.

pub mod clr;
pub mod deviations;
pub mod diagnostics;
pub mod moments;
pub mod region;

use serde::{Deserialize, Serialize};

use crate::model::{Dataset, RouteIdx};
use crate::units::{FIXED_COST_UNIT_USD, KM_PER_DISTANCE_UNIT, PERSONS_PER_MILLION};

pub use clr::{clr_stat, ClrResult};
pub use deviations::{enumerate_deviations, DeviationKind, DeviationRecord};
pub use moments::{moment_vector, CellScheme, CovarianceKind, MomentSet, SufficientStats};
pub use region::{confidence_region, ConfidenceRegion, GridSpec};

/// Number of fixed-cost characteristics.
pub const DIM: usize = 4;
pub const CHARACTERISTIC_NAMES: [&str; DIM] = [
    "constant",
    "frequency_x_distance_1000km",
    "log_market_size_millions",
    "slot_airports",
];

/// Route characteristics at daily frequency `freq`.
pub fn characteristics(ds: &Dataset, route: RouteIdx, freq: f64) -> [f64; DIM] {
    let r = ds.route(route);
    let m = ds.market(r.market);
    [
        1.0,
        freq * r.distance_km / KM_PER_DISTANCE_UNIT,
        (m.size / PERSONS_PER_MILLION).ln(),
        r.slot_airports as f64,
    ]
}

/// Coefficients on [`characteristics`], in $10,000 per quarter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedCostParams {
    pub theta: [f64; DIM],
}

impl FixedCostParams {
    pub fn new(theta: [f64; DIM]) -> Self {
        FixedCostParams { theta }
    }

    /// Raises the frequency-distance coefficient.
    pub fn with_increment(self, increment: f64) -> Self {
        let mut theta = self.theta;
        theta[1] += increment;
        FixedCostParams { theta }
    }

    pub fn index(&self, z: &[f64; DIM]) -> f64 {
        z.iter().zip(&self.theta).map(|(a, b)| a * b).sum()
    }

    /// Deterministic quarterly fixed cost in USD.
    pub fn cost_usd(&self, ds: &Dataset, route: RouteIdx, freq: f64) -> f64 {
        FIXED_COST_UNIT_USD * self.index(&characteristics(ds, route, freq))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::dataset::fixtures::four_city_parts;

    #[test]
    fn characteristics_by_hand() {
        let ds = Dataset::build(four_city_parts()).unwrap();
        let p = ds.products.iter().find(|p| p.id == "p1").unwrap();
        let z = characteristics(&ds, p.route, 2.0);
        // C1-C2: 800 km, sizes 4e6 and 2e6, P1 is slot controlled.
        assert_eq!(z[0], 1.0);
        assert!((z[1] - 1.6).abs() < 1e-12);
        assert!((z[2] - (8f64).sqrt().ln()).abs() < 1e-12);
        assert_eq!(z[3], 1.0);
        let fc = FixedCostParams::new([1.0, 2.0, 0.0, -1.0]);
        assert!((fc.cost_usd(&ds, p.route, 2.0) - 1e4 * (1.0 + 3.2 - 1.0)).abs() < 1e-9);
        assert_eq!(fc.with_increment(10.0).theta[1], 12.0);
    }
}
