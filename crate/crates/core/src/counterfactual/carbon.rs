//! Emissions and carbon revenue.

use serde::{Deserialize, Serialize};

use super::scenario::Scenario;
use crate::units::{
    legs_per_quarter, CO2_PER_KG_FUEL, FLIGHT_FUEL_KG_PER_1000KM, KM_PER_DISTANCE_UNIT, PAX_FUEL_KG_PER_1000KM,
};

/// Quarterly CO2 (kg) from flying `freq` daily round trips over `km`.
pub fn flight_co2_kg(freq: f64, km: f64) -> f64 {
    legs_per_quarter(freq) * km / KM_PER_DISTANCE_UNIT * FLIGHT_FUEL_KG_PER_1000KM * CO2_PER_KG_FUEL
}

/// CO2 (kg) attributed to carrying `passengers` over `km`.
pub fn pax_co2_kg(passengers: f64, km: f64) -> f64 {
    passengers * km / KM_PER_DISTANCE_UNIT * PAX_FUEL_KG_PER_1000KM * CO2_PER_KG_FUEL
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CarbonTotals {
    pub flight_co2_kg: f64,
    pub pax_co2_kg: f64,
    pub revenue_usd: f64,
}

impl CarbonTotals {
    pub fn emissions_kg(&self) -> f64 {
        self.flight_co2_kg + self.pax_co2_kg
    }
}

/// Totals over `(freq, km, passengers)` triples.
pub fn carbon_accounting<I>(products: I, scenario: &Scenario) -> CarbonTotals
where
    I: IntoIterator<Item = (f64, f64, f64)>,
{
    let mut t = CarbonTotals::default();
    for (freq, km, pax) in products {
        t.flight_co2_kg += flight_co2_kg(freq, km);
        t.pax_co2_kg += pax_co2_kg(pax, km);
    }
    t.revenue_usd = scenario.implied_tau * t.emissions_kg();
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counterfactual::scenario::{scenario_params, ScenarioName};

    #[test]
    fn one_daily_flight_over_1000km() {
        let kg = flight_co2_kg(1.0, 1000.0);
        assert!((kg - 1_437_800.0).abs() < 1e-6);
        let low = scenario_params(ScenarioName::Low);
        let t = carbon_accounting([(1.0, 1000.0, 0.0)], &low);
        assert!((t.revenue_usd - 91_013.0).abs() / 91_013.0 < 0.005, "{}", t.revenue_usd);
        let base = scenario_params(ScenarioName::Base);
        assert_eq!(carbon_accounting([(1.0, 1000.0, 50.0)], &base).revenue_usd, 0.0);
    }

    #[test]
    fn additive_over_routes() {
        let s = scenario_params(ScenarioName::High);
        let a = carbon_accounting([(2.0, 700.0, 900.0)], &s);
        let b = carbon_accounting([(0.5, 2100.0, 300.0)], &s);
        let ab = carbon_accounting([(2.0, 700.0, 900.0), (0.5, 2100.0, 300.0)], &s);
        assert!((a.emissions_kg() + b.emissions_kg() - ab.emissions_kg()).abs() < 1e-6);
        assert!((a.revenue_usd + b.revenue_usd - ab.revenue_usd).abs() < 1e-6);
    }
}
