//! Carbon-price scenarios.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::SkyError;
use crate::evaluator::EvalSettings;
use crate::units::{CO2_PER_KG_FUEL, PAX_FUEL_KG_PER_1000KM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    Base,
    Low,
    Med,
    High,
    Vh,
    Uh,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 6] = [
        ScenarioName::Base,
        ScenarioName::Low,
        ScenarioName::Med,
        ScenarioName::High,
        ScenarioName::Vh,
        ScenarioName::Uh,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Base => "base",
            ScenarioName::Low => "low",
            ScenarioName::Med => "med",
            ScenarioName::High => "high",
            ScenarioName::Vh => "vh",
            ScenarioName::Uh => "uh",
        }
    }

    fn level(self) -> f64 {
        ScenarioName::ALL.iter().position(|&s| s == self).unwrap_or(0) as f64
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = SkyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioName::ALL
            .into_iter()
            .find(|n| n.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| SkyError::unknown("scenario", s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: ScenarioName,
    /// Added to the frequency x distance fixed-cost coefficient, $10,000.
    pub fc_increment: f64,
    /// USD per passenger per 1000 km added to marginal cost.
    pub surcharge_rate: f64,
    /// USD per kg of CO2.
    pub implied_tau: f64,
}

/// Fixed-cost increment per scenario step, $10,000 per daily flight per 1000 km.
pub const FC_STEP: f64 = 10.0;
/// Surcharge per scenario step, USD per passenger per 1000 km.
pub const SURCHARGE_STEP: f64 = 0.5;

pub fn scenario_params(name: ScenarioName) -> Scenario {
    let k = name.level();
    let surcharge_rate = SURCHARGE_STEP * k;
    Scenario {
        name,
        fc_increment: FC_STEP * k,
        surcharge_rate,
        implied_tau: surcharge_rate / (CO2_PER_KG_FUEL * PAX_FUEL_KG_PER_1000KM),
    }
}

impl Scenario {
    pub fn parse(name: &str) -> Result<Self, SkyError> {
        Ok(scenario_params(name.parse()?))
    }

    /// `settings` with this scenario's surcharge.
    pub fn settings(&self, settings: &EvalSettings) -> EvalSettings {
        EvalSettings {
            surcharge_per_1000km: self.surcharge_rate,
            ..settings.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::{DAYS_PER_QUARTER, FIXED_COST_UNIT_USD, KM_PER_DISTANCE_UNIT, LEGS_PER_FREQUENCY};

    #[test]
    fn table_values() {
        let base = scenario_params(ScenarioName::Base);
        assert_eq!((base.fc_increment, base.surcharge_rate, base.implied_tau), (0.0, 0.0, 0.0));
        let low = scenario_params(ScenarioName::Low);
        assert_eq!(low.fc_increment, 10.0);
        assert_eq!(low.surcharge_rate, 0.5);
        assert!((low.implied_tau - 0.0633).abs() < 1e-4);
        let uh = Scenario::parse("UH").unwrap();
        assert_eq!(uh.fc_increment, 50.0);
        assert!((uh.implied_tau - 0.3165).abs() < 1e-3);
        assert!(Scenario::parse("extreme").is_err());
    }

    #[test]
    fn invariants() {
        for n in ScenarioName::ALL {
            let s = scenario_params(n);
            assert!((s.surcharge_rate - s.implied_tau * 3.16 * 2.5).abs() < 1e-12);
            let per_km = s.fc_increment / (DAYS_PER_QUARTER * LEGS_PER_FREQUENCY) * FIXED_COST_UNIT_USD / KM_PER_DISTANCE_UNIT;
            let target = s.surcharge_rate;
            assert!((per_km - target).abs() <= 0.1 * target + 1e-12, "{n}: {per_km}");
        }
    }
}
