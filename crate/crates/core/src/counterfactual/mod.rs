//! Network counterfactuals: scenarios, fixed-cost shock rationalization,
//! single-market deviations with pooled aircraft, and best-response dynamics.

pub mod carbon;
pub mod deviations;
pub mod engine;
pub mod ledger;
pub mod outcome;
pub mod scenario;

use std::collections::BTreeMap;

use crate::error::{Result, SkyError};
use crate::evaluator::{Evaluator, Slot};
use crate::fixedcost::FixedCostParams;
use crate::model::grid::FrequencyGrid;
use crate::model::network::{consideration_set, AirlineProfile, Networks};
use crate::model::{AirlineIdx, Dataset, MarketIdx, Quarter, RouteIdx};

pub use carbon::{carbon_accounting, CarbonTotals};
pub use deviations::{feasible_deviations, Candidate, MoveKind};
pub use engine::{best_response_pass, simulate, verify_stable, EvalOrder, SimConfig, SimOutcome};
pub use ledger::{rationalize_shocks, ShockLedger};
pub use outcome::{OutcomeStats, ProductStats};
pub use scenario::{scenario_params, Scenario, ScenarioName};

/// Smallest net-profit gain (USD) that counts as a profitable deviation.
pub const GAIN_TOL: f64 = 1e-3;

/// Everything a simulation run holds fixed: the scenario-specific profit
/// evaluator, frequency supports, fixed-cost parameters including the
/// scenario increment, and frozen consideration sets.
pub struct World<'w, 'a> {
    pub ev: &'w Evaluator<'a>,
    pub grid: &'w FrequencyGrid,
    pub scenario: Scenario,
    /// Fixed-cost parameters with the scenario increment applied.
    pub fc: FixedCostParams,
    pub quarter: Quarter,
    pub considered: BTreeMap<AirlineIdx, Vec<RouteIdx>>,
}

impl<'w, 'a> World<'w, 'a> {
    /// Consideration sets frozen at `baseline`.
    pub fn new(
        ev: &'w Evaluator<'a>,
        grid: &'w FrequencyGrid,
        scenario: Scenario,
        theta: FixedCostParams,
        baseline: &Networks,
    ) -> Result<Self> {
        let ds = ev.dataset();
        let quarter = baseline
            .quarter
            .ok_or_else(|| SkyError::domain("baseline network has no quarter"))?;
        let mut considered = BTreeMap::new();
        for g in baseline.airlines() {
            let profile = AirlineProfile::from_network(ds, &baseline.of(g))?;
            considered.insert(g, consideration_set(ds, &profile));
        }
        Ok(World {
            ev,
            grid,
            scenario,
            fc: theta.with_increment(scenario.fc_increment),
            quarter,
            considered,
        })
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.ev.dataset()
    }

    pub fn entity(&self, g: AirlineIdx) -> u32 {
        self.ev.entity(g)
    }

    pub fn fixed_cost(&self, r: RouteIdx, freq: f64) -> f64 {
        self.fc.cost_usd(self.dataset(), r, freq)
    }

    /// Expected variable profit of `g`'s parent entity in market `m`.
    pub fn entity_profit(&self, m: MarketIdx, slots: &[Slot], g: AirlineIdx) -> Result<f64> {
        if slots.is_empty() {
            return Ok(0.0);
        }
        let v = self.ev.market(self.quarter, m, slots)?;
        Ok(v.entity_profit(&self.ev.settings().entity, self.entity(g)))
    }
}

/// Slots of `state` in market `m`.
pub fn market_slots(ds: &Dataset, state: &Networks, m: MarketIdx) -> Vec<Slot> {
    state
        .freq
        .iter()
        .filter(|(&(_, r), _)| ds.market_of(r) == m)
        .map(|(&(airline, route), &freq)| Slot { airline, route, freq })
        .collect()
}

#[cfg(test)]
mod tests;
