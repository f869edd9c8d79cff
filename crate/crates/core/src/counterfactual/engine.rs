//! Sequential best-response dynamics over single-market deviations.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::deviations::{best_deviation, feasible_deviations, Candidate};
use super::ledger::ShockLedger;
use super::outcome::OutcomeStats;
use super::scenario::ScenarioName;
use super::{World, GAIN_TOL};
use crate::error::{Result, SkyError};
use crate::evaluator::{slots_by_market, MarketValue};
use crate::model::network::{Networks, FREQ_TOL};
use crate::model::{AirlineIdx, MarketIdx, RouteIdx};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalOrder {
    ProfitDesc,
    ProfitAsc,
    Random,
}

impl EvalOrder {
    pub const ALL: [EvalOrder; 3] = [EvalOrder::ProfitDesc, EvalOrder::ProfitAsc, EvalOrder::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalOrder::ProfitDesc => "profit_desc",
            EvalOrder::ProfitAsc => "profit_asc",
            EvalOrder::Random => "random",
        }
    }
}

impl fmt::Display for EvalOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalOrder {
    type Err = SkyError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        EvalOrder::ALL
            .into_iter()
            .find(|o| o.as_str() == norm)
            .ok_or_else(|| SkyError::unknown("ordering", s))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub ordering: EvalOrder,
    pub max_iterations: usize,
    /// Drives the random ordering.
    pub seed: u64,
    /// Number of past states checked for a revisit.
    pub cycle_window: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            ordering: EvalOrder::ProfitDesc,
            max_iterations: 100,
            seed: 0,
            cycle_window: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub scenario: ScenarioName,
    pub ordering: EvalOrder,
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    /// Deviations executed in each pass.
    pub changes: Vec<usize>,
    /// Period of the detected cycle; statistics are then cycle means.
    pub cycle_length: Option<usize>,
    pub network: Networks,
    pub stats: OutcomeStats,
}

impl SimOutcome {
    pub fn total_changes(&self) -> usize {
        self.changes.iter().sum()
    }
}

fn shuffle<T>(v: &mut [T], seed: u64, label: &str, keys: &[u64]) {
    let mut r = rng::stream(seed, label, keys);
    v.shuffle(&mut r);
}

fn apply(state: &mut Networks, c: &Candidate) {
    if c.remaining > 0.0 {
        state.freq.insert((c.airline, c.route), c.remaining);
    } else {
        state.freq.remove(&(c.airline, c.route));
    }
    if let Some((alt, x)) = c.target {
        state.freq.insert((c.airline, alt), x);
    }
}

/// One pass over served markets in the given order. Airlines within a
/// market go by their variable profit there (shuffled under the random
/// order), each airline's routes by product profit; every product takes its
/// best profitable deviation. Pools start empty. Returns executed moves.
pub fn best_response_pass(
    world: &World<'_, '_>,
    ledger: &ShockLedger,
    state: &mut Networks,
    order: EvalOrder,
    seed: u64,
    iteration: usize,
) -> Result<Vec<Candidate>> {
    let ds = world.dataset();
    let by_market = slots_by_market(ds, &state.freq);
    let values: Vec<(MarketIdx, Arc<MarketValue>)> = by_market
        .par_iter()
        .map(|(&m, s)| Ok((m, world.ev.market(world.quarter, m, s)?)))
        .collect::<Result<_>>()?;
    let mut markets: Vec<(MarketIdx, f64, &MarketValue)> =
        values.iter().map(|(m, v)| (*m, v.total_profit(), v.as_ref())).collect();
    match order {
        EvalOrder::ProfitDesc => markets.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))),
        EvalOrder::ProfitAsc => markets.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))),
        EvalOrder::Random => shuffle(&mut markets, seed, "order-markets", &[iteration as u64]),
    }

    let mut pools: BTreeMap<u32, f64> = BTreeMap::new();
    let mut moves = Vec::new();
    for (m, _, value) in markets {
        let mut airlines: Vec<AirlineIdx> = value.slots.iter().map(|s| s.airline).collect();
        airlines.sort();
        airlines.dedup();
        match order {
            EvalOrder::Random => shuffle(&mut airlines, seed, "order-airlines", &[iteration as u64, m.0 as u64]),
            _ => {
                let profit: BTreeMap<AirlineIdx, f64> =
                    airlines.iter().map(|&g| (g, value.airline_profit(g))).collect();
                airlines.sort_by(|a, b| profit[b].total_cmp(&profit[a]).then(a.cmp(b)));
            }
        }
        for g in airlines {
            let mut routes: Vec<(RouteIdx, f64)> = value
                .slots
                .iter()
                .zip(&value.outcome.profit)
                .filter(|(s, _)| s.airline == g)
                .map(|(s, &p)| (s.route, p))
                .collect();
            routes.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (r, _) in routes {
                if state.get(g, r).is_none() {
                    continue;
                }
                let e = world.entity(g);
                let pool = pools.get(&e).copied().unwrap_or(0.0);
                let cands = feasible_deviations(world, state, g, r, pool)?;
                if let Some((c, _)) = best_deviation(&cands, ledger, GAIN_TOL) {
                    apply(state, c);
                    let next = pool + c.pool_change();
                    debug_assert!(next >= -FREQ_TOL);
                    pools.insert(e, next.max(0.0));
                    moves.push(c.clone());
                }
            }
        }
    }
    Ok(moves)
}

/// Position in `history` of the first state equal to `state`, if any.
pub fn cycle_start(history: &VecDeque<Networks>, state: &Networks) -> Option<usize> {
    history.iter().position(|h| h == state)
}

/// Iterates passes until none changes the network, a state recurs within
/// the window (statistics are then averaged over the cycle), or the
/// iteration limit is hit (final state reported, not converged).
pub fn simulate(
    world: &World<'_, '_>,
    ledger: &ShockLedger,
    baseline: &Networks,
    config: &SimConfig,
) -> Result<SimOutcome> {
    if config.max_iterations == 0 {
        return Err(SkyError::domain("max_iterations must be at least 1"));
    }
    let mut state = baseline.clone();
    let mut history: VecDeque<Networks> = VecDeque::from([state.clone()]);
    let mut changes = Vec::new();
    let mut converged = false;
    let mut cycle: Option<Vec<Networks>> = None;
    for it in 0..config.max_iterations {
        let moves = best_response_pass(world, ledger, &mut state, config.ordering, config.seed, it)?;
        changes.push(moves.len());
        if moves.is_empty() {
            converged = true;
            break;
        }
        if let Some(pos) = cycle_start(&history, &state) {
            cycle = Some(history.iter().skip(pos).cloned().collect());
            break;
        }
        history.push_back(state.clone());
        while history.len() > config.cycle_window.max(1) {
            history.pop_front();
        }
    }
    let stats = match &cycle {
        Some(states) => {
            let each: Vec<OutcomeStats> = states
                .iter()
                .map(|s| OutcomeStats::compute(world, ledger, s))
                .collect::<Result<_>>()?;
            OutcomeStats::mean(&each)
        }
        None => OutcomeStats::compute(world, ledger, &state)?,
    };
    if !converged && cycle.is_none() {
        log::warn!(
            "simulation stopped at the iteration limit ({}) without converging",
            config.max_iterations
        );
    }
    Ok(SimOutcome {
        scenario: world.scenario.name,
        ordering: config.ordering,
        seed: config.seed,
        converged,
        iterations: changes.len(),
        changes,
        cycle_length: cycle.as_ref().map(|c| c.len()),
        network: state,
        stats,
    })
}

/// Strictly profitable deviations available in `state` with empty pools.
pub fn verify_stable(world: &World<'_, '_>, ledger: &ShockLedger, state: &Networks) -> Result<Vec<Candidate>> {
    let products: Vec<(AirlineIdx, RouteIdx)> = state.freq.keys().copied().collect();
    let found: Vec<Vec<Candidate>> = products
        .par_iter()
        .map(|&(g, r)| {
            let cands = feasible_deviations(world, state, g, r, 0.0)?;
            Ok(cands.into_iter().filter(|c| c.value(ledger) > GAIN_TOL).collect())
        })
        .collect::<Result<_>>()?;
    Ok(found.into_iter().flatten().collect())
}
