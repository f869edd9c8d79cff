//! Single-market deviations from an observed network.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{characteristics, DIM};
use crate::error::Result;
use crate::evaluator::{slots_by_market, Evaluator, Slot};
use crate::model::network::{consideration_set, switch_allowed, AirlineProfile, Networks};
use crate::model::{AirlineIdx, MarketIdx, Quarter, RouteIdx};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DeviationKind {
    SwitchRoute,
    ExitMarket,
    EnterUnserved,
}

impl DeviationKind {
    pub const ALL: [DeviationKind; 3] = [
        DeviationKind::SwitchRoute,
        DeviationKind::ExitMarket,
        DeviationKind::EnterUnserved,
    ];

    pub fn label(self) -> &'static str {
        match self {
            DeviationKind::SwitchRoute => "switch_route",
            DeviationKind::ExitMarket => "exit_market",
            DeviationKind::EnterUnserved => "enter_unserved",
        }
    }
}

/// One revealed-preference comparison. With `theta` in $10,000 units the
/// observed choice beats the deviation by `delta_pi2 / 1e4 - delta_z . theta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationRecord {
    pub airline: AirlineIdx,
    pub quarter: Quarter,
    pub kind: DeviationKind,
    /// Operated (route, frequency); absent for entry into an unserved market.
    pub observed: Option<(RouteIdx, f64)>,
    pub alternative: Option<(RouteIdx, f64)>,
    /// Expected variable profit of the observed choice minus the deviation, USD.
    pub delta_pi2: f64,
    /// Characteristics of the observed choice minus the deviation.
    pub delta_z: [f64; DIM],
    /// Market whose distance and size define the instrument cell.
    pub cell_market: MarketIdx,
}

enum Task {
    Exit(AirlineIdx, Slot),
    Switch(AirlineIdx, Slot, RouteIdx),
    Enter(AirlineIdx, RouteIdx, f64),
}

struct Context<'e, 'a> {
    ev: &'e Evaluator<'a>,
    q: Quarter,
    by_market: BTreeMap<MarketIdx, Vec<Slot>>,
}

impl Context<'_, '_> {
    fn slots(&self, m: MarketIdx) -> Vec<Slot> {
        self.by_market.get(&m).cloned().unwrap_or_default()
    }

    fn profit(&self, m: MarketIdx, slots: &[Slot], g: AirlineIdx) -> Result<f64> {
        if slots.is_empty() {
            return Ok(0.0);
        }
        Ok(self.ev.market(self.q, m, slots)?.airline_profit(g))
    }

    fn without(&self, m: MarketIdx, g: AirlineIdx, r: RouteIdx) -> Vec<Slot> {
        self.slots(m)
            .into_iter()
            .filter(|s| !(s.airline == g && s.route == r))
            .collect()
    }

    fn run(&self, task: &Task) -> Result<DeviationRecord> {
        let ds = self.ev.dataset();
        match *task {
            Task::Exit(g, s) => {
                let m = ds.market_of(s.route);
                let base = self.profit(m, &self.slots(m), g)?;
                let after = self.profit(m, &self.without(m, g, s.route), g)?;
                Ok(DeviationRecord {
                    airline: g,
                    quarter: self.q,
                    kind: DeviationKind::ExitMarket,
                    observed: Some((s.route, s.freq)),
                    alternative: None,
                    delta_pi2: base - after,
                    delta_z: characteristics(ds, s.route, s.freq),
                    cell_market: m,
                })
            }
            Task::Switch(g, s, alt) => {
                let m = ds.market_of(s.route);
                let m2 = ds.market_of(alt);
                let moved = Slot {
                    airline: g,
                    route: alt,
                    freq: s.freq,
                };
                let base_m = self.profit(m, &self.slots(m), g)?;
                let mut without = self.without(m, g, s.route);
                let delta = if m == m2 {
                    without.push(moved);
                    base_m - self.profit(m, &without, g)?
                } else {
                    let lost = base_m - self.profit(m, &without, g)?;
                    let before2 = self.slots(m2);
                    let mut after2 = before2.clone();
                    after2.push(moved);
                    lost + self.profit(m2, &before2, g)? - self.profit(m2, &after2, g)?
                };
                let z0 = characteristics(ds, s.route, s.freq);
                let z1 = characteristics(ds, alt, s.freq);
                Ok(DeviationRecord {
                    airline: g,
                    quarter: self.q,
                    kind: DeviationKind::SwitchRoute,
                    observed: Some((s.route, s.freq)),
                    alternative: Some((alt, s.freq)),
                    delta_pi2: delta,
                    delta_z: std::array::from_fn(|i| z0[i] - z1[i]),
                    cell_market: m2,
                })
            }
            Task::Enter(g, r, f) => {
                let m = ds.market_of(r);
                let gain = self.profit(
                    m,
                    &[Slot {
                        airline: g,
                        route: r,
                        freq: f,
                    }],
                    g,
                )?;
                let z = characteristics(ds, r, f);
                Ok(DeviationRecord {
                    airline: g,
                    quarter: self.q,
                    kind: DeviationKind::EnterUnserved,
                    observed: None,
                    alternative: Some((r, f)),
                    delta_pi2: -gain,
                    delta_z: z.map(|v| -v),
                    cell_market: m,
                })
            }
        }
    }
}

/// Deviations for every airline active in `nets`: exit of each operated
/// route, redeployment of its frequency to each feasible non-operated route,
/// and entry at the airline's mean frequency into each unserved market
/// (through the first feasible route of that market).
pub fn enumerate_deviations(ev: &Evaluator<'_>, nets: &Networks) -> Result<Vec<DeviationRecord>> {
    let ds = ev.dataset();
    let Some(q) = nets.quarter else {
        return Ok(Vec::new());
    };
    let ctx = Context {
        ev,
        q,
        by_market: slots_by_market(ds, &nets.freq),
    };
    let mut tasks = Vec::new();
    for g in nets.airlines() {
        let net = nets.of(g);
        let profile = AirlineProfile::from_network(ds, &net)?;
        let cs = consideration_set(ds, &profile);
        for (&r, &f) in &net.freq {
            let slot = Slot {
                airline: g,
                route: r,
                freq: f,
            };
            tasks.push(Task::Exit(g, slot));
            for &alt in &cs {
                if !net.freq.contains_key(&alt) && switch_allowed(ds, g, r, alt) {
                    tasks.push(Task::Switch(g, slot, alt));
                }
            }
        }
        let mean_freq = net.total_frequency() / net.freq.len() as f64;
        for (mi, mk) in ds.markets.iter().enumerate() {
            let m = MarketIdx(mi as u32);
            if ctx.by_market.contains_key(&m) {
                continue;
            }
            if let Some(&r) = mk.routes.iter().filter(|r| cs.binary_search(r).is_ok()).min() {
                tasks.push(Task::Enter(g, r, mean_freq));
            }
        }
    }
    tasks.par_iter().map(|t| ctx.run(t)).collect()
}
