//! Feasible single-market deviations for one operated product.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ledger::ShockLedger;
use super::World;
use crate::error::{Result, SkyError};
use crate::evaluator::{slots_by_market, Slot};
use crate::model::network::{switch_allowed, Networks, FREQ_TOL};
use crate::model::{AirlineIdx, MarketIdx, RouteIdx};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveKind {
    /// Leave the route.
    FullExit,
    /// Cut to a lower frequency on the grid.
    PartialExit,
    /// Raise frequency using pooled aircraft.
    Increase,
    /// Leave the route and enter another.
    Switch,
    /// Cut frequency and enter another route with the freed aircraft.
    PartialSwitch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub kind: MoveKind,
    pub airline: AirlineIdx,
    pub route: RouteIdx,
    pub freq: f64,
    /// Frequency left on `route`; zero after an exit.
    pub remaining: f64,
    pub target: Option<(RouteIdx, f64)>,
    /// Change in the parent entity's expected variable profit, USD.
    pub gross: f64,
    /// Change in deterministic fixed cost, USD.
    pub fc_change: f64,
}

impl Candidate {
    /// Net gain before fixed-cost shocks.
    pub fn det_value(&self) -> f64 {
        self.gross - self.fc_change
    }

    /// (route, frequency) levels whose shocks the deviation takes on.
    pub fn new_keys(&self) -> Vec<(RouteIdx, f64)> {
        let mut out = Vec::with_capacity(2);
        if self.remaining > 0.0 {
            out.push((self.route, self.remaining));
        }
        if let Some(t) = self.target {
            out.push(t);
        }
        out
    }

    /// Net gain including the shocks in `ledger`.
    pub fn value(&self, ledger: &ShockLedger) -> f64 {
        let added: f64 = self
            .new_keys()
            .into_iter()
            .map(|(r, f)| ledger.kappa(self.airline, r, f))
            .sum();
        self.det_value() - added + ledger.kappa(self.airline, self.route, self.freq)
    }

    /// Aircraft returned to the pool (negative when drawn from it).
    pub fn pool_change(&self) -> f64 {
        self.freq - self.remaining - self.target.map_or(0.0, |t| t.1)
    }
}

enum Spec {
    Origin(MoveKind, f64),
    Move(f64, RouteIdx, f64),
}

/// Every deviation available to product `(g, r)` in `state` with `pool`
/// pooled daily flights: full exit, partial exit, increase within the pool,
/// and redeployment (full or partial) to a feasible route in a served market.
pub fn feasible_deviations(
    world: &World<'_, '_>,
    state: &Networks,
    g: AirlineIdx,
    r: RouteIdx,
    pool: f64,
) -> Result<Vec<Candidate>> {
    let ds = world.dataset();
    let f = state
        .get(g, r)
        .ok_or_else(|| SkyError::domain(format!("{} does not operate {}", g.0, ds.route_label(r))))?;
    if pool < -FREQ_TOL {
        return Err(SkyError::domain("negative frequency pool"));
    }
    let m = ds.market_of(r);
    let grid_r = world.grid.frequency_support(ds, m)?;
    let by_market = slots_by_market(ds, &state.freq);
    let slots_m = by_market.get(&m).cloned().unwrap_or_default();
    let base_m = world.entity_profit(m, &slots_m, g)?;

    let mut specs = vec![Spec::Origin(MoveKind::FullExit, 0.0)];
    let mut partials = Vec::new();
    for &x in grid_r {
        if x < f - FREQ_TOL {
            specs.push(Spec::Origin(MoveKind::PartialExit, x));
            partials.push(x);
        } else if x > f + FREQ_TOL && x <= f + pool + FREQ_TOL {
            specs.push(Spec::Origin(MoveKind::Increase, x));
        }
    }
    let served: BTreeSet<MarketIdx> = by_market.keys().copied().collect();
    let empty = Vec::new();
    let considered = world.considered.get(&g).unwrap_or(&empty);
    for &alt in considered {
        if alt == r || state.get(g, alt).is_some() || !switch_allowed(ds, g, r, alt) {
            continue;
        }
        let m2 = ds.market_of(alt);
        if !served.contains(&m2) {
            continue;
        }
        let grid_alt = world.grid.frequency_support(ds, m2)?;
        for rem in std::iter::once(0.0).chain(partials.iter().copied()) {
            for &x in grid_alt {
                if x <= pool + f - rem + FREQ_TOL {
                    specs.push(Spec::Move(rem, alt, x));
                }
            }
        }
    }

    let origin_slots = |rem: f64| -> Vec<Slot> {
        let mut s: Vec<Slot> = slots_m
            .iter()
            .filter(|s| !(s.airline == g && s.route == r))
            .copied()
            .collect();
        if rem > 0.0 {
            s.push(Slot {
                airline: g,
                route: r,
                freq: rem,
            });
        }
        s
    };
    let fc_now = world.fixed_cost(r, f);
    let fc_rem = |rem: f64| if rem > 0.0 { world.fixed_cost(r, rem) } else { 0.0 };

    specs
        .par_iter()
        .map(|spec| -> Result<Candidate> {
            match *spec {
                Spec::Origin(kind, rem) => {
                    let gross = world.entity_profit(m, &origin_slots(rem), g)? - base_m;
                    Ok(Candidate {
                        kind,
                        airline: g,
                        route: r,
                        freq: f,
                        remaining: rem,
                        target: None,
                        gross,
                        fc_change: fc_rem(rem) - fc_now,
                    })
                }
                Spec::Move(rem, alt, x) => {
                    let m2 = ds.market_of(alt);
                    let entered = Slot {
                        airline: g,
                        route: alt,
                        freq: x,
                    };
                    let mut after = origin_slots(rem);
                    let gross = if m2 == m {
                        after.push(entered);
                        world.entity_profit(m, &after, g)? - base_m
                    } else {
                        let before2 = by_market.get(&m2).cloned().unwrap_or_default();
                        let mut after2 = before2.clone();
                        after2.push(entered);
                        world.entity_profit(m, &after, g)? - base_m + world.entity_profit(m2, &after2, g)?
                            - world.entity_profit(m2, &before2, g)?
                    };
                    Ok(Candidate {
                        kind: if rem > 0.0 {
                            MoveKind::PartialSwitch
                        } else {
                            MoveKind::Switch
                        },
                        airline: g,
                        route: r,
                        freq: f,
                        remaining: rem,
                        target: Some((alt, x)),
                        gross,
                        fc_change: fc_rem(rem) + world.fixed_cost(alt, x) - fc_now,
                    })
                }
            }
        })
        .collect()
}

/// Candidate with the largest shock-inclusive gain above `tol`, if any.
/// Ties keep the earliest candidate.
pub fn best_deviation<'c>(cands: &'c [Candidate], ledger: &ShockLedger, tol: f64) -> Option<(&'c Candidate, f64)> {
    let mut best: Option<(&Candidate, f64)> = None;
    for c in cands {
        let v = c.value(ledger);
        if v > tol && best.is_none_or(|(_, b)| v > b) {
            best = Some((c, v));
        }
    }
    best
}
