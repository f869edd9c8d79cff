//! Expected equilibrium statistics of a network state.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::carbon::{flight_co2_kg, pax_co2_kg};
use super::ledger::ShockLedger;
use super::World;
use crate::error::Result;
use crate::evaluator::slots_by_market;
use crate::model::network::Networks;
use crate::model::{AirlineIdx, MarketIdx, RouteIdx};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductStats {
    pub airline: AirlineIdx,
    pub route: RouteIdx,
    pub market: MarketIdx,
    pub freq: f64,
    pub passengers: f64,
    pub revenue: f64,
    /// Marginal cost (including any capacity penalty and surcharge) times passengers.
    pub variable_cost: f64,
    pub variable_profit: f64,
    /// Deterministic fixed cost with the scenario increment, USD.
    pub fixed_cost: f64,
    pub kappa: f64,
    pub flight_co2_kg: f64,
    pub pax_co2_kg: f64,
}

impl ProductStats {
    pub fn net_profit(&self) -> f64 {
        self.variable_profit - self.fixed_cost - self.kappa
    }

    pub fn co2_kg(&self) -> f64 {
        self.flight_co2_kg + self.pax_co2_kg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketStats {
    pub market: MarketIdx,
    pub consumer_surplus: f64,
    pub passengers: f64,
}

/// Product- and market-level expectations; every dataset market is listed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomeStats {
    pub products: Vec<ProductStats>,
    pub markets: Vec<MarketStats>,
}

impl OutcomeStats {
    pub fn compute(world: &World<'_, '_>, ledger: &ShockLedger, state: &Networks) -> Result<Self> {
        let ds = world.dataset();
        let alpha = world.ev.model().demand.alpha;
        let by_market = slots_by_market(ds, &state.freq);
        let rows: Vec<(MarketStats, Vec<ProductStats>)> = (0..ds.markets.len())
            .into_par_iter()
            .map(|mi| -> Result<_> {
                let m = MarketIdx(mi as u32);
                let size = ds.market(m).size;
                let Some(slots) = by_market.get(&m) else {
                    return Ok((
                        MarketStats {
                            market: m,
                            consumer_surplus: 0.0,
                            passengers: 0.0,
                        },
                        Vec::new(),
                    ));
                };
                let v = world.ev.market(world.quarter, m, slots)?;
                let o = &v.outcome;
                let products: Vec<ProductStats> = v
                    .slots
                    .iter()
                    .enumerate()
                    .map(|(j, s)| {
                        let km = ds.route(s.route).distance_km;
                        ProductStats {
                            airline: s.airline,
                            route: s.route,
                            market: m,
                            freq: s.freq,
                            passengers: o.passengers[j],
                            revenue: o.revenue[j],
                            variable_cost: o.variable_cost[j],
                            variable_profit: o.profit[j],
                            fixed_cost: world.fixed_cost(s.route, s.freq),
                            kappa: ledger.kappa(s.airline, s.route, s.freq),
                            flight_co2_kg: flight_co2_kg(s.freq, km),
                            pax_co2_kg: pax_co2_kg(o.passengers[j], km),
                        }
                    })
                    .collect();
                Ok((
                    MarketStats {
                        market: m,
                        consumer_surplus: size / alpha * o.surplus_index,
                        passengers: o.passengers.iter().sum(),
                    },
                    products,
                ))
            })
            .collect::<Result<_>>()?;
        let mut out = OutcomeStats::default();
        for (m, p) in rows {
            out.markets.push(m);
            out.products.extend(p);
        }
        out.products.sort_by_key(|p| (p.airline, p.route));
        Ok(out)
    }

    /// Element-wise mean over states; products missing from a state count as zero.
    pub fn mean(states: &[OutcomeStats]) -> OutcomeStats {
        let k = states.len() as f64;
        if states.is_empty() {
            return OutcomeStats::default();
        }
        let mut products: BTreeMap<(AirlineIdx, RouteIdx), ProductStats> = BTreeMap::new();
        for s in states {
            for p in &s.products {
                let e = products.entry((p.airline, p.route)).or_insert_with(|| ProductStats {
                    freq: 0.0,
                    passengers: 0.0,
                    revenue: 0.0,
                    variable_cost: 0.0,
                    variable_profit: 0.0,
                    fixed_cost: 0.0,
                    kappa: 0.0,
                    flight_co2_kg: 0.0,
                    pax_co2_kg: 0.0,
                    ..p.clone()
                });
                e.freq += p.freq / k;
                e.passengers += p.passengers / k;
                e.revenue += p.revenue / k;
                e.variable_cost += p.variable_cost / k;
                e.variable_profit += p.variable_profit / k;
                e.fixed_cost += p.fixed_cost / k;
                e.kappa += p.kappa / k;
                e.flight_co2_kg += p.flight_co2_kg / k;
                e.pax_co2_kg += p.pax_co2_kg / k;
            }
        }
        let mut markets: BTreeMap<MarketIdx, MarketStats> = BTreeMap::new();
        for s in states {
            for m in &s.markets {
                let e = markets.entry(m.market).or_insert(MarketStats {
                    market: m.market,
                    consumer_surplus: 0.0,
                    passengers: 0.0,
                });
                e.consumer_surplus += m.consumer_surplus / k;
                e.passengers += m.passengers / k;
            }
        }
        OutcomeStats {
            products: products.into_values().collect(),
            markets: markets.into_values().collect(),
        }
    }

    pub fn total_passengers(&self) -> f64 {
        self.products.iter().map(|p| p.passengers).sum()
    }

    pub fn consumer_surplus(&self) -> f64 {
        self.markets.iter().map(|m| m.consumer_surplus).sum()
    }

    pub fn net_profit(&self) -> f64 {
        self.products.iter().map(|p| p.net_profit()).sum()
    }

    /// Quarterly one-way flight kilometres.
    pub fn distance_flown(&self, ds: &crate::model::Dataset) -> f64 {
        self.products
            .iter()
            .map(|p| crate::units::legs_per_quarter(p.freq) * ds.route(p.route).distance_km)
            .sum()
    }

    pub fn co2_kg(&self) -> f64 {
        self.products.iter().map(|p| p.co2_kg()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prod(r: u32, freq: f64, pax: f64) -> ProductStats {
        ProductStats {
            airline: AirlineIdx(0),
            route: RouteIdx(r),
            market: MarketIdx(0),
            freq,
            passengers: pax,
            revenue: 10.0 * pax,
            variable_cost: 5.0 * pax,
            variable_profit: 5.0 * pax,
            fixed_cost: 100.0,
            kappa: 1.0,
            flight_co2_kg: 2.0,
            pax_co2_kg: 3.0,
        }
    }

    #[test]
    fn mean_over_two_states() {
        let a = OutcomeStats {
            products: vec![prod(0, 2.0, 100.0), prod(1, 1.0, 50.0)],
            markets: vec![MarketStats {
                market: MarketIdx(0),
                consumer_surplus: 10.0,
                passengers: 150.0,
            }],
        };
        let b = OutcomeStats {
            products: vec![prod(0, 4.0, 300.0)],
            markets: vec![MarketStats {
                market: MarketIdx(0),
                consumer_surplus: 30.0,
                passengers: 300.0,
            }],
        };
        let m = OutcomeStats::mean(&[a.clone(), b.clone()]);
        assert_eq!(m.products.len(), 2);
        assert_eq!(m.products[0].freq, 3.0);
        assert_eq!(m.products[0].passengers, 200.0);
        assert_eq!(m.products[1].freq, 0.5);
        assert_eq!(m.products[1].fixed_cost, 50.0);
        assert_eq!(m.markets[0].consumer_surplus, 20.0);
        assert!((m.total_passengers() - (a.total_passengers() + b.total_passengers()) / 2.0).abs() < 1e-12);
        assert!((m.net_profit() - (a.net_profit() + b.net_profit()) / 2.0).abs() < 1e-9);
    }
}
