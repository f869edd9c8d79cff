//! Expected variable profits for arbitrary market configurations, cached.

use std::collections::BTreeMap;
use std::sync::Arc;

use dashmap::DashMap;
use serde::{Deserialize, Serialize};

use crate::demand::DemandParams;
use crate::design::Obs;
use crate::error::{Result, SkyError};
use crate::model::{AirlineIdx, Dataset, MarketIdx, Quarter, RouteIdx};
use crate::pricing::{expected_profit, CostParams, ExpectedOutcome, MarketInputs, OwnershipMatrix, ShockDraw, SolverOptions};
use crate::shocks::ShockSampler;
use crate::units::KM_PER_DISTANCE_UNIT;

/// Estimated (or true) demand and marginal-cost parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub demand: DemandParams,
    pub cost: CostParams,
}

/// One operated product: airline, route, daily frequency.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub airline: AirlineIdx,
    pub route: RouteIdx,
    pub freq: f64,
}

/// How profits are evaluated: penalty, carbon surcharge, ownership.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub capacity_penalty: bool,
    /// USD per passenger per 1000 km added to marginal cost.
    pub surcharge_per_1000km: f64,
    /// Parent entity of each airline, indexed by airline.
    pub entity: Vec<u32>,
}

impl EvalSettings {
    /// Independent airlines, no penalty, no surcharge.
    pub fn plain(ds: &Dataset) -> Self {
        EvalSettings {
            capacity_penalty: false,
            surcharge_per_1000km: 0.0,
            entity: (0..ds.airlines.len() as u32).collect(),
        }
    }
}

/// Expected outcome of one market configuration.
#[derive(Clone, Debug)]
pub struct MarketValue {
    pub market: MarketIdx,
    pub slots: Vec<Slot>,
    pub outcome: ExpectedOutcome,
}

impl MarketValue {
    /// Expected variable profit accruing to `entity`.
    pub fn entity_profit(&self, entity: &[u32], e: u32) -> f64 {
        self.slots
            .iter()
            .zip(&self.outcome.profit)
            .filter(|(s, _)| entity[s.airline.idx()] == e)
            .map(|(_, p)| p)
            .sum()
    }

    pub fn airline_profit(&self, g: AirlineIdx) -> f64 {
        self.slots
            .iter()
            .zip(&self.outcome.profit)
            .filter(|(s, _)| s.airline == g)
            .map(|(_, p)| p)
            .sum()
    }

    pub fn total_profit(&self) -> f64 {
        self.outcome.profit.iter().sum()
    }
}

type Key = (u8, Vec<(u32, u32, u64)>);

pub struct Evaluator<'a> {
    ds: &'a Dataset,
    model: &'a Model,
    sampler: &'a ShockSampler,
    settings: EvalSettings,
    opts: SolverOptions,
    cache: DashMap<Key, Arc<MarketValue>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(ds: &'a Dataset, model: &'a Model, sampler: &'a ShockSampler, settings: EvalSettings) -> Result<Self> {
        model.demand.validate()?;
        if settings.entity.len() != ds.airlines.len() {
            return Err(SkyError::domain("entity map must cover every airline"));
        }
        if sampler.draws == 0 {
            return Err(SkyError::domain("expected profits need at least one draw"));
        }
        let opts = SolverOptions::new(model.demand.alpha, model.demand.lambda).with_penalty(settings.capacity_penalty);
        Ok(Evaluator {
            ds,
            model,
            sampler,
            settings,
            opts,
            cache: DashMap::new(),
        })
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.ds
    }

    pub fn model(&self) -> &'a Model {
        self.model
    }

    pub fn settings(&self) -> &EvalSettings {
        &self.settings
    }

    pub fn entity(&self, g: AirlineIdx) -> u32 {
        self.settings.entity[g.idx()]
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    /// Expected outcome for `slots`, which must all lie in `market`.
    pub fn market(&self, q: Quarter, market: MarketIdx, slots: &[Slot]) -> Result<Arc<MarketValue>> {
        let mut sorted: Vec<Slot> = slots.to_vec();
        sorted.sort_by(|a, b| (a.airline, a.route).cmp(&(b.airline, b.route)));
        let key: Key = (
            q.get(),
            sorted
                .iter()
                .map(|s| (s.airline.0, s.route.0, s.freq.to_bits()))
                .collect(),
        );
        if let Some(v) = self.cache.get(&key) {
            return Ok(Arc::clone(&v));
        }
        let value = Arc::new(self.compute(q, market, sorted)?);
        Ok(Arc::clone(self.cache.entry(key).or_insert(value).value()))
    }

    fn compute(&self, q: Quarter, market: MarketIdx, slots: Vec<Slot>) -> Result<MarketValue> {
        let n = slots.len();
        let mk = self.ds.market(market);
        let mut utility = Vec::with_capacity(n);
        let mut mc = Vec::with_capacity(n);
        let mut freq = Vec::with_capacity(n);
        let mut owners = Vec::with_capacity(n);
        for s in &slots {
            if self.ds.market_of(s.route) != market {
                return Err(SkyError::domain(format!(
                    "route {} is not in market {}",
                    self.ds.route_label(s.route),
                    self.ds.market_label(market)
                )));
            }
            if !(s.freq > 0.0) {
                return Err(SkyError::domain("operated frequency must be positive"));
            }
            let obs = Obs {
                airline: s.airline,
                route: s.route,
                quarter: q,
                freq: s.freq,
            };
            utility.push(self.model.demand.index.eval(self.ds, &obs));
            let km = self.ds.route(s.route).distance_km;
            mc.push(
                self.model.cost.index.eval(self.ds, &obs)
                    + self.settings.surcharge_per_1000km * km / KM_PER_DISTANCE_UNIT,
            );
            freq.push(s.freq);
            owners.push(self.settings.entity[s.airline.idx()]);
        }
        let ownership = OwnershipMatrix::from_owners(&owners);
        let draws: Vec<ShockDraw> = (0..self.sampler.draws)
            .map(|d| {
                let (xi, omega): (Vec<f64>, Vec<f64>) =
                    slots.iter().map(|s| self.sampler.draw(s.airline, s.route, d)).unzip();
                ShockDraw { xi, omega }
            })
            .collect();
        let inputs = MarketInputs {
            utility: &utility,
            mc: &mc,
            freq: &freq,
            ownership: &ownership,
            market_size: mk.size,
        };
        let outcome = expected_profit(&inputs, &self.opts, &draws);
        if !outcome.converged {
            return Err(SkyError::NonConvergence {
                market: format!("{} (quarter {})", self.ds.market_label(market), q.get()),
                iterations: self.opts.max_iterations,
                residual: outcome.worst_residual,
            });
        }
        Ok(MarketValue {
            market,
            slots,
            outcome,
        })
    }
}

/// Operated slots grouped by market.
pub fn slots_by_market(ds: &Dataset, freq: &BTreeMap<(AirlineIdx, RouteIdx), f64>) -> BTreeMap<MarketIdx, Vec<Slot>> {
    let mut out: BTreeMap<MarketIdx, Vec<Slot>> = BTreeMap::new();
    for (&(airline, route), &f) in freq {
        out.entry(ds.market_of(route)).or_default().push(Slot { airline, route, freq: f });
    }
    out
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use crate::design::{Design, FixedEffects, LinearIndex};

    /// Demand and cost with the constant and log-frequency terms only.
    pub fn toy_model(ds: &Dataset, alpha: f64, lambda: f64, constant: f64, mc: f64) -> Model {
        let design = Design::new(ds, FixedEffects::none(), true);
        let mut dcoef = vec![0.0; design.len()];
        dcoef[0] = constant;
        dcoef[1] = 1.0;
        let mut ccoef = vec![0.0; design.len()];
        ccoef[0] = mc;
        Model {
            demand: DemandParams {
                alpha,
                lambda,
                index: LinearIndex::new(design.clone(), dcoef).unwrap(),
            },
            cost: CostParams {
                index: LinearIndex::new(design, ccoef).unwrap(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testing::toy_model;
    use super::*;
    use crate::model::dataset::fixtures::four_city_parts;
    use crate::model::network::Networks;
    use crate::shocks::DrawSource;

    #[test]
    fn cache_is_order_free_and_consistent() {
        let ds = Dataset::build(four_city_parts()).unwrap();
        let model = toy_model(&ds, 0.03, 0.9, -4.0, 50.0);
        let sampler = ShockSampler::new(1, 8, DrawSource::Parametric { xi_sd: 0.3, omega_sd: 2.0 });
        let ev = Evaluator::new(&ds, &model, &sampler, EvalSettings::plain(&ds)).unwrap();
        let q = Quarter::new(1).unwrap();
        let nets = Networks::observed(&ds, q);
        let by = slots_by_market(&ds, &nets.freq);
        for (&m, slots) in &by {
            let a = ev.market(q, m, slots).unwrap();
            let mut rev = slots.clone();
            rev.reverse();
            let b = ev.market(q, m, &rev).unwrap();
            assert!(Arc::ptr_eq(&a, &b));
            assert!(a.total_profit() > 0.0);
        }
        assert_eq!(ev.cache_len(), by.len());
    }

    #[test]
    fn surcharge_lowers_profit() {
        let ds = Dataset::build(four_city_parts()).unwrap();
        let model = toy_model(&ds, 0.03, 0.9, -4.0, 50.0);
        let sampler = ShockSampler::new(1, 8, DrawSource::Parametric { xi_sd: 0.3, omega_sd: 2.0 });
        let base = Evaluator::new(&ds, &model, &sampler, EvalSettings::plain(&ds)).unwrap();
        let mut s = EvalSettings::plain(&ds);
        s.surcharge_per_1000km = 2.5;
        let taxed = Evaluator::new(&ds, &model, &sampler, s).unwrap();
        let q = Quarter::new(1).unwrap();
        let nets = Networks::observed(&ds, q);
        for (&m, slots) in &slots_by_market(&ds, &nets.freq) {
            let a = base.market(q, m, slots).unwrap();
            let b = taxed.market(q, m, slots).unwrap();
            assert!(b.total_profit() < a.total_profit());
            for (pa, pb) in a.outcome.prices.iter().zip(&b.outcome.prices) {
                assert!(pb > pa);
            }
        }
    }
}
