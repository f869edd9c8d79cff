//! Calibrated synthetic datasets.
//!
//! Cities are scattered on a plane, airlines are given home countries, hubs
//! and candidate city sets, and networks are built by greedy profitable entry
//! under the true parameters. Prices then come from the Bertrand solver with
//! fresh demand and cost shocks in every quarter.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::demand::{market_shares, DemandParams};
use crate::design::{Column, Design, FixedEffects, LinearIndex, Obs};
use crate::error::{Result, SkyError};
use crate::evaluator::{EvalSettings, Evaluator, Model, Slot};
use crate::fixedcost::FixedCostParams;
use crate::linalg::{mean, std_dev};
use crate::model::grid::FrequencyGrid;
use crate::model::network::{consideration_set, AirlineProfile};
use crate::model::{
    canonical_pair, Airline, AirlineIdx, AirportIdx, CarrierType, City, CityIdx, Dataset, DatasetParts, MarketIdx,
    Quarter, RawAirport, RawDistance, RawProduct, RouteIdx,
};
use crate::pricing::{recover_marginal_costs, solve_prices, CostParams, MarketInputs, OwnershipMatrix, SolverOptions};
use crate::rng;
use crate::shocks::{shifted_lognormal, standard_normal_quantile, DrawSource, ShockSampler};

/// Product-level moments the generator aims for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Targets {
    pub fare_mean: f64,
    pub fare_sd: f64,
    pub freq_mean: f64,
    pub freq_sd: f64,
    pub distance_mean: f64,
    pub distance_sd: f64,
    pub size_mean: f64,
    pub size_sd: f64,
}

impl Default for Targets {
    fn default() -> Self {
        Targets {
            fare_mean: 85.0,
            fare_sd: 57.0,
            freq_mean: 0.95,
            freq_sd: 1.74,
            distance_mean: 1400.0,
            distance_sd: 720.0,
            size_mean: 2.44e6,
            size_sd: 1.71e6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AirlineMix {
    pub full_service: usize,
    pub low_cost: usize,
    pub regional: usize,
}

impl AirlineMix {
    pub fn total(&self) -> usize {
        self.full_service + self.low_cost + self.regional
    }
}

/// Linear index terms shared by the true demand and cost functions. Carrier
/// effects are relative to low-cost carriers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexTerms {
    pub constant: f64,
    pub log_freq: f64,
    /// Per 1000 km.
    pub distance: f64,
    pub distance_sq: f64,
    pub full_service: f64,
    pub regional: f64,
}

impl IndexTerms {
    fn carrier(&self, t: CarrierType) -> f64 {
        match t {
            CarrierType::FullService => self.full_service,
            CarrierType::LowCost => 0.0,
            CarrierType::Regional => self.regional,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_cities: usize,
    pub n_countries: usize,
    pub airlines: AirlineMix,
    pub quarters: u8,
    pub targets: Targets,
    /// Price coefficient per USD.
    pub alpha: f64,
    pub lambda: f64,
    pub demand: IndexTerms,
    /// USD per passenger.
    pub cost: IndexTerms,
    /// Fixed-cost coefficients, $10,000 per quarter.
    pub fixed_cost: [f64; 4],
    pub xi_sd: f64,
    /// USD.
    pub omega_sd: f64,
    /// Log-scale dispersion of city populations.
    pub population_log_sd: f64,
    /// Cities with a slot-controlled main airport and a secondary airport.
    pub slot_cities: usize,
    /// Cities whose main airport counts as major.
    pub major_cities: usize,
    /// Foreign cities in a full-service carrier's candidate set.
    pub full_service_foreign: usize,
    pub low_cost_cities: usize,
    pub regional_cities: usize,
    /// Shock draws behind the expected profits used for entry.
    pub entry_draws: usize,
    /// Largest admissible relative deviation of a moment from its target.
    pub tolerance: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 1,
            n_cities: 30,
            n_countries: 6,
            airlines: AirlineMix {
                full_service: 3,
                low_cost: 4,
                regional: 1,
            },
            quarters: 4,
            targets: Targets::default(),
            alpha: 0.03435,
            lambda: 0.91,
            demand: IndexTerms {
                constant: -2.8,
                log_freq: 1.05,
                distance: 0.312,
                distance_sq: 0.061,
                full_service: 3.35,
                regional: 1.55,
            },
            cost: IndexTerms {
                constant: 8.0,
                log_freq: 11.4,
                distance: 11.7,
                distance_sq: 2.55,
                full_service: 118.0,
                regional: 42.0,
            },
            fixed_cost: [1.5, 53.0, 4.0, -10.0],
            xi_sd: 0.3,
            omega_sd: 3.0,
            population_log_sd: 1.38,
            slot_cities: 3,
            major_cities: 10,
            full_service_foreign: 8,
            low_cost_cities: 12,
            regional_cities: 7,
            entry_draws: 16,
            tolerance: 0.25,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let t = &self.targets;
        for (name, v) in [
            ("fare_mean", t.fare_mean),
            ("fare_sd", t.fare_sd),
            ("freq_mean", t.freq_mean),
            ("freq_sd", t.freq_sd),
            ("distance_mean", t.distance_mean),
            ("distance_sd", t.distance_sd),
            ("size_mean", t.size_mean),
            ("size_sd", t.size_sd),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("target {name} must be positive, got {v}"));
            }
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            errs.push(format!("lambda must lie in (0, 1], got {}", self.lambda));
        }
        if !(self.alpha > 0.0) {
            errs.push(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.n_cities < 3 {
            errs.push("need at least 3 cities".into());
        }
        if self.n_countries == 0 || self.n_countries > self.n_cities {
            errs.push("n_countries must lie in [1, n_cities]".into());
        }
        if self.airlines.total() == 0 {
            errs.push("need at least one airline".into());
        }
        if self.quarters == 0 || self.quarters > 4 {
            errs.push("quarters must lie in 1..=4".into());
        }
        if self.xi_sd < 0.0 || self.omega_sd < 0.0 {
            errs.push("shock sds must be non-negative".into());
        }
        if self.entry_draws == 0 {
            errs.push("entry_draws must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SkyError::Validation { messages: errs })
        }
    }

    /// Fixed effects that span the true demand and cost indices.
    pub fn fixed_effects(&self) -> FixedEffects {
        FixedEffects::default()
    }

    pub fn fixed_cost_params(&self) -> FixedCostParams {
        FixedCostParams::new(self.fixed_cost)
    }
}

/// True parameters of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub model: Model,
    pub fixed_cost: FixedCostParams,
    pub xi_sd: f64,
    pub omega_sd: f64,
    /// Demand and cost shocks per product, in dataset product order.
    pub xi: Vec<f64>,
    pub omega: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub name: String,
    pub target: f64,
    pub actual: f64,
}

impl MomentCheck {
    pub fn relative_error(&self) -> f64 {
        (self.actual - self.target).abs() / self.target.abs()
    }
}

pub struct Synthetic {
    pub dataset: Dataset,
    pub truth: Truth,
    pub moments: Vec<MomentCheck>,
}

/// Product-level moments of `ds` against `targets`.
pub fn moment_checks(ds: &Dataset, targets: &Targets) -> Vec<MomentCheck> {
    let fares: Vec<f64> = ds.products.iter().map(|p| p.fare).collect();
    let freqs: Vec<f64> = ds.products.iter().map(|p| p.freq).collect();
    let dists: Vec<f64> = ds.products.iter().map(|p| ds.route(p.route).distance_km).collect();
    let sizes: Vec<f64> = ds
        .products
        .iter()
        .map(|p| ds.market(ds.market_of(p.route)).size)
        .collect();
    let row = |name: &str, target: f64, actual: f64| MomentCheck {
        name: name.to_string(),
        target,
        actual,
    };
    vec![
        row("fare_mean", targets.fare_mean, mean(&fares)),
        row("fare_sd", targets.fare_sd, std_dev(&fares)),
        row("freq_mean", targets.freq_mean, mean(&freqs)),
        row("freq_sd", targets.freq_sd, std_dev(&freqs)),
        row("distance_mean", targets.distance_mean, mean(&dists)),
        row("distance_sd", targets.distance_sd, std_dev(&dists)),
        row("size_mean", targets.size_mean, mean(&sizes)),
        row("size_sd", targets.size_sd, std_dev(&sizes)),
    ]
}

/// Shortest admissible city-pair distance; closer pairs get no market.
const MIN_DISTANCE_KM: f64 = 150.0;
/// Entry must beat fixed costs by at least this much (USD per quarter).
const ENTRY_MARGIN: f64 = 1.0;
const MAX_ROUNDS: usize = 20;
/// Observed prices are solved well inside the FOC tolerance checked later.
const PRICE_TOLERANCE: f64 = 1e-11;
const CALIBRATION_PASSES: usize = 6;
const CALIBRATION_SLACK: f64 = 0.03;

struct Geography {
    parts: DatasetParts,
    /// Candidate city sets and slot presence per airline (dataset order).
    reach: Vec<(BTreeSet<String>, BTreeSet<String>)>,
}

fn city_id(i: usize) -> String {
    format!("CT{i:02}")
}

fn airline_id(i: usize) -> String {
    format!("AL{i:02}")
}

/// `scale` multiplies distances and populations after they are anchored to
/// the all-pairs means.
fn geography(cfg: &SyntheticConfig, scale: (f64, f64)) -> Result<Geography> {
    let n = cfg.n_cities;
    let mut r = rng::stream(cfg.seed, "datagen-geography", &[]);
    let centres: Vec<(f64, f64)> = (0..cfg.n_countries)
        .map(|_| (r.random::<f64>(), r.random::<f64>()))
        .collect();
    let mut xy: Vec<(f64, f64)> = Vec::with_capacity(n);
    for i in 0..n {
        if i < cfg.n_countries {
            let (cx, cy) = centres[i];
            xy.push((cx + 0.02 * (r.random::<f64>() - 0.5), cy + 0.02 * (r.random::<f64>() - 0.5)));
        } else {
            xy.push((r.random::<f64>(), r.random::<f64>()));
        }
    }
    let country: Vec<usize> = xy
        .iter()
        .map(|&(x, y)| {
            (0..cfg.n_countries)
                .min_by(|&a, &b| {
                    let da = (centres[a].0 - x).powi(2) + (centres[a].1 - y).powi(2);
                    let db = (centres[b].0 - x).powi(2) + (centres[b].1 - y).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap_or(0)
        })
        .collect();
    // Log-normal populations on stratified quantiles, randomly assigned, so
    // that the size dispersion does not hinge on a handful of draws.
    let mut pop: Vec<f64> = (0..n)
        .map(|i| (cfg.population_log_sd * standard_normal_quantile((i as f64 + 0.5) / n as f64)).exp())
        .collect();
    pop.shuffle(&mut r);

    // Scale the plane and the populations so that all city pairs hit the
    // distance and size means; served pairs then land near the targets.
    let mut raw = Vec::new();
    let mut sizes = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            raw.push(((xy[i].0 - xy[j].0).powi(2) + (xy[i].1 - xy[j].1).powi(2)).sqrt());
            sizes.push((pop[i] * pop[j]).sqrt());
        }
    }
    let km_scale = scale.0 * cfg.targets.distance_mean / mean(&raw);
    let pop_scale = scale.1 * cfg.targets.size_mean / mean(&sizes);

    let countries: Vec<String> = (0..cfg.n_countries).map(|k| format!("K{k:02}")).collect();
    let cities: Vec<City> = (0..n)
        .map(|i| City {
            id: city_id(i),
            name: format!("City {i}"),
            country: countries[country[i]].clone(),
            population: (pop_scale * pop[i]).round().max(1.0),
        })
        .collect();
    let mut by_pop: Vec<usize> = (0..n).collect();
    by_pop.sort_by(|&a, &b| pop[b].total_cmp(&pop[a]).then(a.cmp(&b)));
    let rank: Vec<usize> = {
        let mut rk = vec![0; n];
        for (k, &i) in by_pop.iter().enumerate() {
            rk[i] = k;
        }
        rk
    };

    let mut distances = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = km_scale * ((xy[i].0 - xy[j].0).powi(2) + (xy[i].1 - xy[j].1).powi(2)).sqrt();
            if d >= MIN_DISTANCE_KM {
                distances.push(RawDistance {
                    city_a: city_id(i),
                    city_b: city_id(j),
                    distance_km: (d * 10.0).round() / 10.0,
                });
            }
        }
    }

    // Airlines: full-service carriers take the most populous countries.
    let mut country_pop = vec![0.0; cfg.n_countries];
    for i in 0..n {
        country_pop[country[i]] += pop[i];
    }
    let mut country_rank: Vec<usize> = (0..cfg.n_countries).collect();
    country_rank.sort_by(|&a, &b| country_pop[b].total_cmp(&country_pop[a]).then(a.cmp(&b)));
    let biggest_city = |k: usize| by_pop.iter().copied().find(|&i| country[i] == k);

    let mut kinds = Vec::new();
    kinds.extend(std::iter::repeat_n(CarrierType::FullService, cfg.airlines.full_service));
    kinds.extend(std::iter::repeat_n(CarrierType::LowCost, cfg.airlines.low_cost));
    kinds.extend(std::iter::repeat_n(CarrierType::Regional, cfg.airlines.regional));

    let slot_city = |i: usize| rank[i] < cfg.slot_cities;
    let main_airport = |i: usize| format!("{}-1", city_id(i));
    let second_airport = |i: usize| format!("{}-2", city_id(i));

    let mut airlines = Vec::new();
    let mut hubs: BTreeMap<usize, String> = BTreeMap::new();
    let mut reach = Vec::new();
    let all: Vec<usize> = (0..n).collect();
    for (g, &kind) in kinds.iter().enumerate() {
        let id = airline_id(g);
        let home = match kind {
            CarrierType::FullService => country_rank[g % cfg.n_countries],
            _ => *country_rank.choose(&mut r).unwrap_or(&0),
        };
        let home_cities: Vec<usize> = all.iter().copied().filter(|&i| country[i] == home).collect();
        let mut cities: BTreeSet<usize> = BTreeSet::new();
        let mut slots: BTreeSet<String> = BTreeSet::new();
        match kind {
            CarrierType::FullService => {
                cities.extend(&home_cities);
                let foreign: Vec<usize> = by_pop.iter().copied().filter(|&i| country[i] != home).collect();
                cities.extend(foreign.iter().take(cfg.full_service_foreign));
                for &i in &cities {
                    if slot_city(i) && (country[i] == home || r.random_bool(0.5)) {
                        slots.insert(main_airport(i));
                    }
                }
                if let Some(h) = biggest_city(home) {
                    hubs.entry(h).or_insert_with(|| id.clone());
                    if slot_city(h) {
                        slots.insert(main_airport(h));
                    }
                }
            }
            CarrierType::LowCost => {
                if let Ok(base) = home_cities.choose_weighted(&mut r, |&i| pop[i]) {
                    cities.insert(*base);
                }
                let others: Vec<usize> = all.iter().copied().filter(|i| !cities.contains(i)).collect();
                let picked: Vec<usize> = others
                    .sample_weighted(&mut r, cfg.low_cost_cities.saturating_sub(1), |&i| pop[i])
                    .map_err(|e| SkyError::domain(e.to_string()))?
                    .copied()
                    .collect();
                cities.extend(picked);
            }
            CarrierType::Regional => {
                let base = biggest_city(home).unwrap_or(0);
                let mut near: Vec<usize> = all.clone();
                near.sort_by(|&a, &b| {
                    let da = (xy[a].0 - xy[base].0).powi(2) + (xy[a].1 - xy[base].1).powi(2);
                    let db = (xy[b].0 - xy[base].0).powi(2) + (xy[b].1 - xy[base].1).powi(2);
                    da.total_cmp(&db).then(a.cmp(&b))
                });
                cities.extend(near.into_iter().take(cfg.regional_cities));
            }
        }
        airlines.push(Airline {
            id: id.clone(),
            code: format!("{}{}", kind.code().chars().next().unwrap_or('X'), g),
            carrier_type: kind,
            home_country: countries[home].clone(),
        });
        reach.push((cities.into_iter().map(city_id).collect(), slots));
    }

    let mut airports = Vec::new();
    for i in 0..n {
        airports.push(RawAirport {
            id: main_airport(i),
            city_id: city_id(i),
            slot_controlled: slot_city(i),
            major: rank[i] < cfg.major_cities,
            hub_of: hubs.get(&i).cloned(),
        });
        if slot_city(i) {
            airports.push(RawAirport {
                id: second_airport(i),
                city_id: city_id(i),
                slot_controlled: false,
                major: false,
                hub_of: None,
            });
        }
    }

    Ok(Geography {
        parts: DatasetParts {
            cities,
            airports,
            airlines,
            distances,
            products: Vec::new(),
        },
        reach,
    })
}

fn index(ds: &Dataset, terms: &IndexTerms, airlines: &[Airline]) -> Result<LinearIndex> {
    let base = airlines.first().map(|a| terms.carrier(a.carrier_type)).unwrap_or(0.0);
    let mut columns = vec![Column::Constant, Column::LogFreq, Column::Distance, Column::DistanceSq];
    let mut coef = vec![terms.constant + base, terms.log_freq, terms.distance, terms.distance_sq];
    for (g, a) in airlines.iter().enumerate().skip(1) {
        columns.push(Column::Airline(AirlineIdx(g as u32)));
        coef.push(terms.carrier(a.carrier_type) - base);
    }
    LinearIndex::new(Design::from_columns(ds, columns), coef)
}

/// True demand and cost model on the generator's geography.
pub fn true_model(ds: &Dataset, cfg: &SyntheticConfig) -> Result<Model> {
    Ok(Model {
        demand: DemandParams {
            alpha: cfg.alpha,
            lambda: cfg.lambda,
            index: index(ds, &cfg.demand, &ds.airlines)?,
        },
        cost: CostParams {
            index: index(ds, &cfg.cost, &ds.airlines)?,
        },
    })
}

struct Entry<'e, 'a> {
    ev: &'e Evaluator<'a>,
    grid: &'e FrequencyGrid,
    fc: FixedCostParams,
    q: Quarter,
    state: BTreeMap<(AirlineIdx, RouteIdx), f64>,
    /// Candidate (airline, route) pairs per market.
    candidates: BTreeMap<MarketIdx, Vec<(AirlineIdx, RouteIdx)>>,
}

impl Entry<'_, '_> {
    fn slots(&self, m: MarketIdx) -> Vec<Slot> {
        let ds = self.ev.dataset();
        self.state
            .iter()
            .filter(|(&(_, r), _)| ds.market_of(r) == m)
            .map(|(&(airline, route), &freq)| Slot { airline, route, freq })
            .collect()
    }

    fn profit(&self, m: MarketIdx, slots: &[Slot], g: AirlineIdx) -> Result<f64> {
        if slots.is_empty() {
            return Ok(0.0);
        }
        Ok(self.ev.market(self.q, m, slots)?.airline_profit(g))
    }

    /// Net profit of airline `g` in `m` when its product there is replaced
    /// by `choice` (or removed).
    fn value(&self, m: MarketIdx, g: AirlineIdx, choice: Option<(RouteIdx, f64)>) -> Result<f64> {
        let mut slots: Vec<Slot> = self.slots(m).into_iter().filter(|s| s.airline != g).collect();
        let mut fixed = 0.0;
        if let Some((route, freq)) = choice {
            slots.push(Slot { airline: g, route, freq });
            fixed = self.fc.cost_usd(self.ev.dataset(), route, freq);
        }
        Ok(self.profit(m, &slots, g)? - fixed)
    }

    /// Most profitable entry into `m` by an airline not yet there.
    fn best_entry(&self, m: MarketIdx) -> Result<Option<(f64, AirlineIdx, RouteIdx, f64)>> {
        let ds = self.ev.dataset();
        let present: BTreeSet<AirlineIdx> = self.slots(m).iter().map(|s| s.airline).collect();
        let support = self.grid.frequency_support(ds, m)?;
        let mut best: Option<(f64, AirlineIdx, RouteIdx, f64)> = None;
        for &(g, r) in self.candidates.get(&m).map(Vec::as_slice).unwrap_or(&[]) {
            if present.contains(&g) {
                continue;
            }
            let base = self.value(m, g, None)?;
            for &f in support {
                let gain = self.value(m, g, Some((r, f)))? - base;
                if gain > ENTRY_MARGIN && best.is_none_or(|b| gain > b.0) {
                    best = Some((gain, g, r, f));
                }
            }
        }
        Ok(best)
    }

    fn greedy(&mut self) -> Result<usize> {
        let markets: Vec<MarketIdx> = self.candidates.keys().copied().collect();
        let mut best: BTreeMap<MarketIdx, Option<(f64, AirlineIdx, RouteIdx, f64)>> = BTreeMap::new();
        for &m in &markets {
            best.insert(m, self.best_entry(m)?);
        }
        let mut entered = 0;
        loop {
            let pick = best
                .iter()
                .filter_map(|(&m, b)| b.map(|b| (m, b)))
                .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(b.0.cmp(&a.0)));
            let Some((m, (_, g, r, f))) = pick else { break };
            self.state.insert((g, r), f);
            entered += 1;
            best.insert(m, self.best_entry(m)?);
        }
        Ok(entered)
    }

    /// Moves each product to its best frequency, exit included.
    fn adjust(&mut self) -> Result<usize> {
        let ds = self.ev.dataset();
        let mut changed = 0;
        let keys: Vec<(AirlineIdx, RouteIdx)> = self.state.keys().copied().collect();
        for (g, r) in keys {
            let Some(&f) = self.state.get(&(g, r)) else { continue };
            let m = ds.market_of(r);
            let current = self.value(m, g, Some((r, f)))?;
            let mut best = (self.value(m, g, None)?, None);
            for &x in self.grid.frequency_support(ds, m)? {
                let v = self.value(m, g, Some((r, x)))?;
                if v > best.0 {
                    best = (v, Some(x));
                }
            }
            if best.0 > current + ENTRY_MARGIN {
                changed += 1;
                match best.1 {
                    Some(x) => self.state.insert((g, r), x),
                    None => self.state.remove(&(g, r)),
                };
            }
        }
        Ok(changed)
    }
}

/// Greedy entry at the true fixed costs, alternated with frequency
/// re-optimisation until neither changes the network.
fn entry_network(
    cfg: &SyntheticConfig,
    skeleton: &Dataset,
    model: &Model,
    reach: &[(BTreeSet<String>, BTreeSet<String>)],
) -> Result<BTreeMap<(AirlineIdx, RouteIdx), f64>> {
    let sampler = ShockSampler::new(
        rng::mix(cfg.seed, "datagen-entry-draws", &[]),
        cfg.entry_draws,
        DrawSource::Parametric {
            xi_sd: cfg.xi_sd,
            omega_sd: cfg.omega_sd,
        },
    );
    let ev = Evaluator::new(skeleton, model, &sampler, EvalSettings::plain(skeleton))?;
    let grid = FrequencyGrid::static_table();

    let mut candidates: BTreeMap<MarketIdx, Vec<(AirlineIdx, RouteIdx)>> = BTreeMap::new();
    for (g, (cities, slots)) in reach.iter().enumerate() {
        let g = AirlineIdx(g as u32);
        let profile = AirlineProfile {
            airline: g,
            served_cities: cities
                .iter()
                .filter_map(|c| skeleton.cities.iter().position(|x| &x.id == c))
                .map(|i| CityIdx(i as u32))
                .collect(),
            slot_presence: skeleton
                .airports
                .iter()
                .enumerate()
                .filter(|(_, a)| slots.contains(&a.id))
                .map(|(i, _)| AirportIdx(i as u32))
                .collect(),
            total_frequency_cap: f64::INFINITY,
        };
        // One route per market: the slot-controlled main airports where
        // allowed, else the lowest-indexed route.
        let mut by_market: BTreeMap<MarketIdx, RouteIdx> = BTreeMap::new();
        for r in consideration_set(skeleton, &profile) {
            let m = skeleton.market_of(r);
            let better = match by_market.get(&m) {
                None => true,
                Some(&cur) => skeleton.route(r).slot_airports > skeleton.route(cur).slot_airports,
            };
            if better {
                by_market.insert(m, r);
            }
        }
        for (m, r) in by_market {
            candidates.entry(m).or_default().push((g, r));
        }
    }

    let mut entry = Entry {
        ev: &ev,
        grid: &grid,
        fc: cfg.fixed_cost_params(),
        q: Quarter::new(1)?,
        state: BTreeMap::new(),
        candidates,
    };
    for _ in 0..MAX_ROUNDS {
        let entered = entry.greedy()?;
        let adjusted = entry.adjust()?;
        if entered == 0 && adjusted == 0 {
            break;
        }
    }
    if entry.state.is_empty() {
        return Err(SkyError::Calibration {
            diagnostics: vec!["no route is profitable at the true fixed costs".into()],
        });
    }
    Ok(entry.state)
}

/// Builds a dataset whose networks come from greedy profitable entry at the
/// true fixed costs and whose prices solve the Bertrand game at the truth.
pub fn generate(cfg: &SyntheticConfig) -> Result<Synthetic> {
    cfg.validate()?;
    // Served markets are longer and larger than the average pair, so the
    // geography is rescaled until the operated network hits the distance
    // and size means.
    let mut scale = (1.0, 1.0);
    let mut built = None;
    for pass in 0..CALIBRATION_PASSES {
        let geo = geography(cfg, scale)?;
        let skeleton = Dataset::build(geo.parts.clone())?;
        let model = true_model(&skeleton, cfg)?;
        let network = entry_network(cfg, &skeleton, &model, &geo.reach)?;
        let dist: Vec<f64> = network.keys().map(|&(_, r)| skeleton.route(r).distance_km).collect();
        let size: Vec<f64> = network
            .keys()
            .map(|&(_, r)| skeleton.market(skeleton.market_of(r)).size)
            .collect();
        let ratio = (cfg.targets.distance_mean / mean(&dist), cfg.targets.size_mean / mean(&size));
        built = Some((skeleton, model, network));
        let close = (ratio.0 - 1.0).abs() < CALIBRATION_SLACK && (ratio.1 - 1.0).abs() < CALIBRATION_SLACK;
        if close || pass + 1 == CALIBRATION_PASSES {
            break;
        }
        scale = (scale.0 * ratio.0, scale.1 * ratio.1);
    }
    let Some((skeleton, model, network)) = built else {
        return Err(SkyError::domain("no calibration pass ran"));
    };

    let (parts, xi, omega) = price_network(cfg, &skeleton, &model, &network)?;
    let dataset = Dataset::build(parts)?;
    let moments = moment_checks(&dataset, &cfg.targets);
    let bad: Vec<String> = moments
        .iter()
        .filter(|c| !(c.relative_error() <= cfg.tolerance))
        .map(|c| {
            format!(
                "{}: target {:.4}, generated {:.4} ({:+.1}%)",
                c.name,
                c.target,
                c.actual,
                100.0 * (c.actual - c.target) / c.target
            )
        })
        .collect();
    if !bad.is_empty() {
        return Err(SkyError::Calibration { diagnostics: bad });
    }
    // Products are re-sorted by the dataset build; align the shocks.
    let order: BTreeMap<&str, usize> = parts_order(&dataset);
    let mut xi_sorted = vec![0.0; xi.len()];
    let mut omega_sorted = vec![0.0; omega.len()];
    for (id, (x, w)) in xi.iter().zip(&omega).map(|(x, w)| (x.0.as_str(), (x.1, w.1))) {
        let i = order[id];
        xi_sorted[i] = x;
        omega_sorted[i] = w;
    }
    Ok(Synthetic {
        dataset,
        truth: Truth {
            model,
            fixed_cost: cfg.fixed_cost_params(),
            xi_sd: cfg.xi_sd,
            omega_sd: cfg.omega_sd,
            xi: xi_sorted,
            omega: omega_sorted,
        },
        moments,
    })
}

fn parts_order(ds: &Dataset) -> BTreeMap<&str, usize> {
    ds.products.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect()
}

type Shocks = Vec<(String, f64)>;

/// Draws quarterly shocks for `network` and solves prices at the truth.
fn price_network(
    cfg: &SyntheticConfig,
    ds: &Dataset,
    model: &Model,
    network: &BTreeMap<(AirlineIdx, RouteIdx), f64>,
) -> Result<(DatasetParts, Shocks, Shocks)> {
    let mut parts = geo_parts(ds);
    let mut xi_out = Vec::new();
    let mut omega_out = Vec::new();
    let opts = SolverOptions {
        tolerance: PRICE_TOLERANCE,
        ..SolverOptions::new(model.demand.alpha, model.demand.lambda)
    };
    let mut by_market: BTreeMap<MarketIdx, Vec<(AirlineIdx, RouteIdx, f64)>> = BTreeMap::new();
    for (&(g, r), &f) in network {
        by_market.entry(ds.market_of(r)).or_default().push((g, r, f));
    }
    for qn in 1..=cfg.quarters {
        let q = Quarter::new(qn)?;
        for (&m, prods) in &by_market {
            let mut utility = Vec::new();
            let mut mc = Vec::new();
            let mut freq = Vec::new();
            let mut owners = Vec::new();
            let mut shocks = Vec::new();
            for &(g, r, f) in prods {
                let obs = Obs {
                    airline: g,
                    route: r,
                    quarter: q,
                    freq: f,
                };
                let keys = [qn as u64, g.0 as u64, r.0 as u64];
                let xi = cfg.xi_sd * standard_normal_quantile(rng::uniform(cfg.seed, "datagen-xi", &keys));
                let omega = shifted_lognormal(
                    standard_normal_quantile(rng::uniform(cfg.seed, "datagen-omega", &keys)),
                    cfg.omega_sd,
                );
                utility.push(model.demand.index.eval(ds, &obs) + xi);
                mc.push(model.cost.index.eval(ds, &obs) + omega);
                freq.push(f);
                owners.push(g);
                shocks.push((xi, omega));
            }
            let ownership = OwnershipMatrix::from_owners(&owners);
            let size = ds.market(m).size;
            let eq = solve_prices(
                &MarketInputs {
                    utility: &utility,
                    mc: &mc,
                    freq: &freq,
                    ownership: &ownership,
                    market_size: size,
                },
                &opts,
                None,
            );
            if !eq.converged {
                return Err(SkyError::NonConvergence {
                    market: ds.market_label(m),
                    iterations: eq.iterations,
                    residual: eq.foc_residual,
                });
            }
            for (j, &(g, r, f)) in prods.iter().enumerate() {
                let route = ds.route(r);
                let (a, b) = canonical_pair(&ds.airports[route.a.idx()].id, &ds.airports[route.b.idx()].id);
                let id = format!("{}-{}-{}-Q{}", ds.airlines[g.idx()].id, a, b, qn);
                parts.products.push(RawProduct {
                    id: id.clone(),
                    airline: ds.airlines[g.idx()].id.clone(),
                    airport_a: a.to_string(),
                    airport_b: b.to_string(),
                    quarter: qn,
                    fare_usd: eq.prices[j],
                    freq_per_day: f,
                    passengers: eq.shares[j] * size,
                    distance_km: route.distance_km,
                });
                xi_out.push((id.clone(), shocks[j].0));
                omega_out.push((id, shocks[j].1));
            }
        }
    }
    Ok((parts, xi_out, omega_out))
}

fn geo_parts(ds: &Dataset) -> DatasetParts {
    let mut parts = ds.to_parts();
    parts.products.clear();
    parts
}

/// Largest gap, in USD, between true marginal costs (index plus omega) and
/// those implied by observed prices and shares through the pricing
/// first-order conditions. Also checks that the true utilities reproduce the
/// observed shares; the larger relative share error is returned second.
pub fn foc_residual(ds: &Dataset, truth: &Truth) -> Result<(f64, f64)> {
    let model = &truth.model;
    let mut worst_mc: f64 = 0.0;
    let mut worst_share: f64 = 0.0;
    for (q, m, idxs) in ds.market_quarters() {
        let size = ds.market(m).size;
        let mut deltas = Vec::new();
        let mut prices = Vec::new();
        let mut owners = Vec::new();
        let mut mc_true = Vec::new();
        for &i in idxs {
            let p = &ds.products[i];
            let obs = Obs {
                airline: p.airline,
                route: p.route,
                quarter: q,
                freq: p.freq,
            };
            deltas.push(model.demand.index.eval(ds, &obs) + truth.xi[i] - model.demand.alpha * p.fare);
            prices.push(p.fare);
            owners.push(p.airline);
            mc_true.push(model.cost.index.eval(ds, &obs) + truth.omega[i]);
        }
        let sh = market_shares(&deltas, model.demand.lambda)?;
        for (c, &i) in idxs.iter().enumerate() {
            let observed = ds.products[i].passengers / size;
            worst_share = worst_share.max((sh.inside[c] - observed).abs() / observed);
        }
        let mc = recover_marginal_costs(
            &prices,
            &sh.inside,
            &sh.within,
            &OwnershipMatrix::from_owners(&owners),
            model.demand.alpha,
            model.demand.lambda,
            &ds.market_label(m),
        )?;
        for (a, b) in mc.iter().zip(&mc_true) {
            worst_mc = worst_mc.max((a - b).abs());
        }
    }
    Ok((worst_mc, worst_share))
}
