//! Welfare accounting, carrier breakdowns, country-pair aggregation and the
//! distance profile of demand elasticities.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::counterfactual::{carbon_accounting, OutcomeStats, ProductStats, Scenario, SimOutcome};
use crate::demand::{own_price_elasticity, DemandParams, Shares};
use crate::error::{Result, SkyError};
use crate::model::{CarrierType, Dataset, MarketIdx};
use crate::units::{is_short_haul, DAYS_PER_QUARTER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Short,
    MediumLong,
}

impl Segment {
    pub fn of_market(ds: &Dataset, m: MarketIdx) -> Self {
        if is_short_haul(ds.market(m).distance_km) {
            Segment::Short
        } else {
            Segment::MediumLong
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Segment::Short => "short",
            Segment::MediumLong => "medium_long",
        }
    }
}

/// Changes from the baseline to a scenario, USD unless noted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WelfareLedger {
    pub cs_baseline: f64,
    pub delta_cs: f64,
    pub profit_baseline: f64,
    /// Net of deterministic fixed costs and shocks.
    pub delta_profit: f64,
    pub carbon_revenue: f64,
    /// Social cost of carbon times avoided emissions.
    pub social_co2_value: f64,
    pub welfare_gain: f64,
    pub passengers_baseline: f64,
    pub passengers: f64,
    pub co2_baseline_kg: f64,
    pub co2_kg: f64,
}

impl WelfareLedger {
    /// Consumer-surplus change as a percentage of the baseline.
    pub fn cs_change_pct(&self) -> f64 {
        if self.cs_baseline == 0.0 {
            0.0
        } else {
            100.0 * self.delta_cs / self.cs_baseline
        }
    }

    fn build<P, M>(base: &OutcomeStats, run: &OutcomeStats, ds: &Dataset, scenario: &Scenario, scc: f64, keep_p: P, keep_m: M) -> Self
    where
        P: Fn(&ProductStats) -> bool,
        M: Fn(MarketIdx) -> bool,
    {
        let cs = |s: &OutcomeStats| -> f64 {
            s.markets
                .iter()
                .filter(|m| keep_m(m.market))
                .map(|m| m.consumer_surplus)
                .sum()
        };
        let products = |s: &'_ OutcomeStats| s.products.iter().filter(|p| keep_p(p)).cloned().collect::<Vec<_>>();
        let (pb, pr) = (products(base), products(run));
        let profit = |ps: &[ProductStats]| ps.iter().map(|p| p.net_profit()).sum::<f64>();
        let pax = |ps: &[ProductStats]| ps.iter().map(|p| p.passengers).sum::<f64>();
        let co2 = |ps: &[ProductStats]| ps.iter().map(|p| p.co2_kg()).sum::<f64>();
        let carbon = carbon_accounting(
            pr.iter().map(|p| (p.freq, ds.route(p.route).distance_km, p.passengers)),
            scenario,
        );
        let mut l = WelfareLedger {
            cs_baseline: cs(base),
            delta_cs: cs(run) - cs(base),
            profit_baseline: profit(&pb),
            delta_profit: profit(&pr) - profit(&pb),
            carbon_revenue: carbon.revenue_usd,
            social_co2_value: scc * (co2(&pb) - co2(&pr)),
            welfare_gain: 0.0,
            passengers_baseline: pax(&pb),
            passengers: pax(&pr),
            co2_baseline_kg: co2(&pb),
            co2_kg: co2(&pr),
        };
        l.welfare_gain = l.delta_profit + l.delta_cs + l.carbon_revenue + l.social_co2_value;
        l
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelfareReport {
    pub scenario: Scenario,
    pub social_cost_per_kg: f64,
    pub total: WelfareLedger,
    pub by_segment: BTreeMap<Segment, WelfareLedger>,
    /// Consumer surplus is not attributed to carriers; those rows carry zero.
    pub by_carrier: BTreeMap<CarrierType, WelfareLedger>,
}

/// Welfare changes of `run` against `baseline` statistics.
pub fn welfare_ledger(ds: &Dataset, baseline: &OutcomeStats, run: &OutcomeStats, scenario: &Scenario, scc: f64) -> WelfareReport {
    let total = WelfareLedger::build(baseline, run, ds, scenario, scc, |_| true, |_| true);
    let by_segment = [Segment::Short, Segment::MediumLong]
        .into_iter()
        .map(|s| {
            let l = WelfareLedger::build(
                baseline,
                run,
                ds,
                scenario,
                scc,
                |p| Segment::of_market(ds, p.market) == s,
                |m| Segment::of_market(ds, m) == s,
            );
            (s, l)
        })
        .collect();
    let by_carrier = CarrierType::ALL
        .into_iter()
        .map(|t| {
            let l = WelfareLedger::build(
                baseline,
                run,
                ds,
                scenario,
                scc,
                |p| ds.airlines[p.airline.idx()].carrier_type == t,
                |_| false,
            );
            (t, l)
        })
        .collect();
    WelfareReport {
        scenario: *scenario,
        social_cost_per_kg: scc,
        total,
        by_segment,
        by_carrier,
    }
}

/// Ledger for a simulation run against the base-scenario run with the same
/// seed and ordering.
pub fn welfare_report(ds: &Dataset, baseline: &SimOutcome, run: &SimOutcome, scc: f64) -> Result<WelfareReport> {
    if baseline.seed != run.seed || baseline.ordering != run.ordering {
        return Err(SkyError::RunKeyMismatch(format!(
            "baseline (seed {}, {}) vs run (seed {}, {})",
            baseline.seed, baseline.ordering, run.seed, run.ordering
        )));
    }
    let scenario = crate::counterfactual::scenario_params(run.scenario);
    Ok(welfare_ledger(ds, &baseline.stats, &run.stats, &scenario, scc))
}

/// Operating metrics for one group of carriers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CarrierMetrics {
    /// Carrier-type code, or `all`.
    pub group: String,
    pub airlines: usize,
    pub routes: usize,
    /// Net of fixed costs and shocks, USD.
    pub profit: f64,
    pub passengers: f64,
    /// Passenger-weighted mean fare, USD.
    pub mean_fare: f64,
    /// Round trips per quarter.
    pub total_flights: f64,
    /// One-way km per quarter.
    pub distance_flown: f64,
    /// Fixed cost plus shock per passenger.
    pub fc_per_pax: f64,
    /// Marginal cost plus fixed cost per passenger.
    pub cost_per_pax: f64,
}

fn metrics(ds: &Dataset, group: String, ps: &[&ProductStats]) -> CarrierMetrics {
    let pax: f64 = ps.iter().map(|p| p.passengers).sum();
    let fc: f64 = ps.iter().map(|p| p.fixed_cost + p.kappa).sum();
    let vc: f64 = ps.iter().map(|p| p.variable_cost).sum();
    let rev: f64 = ps.iter().map(|p| p.revenue).sum();
    let per = |x: f64| if pax > 0.0 { x / pax } else { 0.0 };
    CarrierMetrics {
        group,
        airlines: ps.iter().map(|p| p.airline).collect::<BTreeSet<_>>().len(),
        routes: ps.len(),
        profit: ps.iter().map(|p| p.net_profit()).sum(),
        passengers: pax,
        mean_fare: per(rev),
        total_flights: ps.iter().map(|p| p.freq * DAYS_PER_QUARTER).sum(),
        distance_flown: ps
            .iter()
            .map(|p| crate::units::legs_per_quarter(p.freq) * ds.route(p.route).distance_km)
            .sum(),
        fc_per_pax: per(fc),
        cost_per_pax: per(vc + fc),
    }
}

/// Metrics per carrier type present in `stats`, then the all-carrier row.
pub fn airline_breakdown(ds: &Dataset, stats: &OutcomeStats) -> Vec<CarrierMetrics> {
    let active: Vec<&ProductStats> = stats.products.iter().filter(|p| p.freq > 0.0).collect();
    let mut out = Vec::new();
    for t in CarrierType::ALL {
        let ps: Vec<&ProductStats> = active
            .iter()
            .copied()
            .filter(|p| ds.airlines[p.airline.idx()].carrier_type == t)
            .collect();
        if !ps.is_empty() {
            out.push(metrics(ds, t.code().to_string(), &ps));
        }
    }
    out.push(metrics(ds, "all".to_string(), &active));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMetric {
    Welfare,
    Cs,
    Profit,
}

impl PairMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            PairMetric::Welfare => "welfare",
            PairMetric::Cs => "cs",
            PairMetric::Profit => "profit",
        }
    }
}

impl std::str::FromStr for PairMetric {
    type Err = SkyError;

    fn from_str(s: &str) -> Result<Self> {
        [PairMetric::Welfare, PairMetric::Cs, PairMetric::Profit]
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| SkyError::unknown("metric", s))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMatrixSpec {
    pub metric: PairMetric,
    pub top_k: usize,
    pub social_cost_per_kg: f64,
}

impl Default for PairMatrixSpec {
    fn default() -> Self {
        PairMatrixSpec {
            metric: PairMetric::Welfare,
            top_k: 15,
            social_cost_per_kg: crate::units::SOCIAL_COST_USD_PER_KG,
        }
    }
}

/// Countries ranked by baseline welfare. Cell `(i, j)` with `i >= j` holds
/// the carbon-only change for the pair; `i < j` holds the change with the
/// merger, or `None` when no merger run was supplied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountryPairMatrix {
    pub metric: PairMetric,
    pub countries: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
    pub merger_missing: bool,
}

type Pair = (String, String);

fn country_pair(ds: &Dataset, m: MarketIdx) -> Pair {
    let mk = ds.market(m);
    let a = ds.cities[mk.a.idx()].country.clone();
    let b = ds.cities[mk.b.idx()].country.clone();
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Per-pair metric change of `run` against `base`.
fn pair_deltas(ds: &Dataset, base: &OutcomeStats, run: &OutcomeStats, scenario: &Scenario, spec: &PairMatrixSpec) -> BTreeMap<Pair, f64> {
    let mut out: BTreeMap<Pair, f64> = BTreeMap::new();
    let pairs: BTreeSet<Pair> = (0..ds.markets.len()).map(|m| country_pair(ds, MarketIdx(m as u32))).collect();
    for pair in pairs {
        let l = WelfareLedger::build(
            base,
            run,
            ds,
            scenario,
            spec.social_cost_per_kg,
            |p| country_pair(ds, p.market) == pair,
            |m| country_pair(ds, m) == pair,
        );
        let v = match spec.metric {
            PairMetric::Welfare => l.welfare_gain,
            PairMetric::Cs => l.delta_cs,
            PairMetric::Profit => l.delta_profit,
        };
        out.insert(pair, v);
    }
    out
}

pub fn country_pair_matrix(
    ds: &Dataset,
    baseline: &OutcomeStats,
    carbon: &OutcomeStats,
    merger: Option<&OutcomeStats>,
    scenario: &Scenario,
    spec: &PairMatrixSpec,
) -> CountryPairMatrix {
    // Baseline welfare per country: CS plus profit of every pair it touches.
    let mut level: BTreeMap<String, f64> = BTreeMap::new();
    for c in &ds.cities {
        level.entry(c.country.clone()).or_insert(0.0);
    }
    let mut add = |pair: Pair, v: f64| {
        *level.entry(pair.0.clone()).or_insert(0.0) += v;
        if pair.1 != pair.0 {
            *level.entry(pair.1).or_insert(0.0) += v;
        }
    };
    for m in &baseline.markets {
        add(country_pair(ds, m.market), m.consumer_surplus);
    }
    for p in &baseline.products {
        add(country_pair(ds, p.market), p.net_profit());
    }
    let mut ranked: Vec<(String, f64)> = level.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let countries: Vec<String> = ranked.into_iter().take(spec.top_k).map(|(c, _)| c).collect();

    let lower = pair_deltas(ds, baseline, carbon, scenario, spec);
    let upper = merger.map(|m| pair_deltas(ds, baseline, m, scenario, spec));
    let key = |a: &str, b: &str| -> Pair {
        if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        }
    };
    let k = countries.len();
    let mut cells = vec![vec![None; k]; k];
    for i in 0..k {
        for j in 0..k {
            let pair = key(&countries[i], &countries[j]);
            cells[i][j] = if i >= j {
                Some(lower.get(&pair).copied().unwrap_or(0.0))
            } else {
                upper.as_ref().map(|u| u.get(&pair).copied().unwrap_or(0.0))
            };
        }
    }
    if merger.is_none() {
        log::warn!("no merger run supplied; upper triangle left empty");
    }
    CountryPairMatrix {
        metric: spec.metric,
        countries,
        cells,
        merger_missing: merger.is_none(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Binscatter {
    /// Mean distance per bin, km.
    pub centers: Vec<f64>,
    pub means: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-count bins of `(x, y)` sorted by `x`; bin sizes differ by at most one.
pub fn equal_count_bins(points: &[(f64, f64)], bins: usize) -> Binscatter {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n = pts.len();
    let bins = bins.min(n);
    let mut out = Binscatter::default();
    if bins == 0 {
        return out;
    }
    let (q, r) = (n / bins, n % bins);
    let mut start = 0;
    for b in 0..bins {
        let len = q + usize::from(b < r);
        let chunk = &pts[start..start + len];
        start += len;
        out.centers.push(chunk.iter().map(|p| p.0).sum::<f64>() / len as f64);
        out.means.push(chunk.iter().map(|p| p.1).sum::<f64>() / len as f64);
        out.counts.push(len);
    }
    out
}

/// Own-price elasticities at observed prices and shares, binned by market distance.
pub fn elasticity_binscatter(ds: &Dataset, demand: &DemandParams, bins: usize) -> Result<Binscatter> {
    let mut points = Vec::with_capacity(ds.products.len());
    for (q, m, idxs) in ds.market_quarters() {
        let (inside, within, outside) = ds.observed_shares(q, m);
        let shares = Shares {
            inside,
            within,
            outside,
            log_iv: f64::NAN,
        };
        let prices: Vec<f64> = idxs.iter().map(|&i| ds.products[i].fare).collect();
        let e = own_price_elasticity(&shares, &prices, demand.alpha, demand.lambda)?;
        let km = ds.market(m).distance_km;
        points.extend(e.into_iter().map(|v| (km, v)));
    }
    if points.len() < bins {
        log::warn!("{} products for {bins} bins; using one bin per product", points.len());
    }
    Ok(equal_count_bins(&points, bins))
}
