//! Merger screening and merger-augmented counterfactuals.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counterfactual::{OutcomeStats, Scenario, SimOutcome, World};
use crate::demand::{diversion_ratio, Shares};
use crate::error::{Result, SkyError};
use crate::evaluator::{EvalSettings, Evaluator};
use crate::fixedcost::FixedCostParams;
use crate::linalg::{mean, quantile_sorted};
use crate::model::grid::FrequencyGrid;
use crate::model::network::{consideration_set, AirlineProfile, Networks};
use crate::model::{AirlineIdx, CityIdx, Dataset, MarketIdx, Quarter, RouteIdx};
use crate::pricing::OwnershipMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergerSpec {
    pub partner_a: AirlineIdx,
    pub partner_b: AirlineIdx,
}

impl MergerSpec {
    pub fn new(ds: &Dataset, a: &str, b: &str) -> Result<Self> {
        let partner_a = ds.airline_by_id(a)?;
        let partner_b = ds.airline_by_id(b)?;
        if partner_a == partner_b {
            return Err(SkyError::domain(format!("merger partners must differ, got {a} twice")));
        }
        Ok(MergerSpec { partner_a, partner_b })
    }

    pub fn involves(&self, g: AirlineIdx) -> bool {
        g == self.partner_a || g == self.partner_b
    }

    /// Parent entity per airline with partner B folded into partner A.
    pub fn entity_map(&self, base: &[u32]) -> Vec<u32> {
        let ea = base[self.partner_a.idx()];
        let eb = base[self.partner_b.idx()];
        base.iter().map(|&e| if e == eb { ea } else { e }).collect()
    }

    /// Evaluation settings with merged ownership.
    pub fn settings(&self, settings: &EvalSettings) -> EvalSettings {
        EvalSettings {
            entity: self.entity_map(&settings.entity),
            ..settings.clone()
        }
    }
}

/// Sets every cross-partner entry to common ownership.
pub fn merge_ownership(o: &OwnershipMatrix, owners: &[AirlineIdx], spec: &MergerSpec) -> OwnershipMatrix {
    let mut out = o.clone();
    for j in 0..owners.len() {
        for k in 0..owners.len() {
            if spec.involves(owners[j]) && spec.involves(owners[k]) {
                out.set(j, k, true);
            }
        }
    }
    out
}

/// Screening figures for one product against its partner's products.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PricingPressure {
    /// Summed diversion to the partner's products.
    pub diversion: f64,
    /// Share-weighted partner margin, USD.
    pub partner_margin: f64,
    pub guppi: f64,
    /// USD per passenger.
    pub upp: f64,
    /// Marginal-cost reduction that offsets the pressure, as a fraction.
    pub efficiency: f64,
}

/// Pricing pressure on product `j` from the products in `partner`.
pub fn pricing_pressure(
    shares: &Shares,
    prices: &[f64],
    mc: &[f64],
    lambda: f64,
    j: usize,
    partner: &[usize],
) -> Result<PricingPressure> {
    if partner.is_empty() {
        return Err(SkyError::domain("partner has no products in the market"));
    }
    let mut diversion = 0.0;
    let mut weight = 0.0;
    let mut margin = 0.0;
    for &k in partner {
        diversion += diversion_ratio(shares, j, k, lambda)?;
        weight += shares.inside[k];
        margin += shares.inside[k] * (prices[k] - mc[k]);
    }
    let partner_margin = if weight > 0.0 { margin / weight } else { 0.0 };
    let upp = diversion * partner_margin;
    Ok(PricingPressure {
        diversion,
        partner_margin,
        guppi: upp / prices[j],
        upp,
        efficiency: upp / mc[j],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuppiRow {
    pub market: MarketIdx,
    pub quarter: Quarter,
    /// Dataset product index.
    pub product: usize,
    pub airline: AirlineIdx,
    /// Distinct airlines in the market before the merger.
    pub firms: usize,
    pub pressure: PricingPressure,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GuppiSummary {
    pub products: usize,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
    pub mean_diversion: f64,
    pub mean_efficiency: f64,
}

impl GuppiSummary {
    pub fn of(rows: &[&GuppiRow]) -> Self {
        if rows.is_empty() {
            return GuppiSummary::default();
        }
        let mut g: Vec<f64> = rows.iter().map(|r| r.pressure.guppi).collect();
        g.sort_by(f64::total_cmp);
        let d: Vec<f64> = rows.iter().map(|r| r.pressure.diversion).collect();
        let e: Vec<f64> = rows.iter().map(|r| r.pressure.efficiency).collect();
        GuppiSummary {
            products: rows.len(),
            mean: mean(&g),
            median: quantile_sorted(&g, 0.5),
            p90: quantile_sorted(&g, 0.9),
            max: g[g.len() - 1],
            mean_diversion: mean(&d),
            mean_efficiency: mean(&e),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuppiReport {
    pub spec: MergerSpec,
    pub rows: Vec<GuppiRow>,
    pub overall: GuppiSummary,
    /// Keyed by pre-merger firm count, with 4 standing for four or more.
    pub by_firms: BTreeMap<usize, GuppiSummary>,
    /// Market-quarters with only one partner present.
    pub skipped: usize,
}

/// Screens every market-quarter where both partners operate, at observed
/// prices and shares with marginal costs `mc` (dataset product order).
pub fn guppi_report(ds: &Dataset, lambda: f64, mc: &[f64], spec: &MergerSpec) -> Result<GuppiReport> {
    if mc.len() != ds.products.len() {
        return Err(SkyError::domain("one marginal cost per product is required"));
    }
    let mqs: Vec<(Quarter, MarketIdx, &[usize])> = ds.market_quarters().collect();
    let per: Vec<(Vec<GuppiRow>, bool)> = mqs
        .par_iter()
        .map(|&(q, m, idxs)| {
            let owners: Vec<AirlineIdx> = idxs.iter().map(|&i| ds.products[i].airline).collect();
            let has_a = owners.contains(&spec.partner_a);
            let has_b = owners.contains(&spec.partner_b);
            if !(has_a && has_b) {
                return Ok((Vec::new(), has_a || has_b));
            }
            let (inside, within, outside) = ds.observed_shares(q, m);
            let shares = Shares {
                inside,
                within,
                outside,
                log_iv: f64::NAN,
            };
            let prices: Vec<f64> = idxs.iter().map(|&i| ds.products[i].fare).collect();
            let cost: Vec<f64> = idxs.iter().map(|&i| mc[i]).collect();
            let firms = owners.iter().collect::<BTreeSet<_>>().len();
            let mut rows = Vec::new();
            for (j, &g) in owners.iter().enumerate() {
                if !spec.involves(g) {
                    continue;
                }
                let other = if g == spec.partner_a { spec.partner_b } else { spec.partner_a };
                let partner: Vec<usize> = (0..owners.len()).filter(|&k| owners[k] == other).collect();
                rows.push(GuppiRow {
                    market: m,
                    quarter: q,
                    product: idxs[j],
                    airline: g,
                    firms,
                    pressure: pricing_pressure(&shares, &prices, &cost, lambda, j, &partner)?,
                });
            }
            Ok((rows, false))
        })
        .collect::<Result<_>>()?;
    let skipped = per.iter().filter(|(_, s)| *s).count();
    let rows: Vec<GuppiRow> = per.into_iter().flat_map(|(r, _)| r).collect();
    if skipped > 0 {
        log::info!("{skipped} market-quarters have only one merger partner and were skipped");
    }
    let all: Vec<&GuppiRow> = rows.iter().collect();
    let overall = GuppiSummary::of(&all);
    let mut groups: BTreeMap<usize, Vec<&GuppiRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry(r.firms.min(4)).or_default().push(r);
    }
    let by_firms = groups.into_iter().map(|(k, v)| (k, GuppiSummary::of(&v))).collect();
    Ok(GuppiReport {
        spec: *spec,
        rows,
        overall,
        by_firms,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartnerExpansion {
    pub airline: AirlineIdx,
    pub cities: usize,
    pub new_cities: usize,
    pub current_routes: usize,
    /// Routes in the consideration set not currently operated.
    pub feasible_pre: usize,
    pub feasible_post: usize,
    pub new_feasible: usize,
    /// Percentage growth of the feasible set.
    pub pct_increase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkExpansion {
    pub union_cities: usize,
    pub overlap_cities: usize,
    pub overlap_share: f64,
    pub partners: [PartnerExpansion; 2],
}

fn union_cities(ds: &Dataset, nets: &Networks, spec: &MergerSpec) -> Result<BTreeSet<CityIdx>> {
    let a = AirlineProfile::from_network(ds, &nets.of(spec.partner_a))?;
    let b = AirlineProfile::from_network(ds, &nets.of(spec.partner_b))?;
    Ok(a.served_cities.union(&b.served_cities).copied().collect())
}

/// Consideration set of `g` with its cities replaced by `cities`.
fn merged_consideration(ds: &Dataset, nets: &Networks, g: AirlineIdx, cities: &BTreeSet<CityIdx>) -> Result<Vec<RouteIdx>> {
    let profile = AirlineProfile::from_network(ds, &nets.of(g))?;
    Ok(consideration_set(ds, &profile.with_cities(cities.clone())))
}

/// City and feasible-route gains for each partner from pooling city sets.
pub fn network_expansion(ds: &Dataset, nets: &Networks, spec: &MergerSpec) -> Result<NetworkExpansion> {
    let union = union_cities(ds, nets, spec)?;
    let pa = AirlineProfile::from_network(ds, &nets.of(spec.partner_a))?;
    let pb = AirlineProfile::from_network(ds, &nets.of(spec.partner_b))?;
    let overlap = pa.served_cities.intersection(&pb.served_cities).count();
    let one = |p: &AirlineProfile| -> Result<PartnerExpansion> {
        let net = nets.of(p.airline);
        let pre: BTreeSet<RouteIdx> = consideration_set(ds, p)
            .into_iter()
            .filter(|r| !net.freq.contains_key(r))
            .collect();
        let post: BTreeSet<RouteIdx> = merged_consideration(ds, nets, p.airline, &union)?
            .into_iter()
            .filter(|r| !net.freq.contains_key(r))
            .collect();
        let new_feasible = post.difference(&pre).count();
        Ok(PartnerExpansion {
            airline: p.airline,
            cities: p.served_cities.len(),
            new_cities: union.len() - p.served_cities.len(),
            current_routes: net.freq.len(),
            feasible_pre: pre.len(),
            feasible_post: post.len(),
            new_feasible,
            pct_increase: if pre.is_empty() {
                0.0
            } else {
                100.0 * new_feasible as f64 / pre.len() as f64
            },
        })
    };
    Ok(NetworkExpansion {
        union_cities: union.len(),
        overlap_cities: overlap,
        overlap_share: if union.is_empty() {
            0.0
        } else {
            overlap as f64 / union.len() as f64
        },
        partners: [one(&pa)?, one(&pb)?],
    })
}

/// Counterfactual world for the merged carriers: the evaluator must carry
/// merged ownership (see [`MergerSpec::settings`]); partners consider routes
/// between any cities in the union of their city sets, slot rules per partner.
pub fn merged_world<'w, 'a>(
    ev: &'w Evaluator<'a>,
    grid: &'w FrequencyGrid,
    scenario: Scenario,
    theta: FixedCostParams,
    baseline: &Networks,
    spec: &MergerSpec,
) -> Result<World<'w, 'a>> {
    let ds = ev.dataset();
    if ev.entity(spec.partner_a) != ev.entity(spec.partner_b) {
        return Err(SkyError::domain("evaluator does not merge the partners' ownership"));
    }
    let mut world = World::new(ev, grid, scenario, theta, baseline)?;
    let union = union_cities(ds, baseline, spec)?;
    for g in [spec.partner_a, spec.partner_b] {
        world.considered.insert(g, merged_consideration(ds, baseline, g, &union)?);
    }
    Ok(world)
}

/// Aggregates compared between the carbon-only and merger runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    pub passengers: f64,
    pub consumer_surplus: f64,
    pub net_profit: f64,
    pub partner_net_profit: f64,
    pub partner_routes: f64,
    pub distance_flown: f64,
    pub co2_kg: f64,
}

impl RunTotals {
    pub fn of(ds: &Dataset, stats: &OutcomeStats, spec: &MergerSpec) -> Self {
        let partner = stats.products.iter().filter(|p| spec.involves(p.airline));
        RunTotals {
            passengers: stats.total_passengers(),
            consumer_surplus: stats.consumer_surplus(),
            net_profit: stats.net_profit(),
            partner_net_profit: partner.clone().map(|p| p.net_profit()).sum(),
            partner_routes: partner.filter(|p| p.freq > 0.0).count() as f64,
            distance_flown: stats.distance_flown(ds),
            co2_kg: stats.co2_kg(),
        }
    }

    fn minus(&self, o: &RunTotals) -> RunTotals {
        RunTotals {
            passengers: self.passengers - o.passengers,
            consumer_surplus: self.consumer_surplus - o.consumer_surplus,
            net_profit: self.net_profit - o.net_profit,
            partner_net_profit: self.partner_net_profit - o.partner_net_profit,
            partner_routes: self.partner_routes - o.partner_routes,
            distance_flown: self.distance_flown - o.distance_flown,
            co2_kg: self.co2_kg - o.co2_kg,
        }
    }
}

/// Merger run against the carbon-only run with identical seed and ordering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergerDelta {
    pub seed: u64,
    pub ordering: crate::counterfactual::EvalOrder,
    pub both_converged: bool,
    pub carbon_only: RunTotals,
    pub merged: RunTotals,
    pub delta: RunTotals,
}

pub fn merger_delta(ds: &Dataset, spec: &MergerSpec, carbon_only: &SimOutcome, merged: &SimOutcome) -> Result<MergerDelta> {
    if carbon_only.seed != merged.seed || carbon_only.ordering != merged.ordering || carbon_only.scenario != merged.scenario {
        return Err(SkyError::domain("merger and carbon-only runs differ in scenario, seed or ordering"));
    }
    let c = RunTotals::of(ds, &carbon_only.stats, spec);
    let m = RunTotals::of(ds, &merged.stats, spec);
    Ok(MergerDelta {
        seed: merged.seed,
        ordering: merged.ordering,
        both_converged: carbon_only.converged && merged.converged,
        carbon_only: c,
        merged: m,
        delta: m.minus(&c),
    })
}
