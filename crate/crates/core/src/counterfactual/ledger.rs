//! Fixed-cost shocks that make the baseline network a best response.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::deviations::{feasible_deviations, Candidate, MoveKind};
use super::World;
use crate::error::Result;
use crate::fixedcost::FixedCostParams;
use crate::linalg::std_dev;
use crate::model::network::Networks;
use crate::model::{AirlineIdx, Quarter, RouteIdx};
use crate::rng;
use crate::shocks::standard_normal_quantile;

/// Shock variance as a share of the variance of deterministic fixed costs.
pub const SHOCK_VARIANCE_SHARE: f64 = 0.05;
/// Truncation intervals with less normal mass than this fall back to the bound.
const MIN_MASS: f64 = 1e-250;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShockEntry {
    pub airline: AirlineIdx,
    pub route: RouteIdx,
    pub freq: f64,
    /// USD per quarter.
    pub kappa: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub fallback: bool,
}

/// Drawn shocks for every (airline, route, frequency) level the baseline
/// constrains. Levels not listed get untruncated draws addressed by the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShockLedger {
    pub seed: u64,
    pub quarter: Quarter,
    pub theta: FixedCostParams,
    /// Shock standard deviation per airline (USD), indexed by airline.
    pub sd: Vec<f64>,
    /// Sorted by (airline, route, frequency).
    pub entries: Vec<ShockEntry>,
    pub fallbacks: usize,
}

fn key(e: &ShockEntry) -> (AirlineIdx, RouteIdx, u64) {
    (e.airline, e.route, e.freq.to_bits())
}

impl ShockLedger {
    /// Ledger with no truncated entries: every shock is a free draw.
    pub fn unconstrained(seed: u64, quarter: Quarter, theta: FixedCostParams, sd: Vec<f64>) -> Self {
        ShockLedger {
            seed,
            quarter,
            theta,
            sd,
            entries: Vec::new(),
            fallbacks: 0,
        }
    }

    fn find(&self, g: AirlineIdx, r: RouteIdx, f: f64) -> Option<&ShockEntry> {
        let k = (g, r, f.to_bits());
        self.entries.binary_search_by(|e| key(e).cmp(&k)).ok().map(|i| &self.entries[i])
    }

    pub fn sd_of(&self, g: AirlineIdx) -> f64 {
        self.sd.get(g.idx()).copied().unwrap_or(0.0)
    }

    /// Shock for operating `r` at `f`, USD.
    pub fn kappa(&self, g: AirlineIdx, r: RouteIdx, f: f64) -> f64 {
        if let Some(e) = self.find(g, r, f) {
            return e.kappa;
        }
        let sd = self.sd_of(g);
        if sd == 0.0 {
            return 0.0;
        }
        let u = rng::uniform(self.seed, "kappa-free", &[g.0 as u64, r.0 as u64, f.to_bits()]);
        sd * standard_normal_quantile(u)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn sort(&mut self) {
        self.entries.sort_by_key(key);
    }
}

/// Draw from N(0, sd^2) restricted to [lower, upper] by inverse CDF from
/// the uniform `u`. Returns the value and whether the bound fallback was used.
pub fn truncated_normal(sd: f64, lower: Option<f64>, upper: Option<f64>, u: f64) -> (f64, bool) {
    let lo = lower.unwrap_or(f64::NEG_INFINITY);
    let hi = upper.unwrap_or(f64::INFINITY);
    if lo > hi {
        return (lo, true);
    }
    if !(sd > 0.0) {
        return (0.0f64.clamp(lo, hi), false);
    }
    let n = Normal::standard();
    let (a, b) = (lo / sd, hi / sd);
    if b <= 0.0 || lo == f64::NEG_INFINITY {
        // Work from the lower tail.
        let pa = if lo == f64::NEG_INFINITY { 0.0 } else { n.cdf(a) };
        let pb = n.cdf(b);
        if pb - pa < MIN_MASS {
            return (if hi.is_finite() { hi } else { lo }, true);
        }
        let x = sd * n.inverse_cdf(pa + u * (pb - pa));
        (x.clamp(lo, hi), false)
    } else {
        // Mirror so the interval sits in the lower tail, where the CDF is precise.
        let pa = if hi == f64::INFINITY { 0.0 } else { n.cdf(-b) };
        let pb = n.cdf(-a);
        if pb - pa < MIN_MASS {
            return (lo, true);
        }
        let x = -sd * n.inverse_cdf(pa + u * (pb - pa));
        (x.clamp(lo, hi), false)
    }
}

/// Per-airline shock sd: sqrt(share x variance of baseline deterministic
/// fixed costs).
pub fn shock_sd(world: &World<'_, '_>, baseline: &Networks) -> Vec<f64> {
    let ds = world.dataset();
    let mut sd = vec![0.0; ds.airlines.len()];
    for g in baseline.airlines() {
        let costs: Vec<f64> = baseline
            .of(g)
            .freq
            .iter()
            .map(|(&r, &f)| world.fixed_cost(r, f))
            .collect();
        let s = std_dev(&costs);
        sd[g.idx()] = (SHOCK_VARIANCE_SHARE * s * s).sqrt();
    }
    sd
}

/// Draws shocks so that no deviation available at the baseline (with an
/// empty frequency pool) is profitable: the operated level's shock is
/// truncated above by the exit bound, each lower level on the same route is
/// truncated below by its partial-exit bound, and each redeployment target
/// is truncated below by the largest bound among the moves that reach it.
pub fn rationalize_shocks(world: &World<'_, '_>, baseline: &Networks, seed: u64) -> Result<ShockLedger> {
    let sd = shock_sd(world, baseline);
    let products: Vec<(AirlineIdx, RouteIdx, f64)> = baseline.freq.iter().map(|(&(g, r), &f)| (g, r, f)).collect();
    let cands: Vec<Vec<Candidate>> = products
        .par_iter()
        .map(|&(g, r, _)| feasible_deviations(world, baseline, g, r, 0.0))
        .collect::<Result<_>>()?;

    let draw = |g: AirlineIdx, r: RouteIdx, f: f64, lower: Option<f64>, upper: Option<f64>| {
        let u = rng::uniform(seed, "kappa-bounded", &[g.0 as u64, r.0 as u64, f.to_bits()]);
        let (kappa, fallback) = truncated_normal(sd[g.idx()], lower, upper, u);
        ShockEntry {
            airline: g,
            route: r,
            freq: f,
            kappa,
            lower,
            upper,
            fallback,
        }
    };

    let mut entries: BTreeMap<(AirlineIdx, RouteIdx, u64), ShockEntry> = BTreeMap::new();
    let mut current = BTreeMap::new();
    for (&(g, r, f), cs) in products.iter().zip(&cands) {
        let exit = cs
            .iter()
            .find(|c| c.kind == MoveKind::FullExit)
            .map(|c| -c.det_value());
        let e = draw(g, r, f, None, exit);
        current.insert((g, r), e.kappa);
        entries.insert((g, r, f.to_bits()), e);
    }
    for (&(g, r, _), cs) in products.iter().zip(&cands) {
        let kc = current[&(g, r)];
        for c in cs.iter().filter(|c| c.kind == MoveKind::PartialExit) {
            let e = draw(g, r, c.remaining, Some(c.det_value() + kc), None);
            entries.insert((g, r, c.remaining.to_bits()), e);
        }
    }
    let mut target_bounds: BTreeMap<(AirlineIdx, RouteIdx, u64), (f64, f64)> = BTreeMap::new();
    for (&(g, r, _), cs) in products.iter().zip(&cands) {
        let kc = current[&(g, r)];
        for c in cs {
            let Some((alt, x)) = c.target else { continue };
            let mut bound = c.det_value() + kc;
            if c.remaining > 0.0 {
                bound -= entries[&(g, r, c.remaining.to_bits())].kappa;
            }
            let slot = target_bounds.entry((g, alt, x.to_bits())).or_insert((x, f64::NEG_INFINITY));
            slot.1 = slot.1.max(bound);
        }
    }
    for ((g, alt, bits), (x, bound)) in target_bounds {
        entries.insert((g, alt, bits), draw(g, alt, x, Some(bound), None));
    }

    let fallbacks = entries.values().filter(|e| e.fallback).count();
    if fallbacks > 0 {
        log::warn!("{fallbacks} of {} shock draws fell back to their truncation bound", entries.len());
    }
    let mut ledger = ShockLedger {
        seed,
        quarter: world.quarter,
        theta: world.fc,
        sd,
        entries: entries.into_values().collect(),
        fallbacks,
    };
    ledger.sort();
    Ok(ledger)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_sd_clamps_zero_into_bounds() {
        assert_eq!(truncated_normal(0.0, None, Some(-5.0), 0.3), (-5.0, false));
        assert_eq!(truncated_normal(0.0, Some(2.0), None, 0.3), (2.0, false));
        assert_eq!(truncated_normal(0.0, Some(-1.0), Some(1.0), 0.3), (0.0, false));
    }

    #[test]
    fn far_tail_falls_back_to_bound() {
        let (x, fb) = truncated_normal(1.0, None, Some(-60.0), 0.5);
        assert!(fb);
        assert_eq!(x, -60.0);
        let (x, fb) = truncated_normal(1.0, Some(60.0), None, 0.5);
        assert!(fb);
        assert_eq!(x, 60.0);
    }

    #[test]
    fn truncated_mean_matches_closed_form() {
        // E[X | X <= b] = -sd phi(b/sd) / Phi(b/sd).
        let (sd, b) = (2.0, 1.0);
        let n = 20_000;
        let m: f64 = (0..n)
            .map(|i| truncated_normal(sd, None, Some(b), (i as f64 + 0.5) / n as f64).0)
            .sum::<f64>()
            / n as f64;
        let z: f64 = b / sd;
        let nd = Normal::standard();
        let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let want = -sd * phi / nd.cdf(z);
        assert!((m - want).abs() < 1e-3, "{m} vs {want}");
    }

    proptest! {
        #[test]
        fn draws_respect_bounds(sd in 0.0f64..1e5, lo in -1e6f64..1e6, width in 0.0f64..1e6, u in 0.0001f64..0.9999) {
            let hi = lo + width;
            for (l, h) in [(Some(lo), Some(hi)), (Some(lo), None), (None, Some(hi))] {
                let (x, _) = truncated_normal(sd, l, h, u);
                prop_assert!(x >= l.unwrap_or(f64::NEG_INFINITY) && x <= h.unwrap_or(f64::INFINITY));
            }
        }
    }
}
