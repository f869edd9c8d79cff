//! Grid-search confidence region for the fixed-cost parameters.
//!
//! A coarse lattice over the whole box locates accepted areas; a flood fill at
//! the requested step then grows those areas point by point. If the fine set
//! would exceed `max_points` the step is doubled and the fill restarted, and
//! the step actually used is reported.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::clr::{accepts, clr_stat, critical_value};
use super::moments::SufficientStats;
use super::{FixedCostParams, DIM};
use crate::error::{Result, SkyError};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: [f64; DIM],
    pub upper: [f64; DIM],
    pub step: f64,
    pub coarse_step: f64,
    pub max_points: usize,
    /// Test size; 0.05 gives a 95% region.
    pub level: f64,
}

impl GridSpec {
    pub const DEFAULT_HALF_WIDTH: f64 = 100.0;

    /// Box of `half_width` around `centre`, step 1, coarse step 10.
    pub fn around(centre: [f64; DIM], half_width: f64) -> Self {
        GridSpec {
            lower: centre.map(|c| (c - half_width).round()),
            upper: centre.map(|c| (c + half_width).round()),
            step: 1.0,
            coarse_step: 10.0,
            max_points: 200_000,
            level: 0.05,
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = self.lower.iter().chain(&self.upper).all(|v| v.is_finite());
        if !finite || (0..DIM).any(|i| self.lower[i] > self.upper[i]) {
            return Err(SkyError::domain("grid bounds must be finite with lower <= upper"));
        }
        if !(self.step > 0.0) || !(self.coarse_step >= self.step) {
            return Err(SkyError::domain("grid steps must be positive with coarse >= fine"));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(SkyError::domain("test level must lie in (0, 1)"));
        }
        if self.max_points == 0 {
            return Err(SkyError::domain("max_points must be positive"));
        }
        Ok(())
    }

    fn counts(&self, step: f64) -> [i64; DIM] {
        std::array::from_fn(|i| ((self.upper[i] - self.lower[i]) / step + 1e-9).floor() as i64 + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionPoint {
    pub theta: [f64; DIM],
    pub value: f64,
    pub active: usize,
    pub critical: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRegion {
    pub step: f64,
    pub level: f64,
    pub centre: [f64; DIM],
    pub lower: [f64; DIM],
    pub upper: [f64; DIM],
    pub points: Vec<RegionPoint>,
    /// Per-dimension (min, max) over accepted points; `None` when empty.
    pub projections: Option<[(f64, f64); DIM]>,
    pub evaluated: usize,
    pub moments: usize,
}

impl ConfidenceRegion {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, theta: &[f64; DIM]) -> bool {
        self.points.iter().any(|p| {
            p.theta
                .iter()
                .zip(theta)
                .all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + b.abs()))
        })
    }

    /// `n` accepted points chosen uniformly (with replacement).
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<FixedCostParams>> {
        if self.points.is_empty() {
            return Err(SkyError::EmptyRegion);
        }
        Ok((0..n)
            .map(|i| {
                let j = rng::mix(seed, "region-draw", &[i as u64]) % self.points.len() as u64;
                FixedCostParams::new(self.points[j as usize].theta)
            })
            .collect())
    }
}

/// Evaluates the test at one theta.
pub fn test_point(stats: &SufficientStats, theta: &[f64; DIM], level: f64) -> Result<(bool, RegionPoint)> {
    let ms = stats.evaluate(theta);
    let res = clr_stat(&ms.moments, &ms.covariance)?;
    let ok = accepts(&res, level);
    Ok((
        ok,
        RegionPoint {
            theta: *theta,
            value: res.value,
            active: res.active,
            critical: critical_value(res.active, level),
        },
    ))
}

type Lattice = [i64; DIM];

struct Fill<'a> {
    stats: &'a SufficientStats,
    spec: &'a GridSpec,
    step: f64,
    counts: Lattice,
}

impl Fill<'_> {
    fn theta(&self, p: &Lattice) -> [f64; DIM] {
        std::array::from_fn(|i| self.spec.lower[i] + p[i] as f64 * self.step)
    }

    fn inside(&self, p: &Lattice) -> bool {
        (0..DIM).all(|i| p[i] >= 0 && p[i] < self.counts[i])
    }

    fn eval(&self, pts: &[Lattice]) -> Result<Vec<(bool, RegionPoint)>> {
        pts.par_iter()
            .map(|p| test_point(self.stats, &self.theta(p), self.spec.level))
            .collect()
    }

    /// Grows the accepted set from `seeds`. `None` if it exceeds the cap.
    fn run(&self, seeds: &[Lattice]) -> Result<Option<(BTreeMap<Lattice, RegionPoint>, usize)>> {
        let mut seen: BTreeSet<Lattice> = BTreeSet::new();
        let mut accepted = BTreeMap::new();
        let mut frontier: Vec<Lattice> = Vec::new();
        for s in seeds {
            if self.inside(s) && seen.insert(*s) {
                frontier.push(*s);
            }
        }
        let mut evaluated = 0;
        while !frontier.is_empty() {
            let results = self.eval(&frontier)?;
            evaluated += frontier.len();
            let mut next = Vec::new();
            for (p, (ok, pt)) in frontier.iter().zip(results) {
                if !ok {
                    continue;
                }
                accepted.insert(*p, pt);
                for d in 0..DIM {
                    for delta in [-1i64, 1] {
                        let mut q = *p;
                        q[d] += delta;
                        if self.inside(&q) && seen.insert(q) {
                            next.push(q);
                        }
                    }
                }
            }
            if accepted.len() > self.spec.max_points {
                return Ok(None);
            }
            frontier = next;
        }
        Ok(Some((accepted, evaluated)))
    }
}

fn lattice_iter(counts: &Lattice) -> impl Iterator<Item = Lattice> + '_ {
    let total: i64 = counts.iter().product();
    (0..total).map(move |mut k| {
        let mut p = [0i64; DIM];
        for d in (0..DIM).rev() {
            p[d] = k % counts[d];
            k /= counts[d];
        }
        p
    })
}

/// Accepted set `{theta : CLR(theta) <= chi2(r(theta), 1 - level)}` over the
/// grid. An empty region is returned as such, not as an error.
pub fn confidence_region(stats: &SufficientStats, spec: &GridSpec) -> Result<ConfidenceRegion> {
    spec.validate()?;
    let centre = stats.least_squares_centre();
    let coarse = Fill {
        stats,
        spec,
        step: spec.coarse_step,
        counts: spec.counts(spec.coarse_step),
    };
    let coarse_pts: Vec<Lattice> = lattice_iter(&coarse.counts).collect();
    let coarse_res = coarse.eval(&coarse_pts)?;
    let mut seeds_theta: Vec<[f64; DIM]> = coarse_pts
        .iter()
        .zip(&coarse_res)
        .filter(|(_, r)| r.0)
        .map(|(p, _)| coarse.theta(p))
        .collect();
    seeds_theta.push(centre);
    let mut evaluated = coarse_pts.len();
    let mut step = spec.step;
    loop {
        let counts = spec.counts(step);
        let fill = Fill {
            stats,
            spec,
            step,
            counts,
        };
        let seeds: Vec<Lattice> = seeds_theta
            .iter()
            .map(|t| std::array::from_fn(|i| (((t[i] - spec.lower[i]) / step).round() as i64).clamp(0, counts[i] - 1)))
            .collect();
        match fill.run(&seeds)? {
            Some((accepted, n)) => {
                evaluated += n;
                let points: Vec<RegionPoint> = accepted.into_values().collect();
                let projections = if points.is_empty() {
                    None
                } else {
                    Some(std::array::from_fn(|d| {
                        points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                            (lo.min(p.theta[d]), hi.max(p.theta[d]))
                        })
                    }))
                };
                if points.is_empty() {
                    log::warn!("confidence region is empty");
                }
                return Ok(ConfidenceRegion {
                    step,
                    level: spec.level,
                    centre,
                    lower: spec.lower,
                    upper: spec.upper,
                    points,
                    projections,
                    evaluated,
                    moments: stats.len(),
                });
            }
            None => {
                log::warn!("accepted set exceeds {} points at step {step}; doubling", spec.max_points);
                step *= 2.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixedcost::moments::{CellScheme, CovarianceKind};
    use crate::fixedcost::{DeviationKind, DeviationRecord};
    use crate::model::dataset::fixtures::four_city_parts;
    use crate::model::{AirlineIdx, Dataset, MarketIdx, Quarter, RouteIdx};

    fn rec(kind: DeviationKind, market: u32, pi: f64, z: [f64; DIM]) -> DeviationRecord {
        DeviationRecord {
            airline: AirlineIdx(0),
            quarter: Quarter::new(1).unwrap(),
            kind,
            observed: Some((RouteIdx(0), 1.0)),
            alternative: None,
            delta_pi2: pi,
            delta_z: z,
            cell_market: MarketIdx(market),
        }
    }

    fn small_spec() -> GridSpec {
        GridSpec {
            lower: [-4.0; DIM],
            upper: [4.0; DIM],
            step: 1.0,
            coarse_step: 4.0,
            max_points: 100_000,
            level: 0.05,
        }
    }

    #[test]
    fn no_deviations_accepts_full_grid() {
        let ds = Dataset::build(four_city_parts()).unwrap();
        let stats = SufficientStats::build(&ds, &[], CellScheme::default(), CovarianceKind::PerRecord).unwrap();
        let reg = confidence_region(&stats, &small_spec()).unwrap();
        assert_eq!(reg.points.len(), 9usize.pow(4));
        assert_eq!(reg.projections.unwrap(), [(-4.0, 4.0); DIM]);
        assert_eq!(reg.step, 1.0);
    }

    #[test]
    fn cap_doubles_step() {
        let ds = Dataset::build(four_city_parts()).unwrap();
        let stats = SufficientStats::build(&ds, &[], CellScheme::default(), CovarianceKind::PerRecord).unwrap();
        let mut spec = small_spec();
        spec.max_points = 1000;
        let reg = confidence_region(&stats, &spec).unwrap();
        assert_eq!(reg.step, 2.0);
        assert_eq!(reg.points.len(), 5usize.pow(4));
    }

    /// Exit records bound the constant from above, entry records from below.
    fn bracket_records(weight_noise: f64) -> Vec<DeviationRecord> {
        let mut out = Vec::new();
        for i in 0..40 {
            let e = weight_noise * ((i * 7919 % 13) as f64 - 6.0);
            out.push(rec(DeviationKind::ExitMarket, 0, (20_000.0 + 1000.0 * e).max(0.0), [1.0, 0.0, 0.0, 0.0]));
            out.push(rec(DeviationKind::EnterUnserved, 0, -(10_000.0 + 1000.0 * e), [-1.0, 0.0, 0.0, 0.0]));
        }
        out
    }

    #[test]
    fn bracketed_constant_and_exhaustive_agreement() {
        let ds = Dataset::build(four_city_parts()).unwrap();
        let recs = bracket_records(0.5);
        let stats = SufficientStats::build(&ds, &recs, CellScheme::new(1, 1), CovarianceKind::PerRecord).unwrap();
        let spec = small_spec();
        let reg = confidence_region(&stats, &spec).unwrap();
        assert!(!reg.is_empty());
        let proj = reg.projections.unwrap();
        assert!(proj[0].0 >= 0.0 && proj[0].1 <= 3.0, "{proj:?}");
        assert!(reg.points.iter().all(|p| p.value <= p.critical || p.active == 0));
        // Flood fill recovers every accepted point of the exhaustive grid here.
        let counts = spec.counts(1.0);
        let mut n = 0;
        for p in lattice_iter(&counts) {
            let t: [f64; DIM] = std::array::from_fn(|i| spec.lower[i] + p[i] as f64);
            if test_point(&stats, &t, spec.level).unwrap().0 {
                n += 1;
                assert!(reg.contains(&t));
            }
        }
        assert_eq!(n, reg.points.len());
    }

    #[test]
    fn invariant_to_instrument_scaling() {
        let ds = Dataset::build(four_city_parts()).unwrap();
        let recs = bracket_records(0.5);
        let a = SufficientStats::build(&ds, &recs, CellScheme::new(1, 1), CovarianceKind::PerRecord).unwrap();
        let mut scaled = CellScheme::new(1, 1);
        scaled.weight = 37.5;
        let b = SufficientStats::build(&ds, &recs, scaled, CovarianceKind::PerRecord).unwrap();
        let ra = confidence_region(&a, &small_spec()).unwrap();
        let rb = confidence_region(&b, &small_spec()).unwrap();
        let ta: Vec<_> = ra.points.iter().map(|p| p.theta).collect();
        let tb: Vec<_> = rb.points.iter().map(|p| p.theta).collect();
        assert_eq!(ta, tb);
    }

    #[test]
    fn contradictory_records_give_empty_region() {
        let ds = Dataset::build(four_city_parts()).unwrap();
        let mut recs = Vec::new();
        for i in 0..30 {
            let e = (i % 3) as f64;
            recs.push(rec(DeviationKind::ExitMarket, 0, 1_000.0 + e, [1.0, 0.0, 0.0, 0.0]));
            recs.push(rec(DeviationKind::EnterUnserved, 0, -(900_000.0 + e), [-1.0, 0.0, 0.0, 0.0]));
        }
        let stats = SufficientStats::build(&ds, &recs, CellScheme::new(1, 1), CovarianceKind::PerRecord).unwrap();
        let reg = confidence_region(&stats, &small_spec()).unwrap();
        assert!(reg.is_empty());
        assert!(reg.projections.is_none());
        assert!(matches!(reg.sample(3, 1), Err(SkyError::EmptyRegion)));
    }
}
