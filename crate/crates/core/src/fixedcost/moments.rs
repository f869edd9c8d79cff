//! Moment inequalities built from deviation records.
//!
//! Each record contributes `g(theta) = a - b . theta` with `a = delta_pi2 / 1e4`
//! and `b = delta_z`, so every moment and its covariance are low-order
//! polynomials in theta. [`SufficientStats`] stores those coefficients once;
//! evaluating a grid point is then independent of the record count.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{DeviationKind, DeviationRecord, DIM};
use crate::error::{Result, SkyError};
use crate::linalg::quantile_sorted;
use crate::model::{AirlineIdx, Dataset, MarketIdx};
use crate::units::FIXED_COST_UNIT_USD;

/// Indicator instruments over distance x market-size quantile cells,
/// separately for each deviation kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellScheme {
    pub distance_bins: usize,
    pub size_bins: usize,
    /// Value of the indicator inside its cell.
    pub weight: f64,
}

impl Default for CellScheme {
    fn default() -> Self {
        CellScheme {
            distance_bins: 3,
            size_bins: 3,
            weight: 1.0,
        }
    }
}

impl CellScheme {
    pub fn new(distance_bins: usize, size_bins: usize) -> Self {
        CellScheme {
            distance_bins,
            size_bins,
            weight: 1.0,
        }
    }

    pub fn cells(&self) -> usize {
        self.distance_bins * self.size_bins
    }

    fn validate(&self) -> Result<()> {
        if self.distance_bins == 0 || self.size_bins == 0 {
            return Err(SkyError::domain("instrument cells need at least one bin per dimension"));
        }
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return Err(SkyError::domain("instrument weight must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    /// Records treated as independent.
    #[default]
    PerRecord,
    /// Records of the same airline may be correlated.
    AirlineCluster,
}

/// Quantile cut points over every market in the dataset.
#[derive(Clone, Debug, PartialEq)]
struct Cuts {
    distance: Vec<f64>,
    size: Vec<f64>,
}

impl Cuts {
    fn new(ds: &Dataset, scheme: &CellScheme) -> Self {
        let cut = |mut v: Vec<f64>, bins: usize| {
            v.sort_by(f64::total_cmp);
            (1..bins)
                .map(|i| quantile_sorted(&v, i as f64 / bins as f64))
                .collect::<Vec<_>>()
        };
        Cuts {
            distance: cut(ds.markets.iter().map(|m| m.distance_km).collect(), scheme.distance_bins),
            size: cut(ds.markets.iter().map(|m| m.size).collect(), scheme.size_bins),
        }
    }

    fn bin(cuts: &[f64], v: f64) -> usize {
        cuts.iter().filter(|&&c| v > c).count()
    }

    fn cell(&self, ds: &Dataset, m: MarketIdx, scheme: &CellScheme) -> usize {
        let mk = ds.market(m);
        Self::bin(&self.distance, mk.distance_km) * scheme.size_bins + Self::bin(&self.size, mk.size)
    }
}

/// Coefficients of one moment, summed over the records in its cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub label: String,
    pub n: usize,
    pub sa: f64,
    pub sb: [f64; DIM],
    pub saa: f64,
    pub sab: [f64; DIM],
    pub sbb: [[f64; DIM]; DIM],
}

impl CellStats {
    fn empty(label: String) -> Self {
        CellStats {
            label,
            n: 0,
            sa: 0.0,
            sb: [0.0; DIM],
            saa: 0.0,
            sab: [0.0; DIM],
            sbb: [[0.0; DIM]; DIM],
        }
    }

    fn add(&mut self, a: f64, b: &[f64; DIM]) {
        self.n += 1;
        self.sa += a;
        self.saa += a * a;
        for i in 0..DIM {
            self.sb[i] += b[i];
            self.sab[i] += a * b[i];
            for j in 0..DIM {
                self.sbb[i][j] += b[i] * b[j];
            }
        }
    }

    fn sum_g(&self, theta: &[f64; DIM]) -> f64 {
        self.sa - dot(&self.sb, theta)
    }

    fn sum_g2(&self, theta: &[f64; DIM]) -> f64 {
        let mut quad = 0.0;
        for i in 0..DIM {
            for j in 0..DIM {
                quad += theta[i] * self.sbb[i][j] * theta[j];
            }
        }
        self.saa - 2.0 * dot(&self.sab, theta) + quad
    }
}

fn dot(a: &[f64; DIM], b: &[f64; DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-cluster sums for the clustered covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSums {
    /// Indexed by retained moment.
    pub n: Vec<usize>,
    pub sa: Vec<f64>,
    pub sb: Vec<[f64; DIM]>,
}

/// Everything needed to evaluate moments and covariance at any theta.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub scheme: CellScheme,
    pub covariance: CovarianceKind,
    /// Retained moments (cells with at least two records).
    pub cells: Vec<CellStats>,
    /// Labels of cells dropped for having fewer than two records.
    pub dropped: Vec<String>,
    pub clusters: Vec<ClusterSums>,
}

/// Moments and their estimated covariance at one theta.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSet {
    pub moments: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub labels: Vec<String>,
}

impl MomentSet {
    pub fn len(&self) -> usize {
        self.moments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moments.is_empty()
    }
}

/// `a` and `b` of one record's contribution.
pub fn record_terms(rec: &DeviationRecord) -> (f64, [f64; DIM]) {
    (rec.delta_pi2 / FIXED_COST_UNIT_USD, rec.delta_z)
}

/// `delta_pi2 - delta_z . theta`, in $10,000, for theta in $10,000.
pub fn profit_difference(rec: &DeviationRecord, theta: &[f64; DIM]) -> f64 {
    let (a, b) = record_terms(rec);
    a - dot(&b, theta)
}

pub fn cell_label(kind: DeviationKind, cell: usize, scheme: &CellScheme) -> String {
    format!(
        "{}:d{}s{}",
        kind.label(),
        cell / scheme.size_bins + 1,
        cell % scheme.size_bins + 1
    )
}

impl SufficientStats {
    pub fn build(
        ds: &Dataset,
        records: &[DeviationRecord],
        scheme: CellScheme,
        covariance: CovarianceKind,
    ) -> Result<Self> {
        scheme.validate()?;
        let cuts = Cuts::new(ds, &scheme);
        let per_kind = scheme.cells();
        let slot = |rec: &DeviationRecord| {
            let k = DeviationKind::ALL.iter().position(|&x| x == rec.kind).unwrap_or(0);
            k * per_kind + cuts.cell(ds, rec.cell_market, &scheme)
        };
        let mut all: Vec<CellStats> = DeviationKind::ALL
            .iter()
            .flat_map(|&k| (0..per_kind).map(move |c| (k, c)))
            .map(|(k, c)| CellStats::empty(cell_label(k, c, &scheme)))
            .collect();
        for rec in records {
            let (a, b) = record_terms(rec);
            if !a.is_finite() || b.iter().any(|v| !v.is_finite()) {
                return Err(SkyError::domain("non-finite deviation record"));
            }
            all[slot(rec)].add(scheme.weight * a, &b.map(|v| scheme.weight * v));
        }
        let mut keep = vec![usize::MAX; all.len()];
        let mut cells = Vec::new();
        let mut dropped = Vec::new();
        for (i, c) in all.into_iter().enumerate() {
            if c.n >= 2 {
                keep[i] = cells.len();
                cells.push(c);
            } else {
                if c.n == 1 {
                    log::warn!("moment {} has a single record and is dropped", c.label);
                } else {
                    log::warn!("moment {} has no records and is dropped", c.label);
                }
                dropped.push(c.label);
            }
        }
        let mut clusters = Vec::new();
        if covariance == CovarianceKind::AirlineCluster {
            let k = cells.len();
            let mut by: BTreeMap<AirlineIdx, ClusterSums> = BTreeMap::new();
            for rec in records {
                let j = keep[slot(rec)];
                if j == usize::MAX {
                    continue;
                }
                let e = by.entry(rec.airline).or_insert_with(|| ClusterSums {
                    n: vec![0; k],
                    sa: vec![0.0; k],
                    sb: vec![[0.0; DIM]; k],
                });
                let (a, b) = record_terms(rec);
                e.n[j] += 1;
                e.sa[j] += scheme.weight * a;
                for d in 0..DIM {
                    e.sb[j][d] += scheme.weight * b[d];
                }
            }
            clusters = by.into_values().collect();
        }
        Ok(SufficientStats {
            scheme,
            covariance,
            cells,
            dropped,
            clusters,
        })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Least-squares theta minimising the summed squared profit differences.
    pub fn least_squares_centre(&self) -> [f64; DIM] {
        let mut a = vec![0.0; DIM * DIM];
        let mut rhs = vec![0.0; DIM];
        for c in &self.cells {
            for i in 0..DIM {
                rhs[i] += c.sab[i];
                for j in 0..DIM {
                    a[i * DIM + j] += c.sbb[i][j];
                }
            }
        }
        let trace: f64 = (0..DIM).map(|i| a[i * DIM + i]).sum();
        let mut sol = rhs.clone();
        let mut m = a.clone();
        if !crate::linalg::solve_in_place(&mut m, &mut sol, DIM) {
            let ridge = 1e-8 * (trace / DIM as f64).max(1.0);
            let mut m = a;
            for i in 0..DIM {
                m[i * DIM + i] += ridge;
            }
            sol = rhs;
            if !crate::linalg::solve_in_place(&mut m, &mut sol, DIM) {
                return [0.0; DIM];
            }
        }
        [sol[0], sol[1], sol[2], sol[3]]
    }

    /// Moments `-(1/n_k) sum Y_k (a - b . theta)` and the covariance of
    /// those sample means.
    pub fn evaluate(&self, theta: &[f64; DIM]) -> MomentSet {
        let k = self.cells.len();
        let moments: Vec<f64> = self
            .cells
            .iter()
            .map(|c| -c.sum_g(theta) / c.n as f64)
            .collect();
        let mut cov = DMatrix::zeros(k, k);
        match self.covariance {
            CovarianceKind::PerRecord => {
                for (i, c) in self.cells.iter().enumerate() {
                    let n = c.n as f64;
                    let mean = c.sum_g(theta) / n;
                    let ss = (c.sum_g2(theta) - n * mean * mean).max(0.0);
                    cov[(i, i)] = ss / ((n - 1.0) * n);
                }
            }
            CovarianceKind::AirlineCluster => {
                let nc = self.clusters.len() as f64;
                let means: Vec<f64> = moments.iter().map(|m| -m).collect();
                let dev: Vec<Vec<f64>> = self
                    .clusters
                    .iter()
                    .map(|cl| {
                        (0..k)
                            .map(|j| cl.sa[j] - dot(&cl.sb[j], theta) - cl.n[j] as f64 * means[j])
                            .collect()
                    })
                    .collect();
                let adj = if nc > 1.0 { nc / (nc - 1.0) } else { 1.0 };
                for i in 0..k {
                    for j in i..k {
                        let s: f64 = dev.iter().map(|d| d[i] * d[j]).sum();
                        let v = adj * s / (self.cells[i].n as f64 * self.cells[j].n as f64);
                        cov[(i, j)] = v;
                        cov[(j, i)] = v;
                    }
                }
            }
        }
        MomentSet {
            moments,
            covariance: cov,
            labels: self.cells.iter().map(|c| c.label.clone()).collect(),
        }
    }
}

/// Moments and covariance at `theta` straight from the records.
pub fn moment_vector(
    ds: &Dataset,
    records: &[DeviationRecord],
    theta: &[f64; DIM],
    scheme: CellScheme,
    covariance: CovarianceKind,
) -> Result<MomentSet> {
    Ok(SufficientStats::build(ds, records, scheme, covariance)?.evaluate(theta))
}
