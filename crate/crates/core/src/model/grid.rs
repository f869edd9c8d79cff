//! Discrete frequency supports by market cell.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Dataset, MarketIdx};
use crate::error::{Result, SkyError};
use crate::units::is_short_haul;

/// Canonical daily-frequency bins. The open "10+" bin is represented by 10.
pub const CANONICAL_BINS: [f64; 8] = [
    1.0 / 7.0,
    2.0 / 7.0,
    4.0 / 7.0,
    2.0,
    4.0,
    6.0,
    8.0,
    10.0,
];

/// Market-size buckets are 2 million persons wide; the last short-haul
/// bucket is open-ended ("12+").
pub const SIZE_BUCKET_PERSONS: f64 = 2.0e6;
const MAX_SHORT_BUCKET: u8 = 6;
const MAX_LONG_BUCKET: u8 = 3;
/// Share of observed frequencies a data-driven cell must cover.
pub const COVERAGE: f64 = 0.90;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Haul {
    Short,
    MediumLong,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub size_bucket: u8,
    pub haul: Haul,
}

impl Cell {
    /// Cell of a market with the given size (persons) and distance (km).
    /// Buckets beyond the table are clamped to its last row.
    pub fn classify(size: f64, distance_km: f64) -> Self {
        let haul = if is_short_haul(distance_km) {
            Haul::Short
        } else {
            Haul::MediumLong
        };
        let raw = (size / SIZE_BUCKET_PERSONS).floor().max(0.0);
        let cap = match haul {
            Haul::Short => MAX_SHORT_BUCKET,
            Haul::MediumLong => MAX_LONG_BUCKET,
        };
        Cell {
            size_bucket: (raw.min(cap as f64)) as u8,
            haul,
        }
    }
}

/// Nearest canonical bin, measured on a log scale.
pub fn nearest_bin(freq: f64) -> f64 {
    let lf = freq.max(1e-12).ln();
    let mut best = CANONICAL_BINS[0];
    let mut dist = f64::INFINITY;
    for &b in &CANONICAL_BINS {
        let d = (b.ln() - lf).abs();
        if d < dist {
            dist = d;
            best = b;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSupport {
    pub cell: Cell,
    pub frequencies: Vec<f64>,
}

/// Sorted list of feasible daily frequencies per market cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    pub cells: Vec<CellSupport>,
}

impl FrequencyGrid {
    /// The static supports used when no data-driven grid is requested.
    pub fn static_table() -> Self {
        let (s1, s2, s4) = (1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0);
        let short: [Vec<f64>; 7] = [
            vec![s1, s2, s4, 2.0],
            vec![s1, s2, s4, 2.0, 4.0],
            vec![s2, s4, 2.0, 4.0, 6.0],
            vec![s2, s4, 2.0, 4.0, 6.0],
            vec![s4, 2.0, 4.0, 6.0, 10.0],
            vec![s4, 2.0, 4.0, 6.0],
            vec![2.0, 4.0, 6.0],
        ];
        let long: [Vec<f64>; 4] = [
            vec![s1, s2, s4, 2.0],
            vec![s1, s2, s4, 2.0],
            vec![s1, s2, s4, 2.0],
            vec![s2, s4, 2.0, 4.0],
        ];
        let mut cells = Vec::new();
        for (i, f) in short.into_iter().enumerate() {
            cells.push(CellSupport {
                cell: Cell {
                    size_bucket: i as u8,
                    haul: Haul::Short,
                },
                frequencies: f,
            });
        }
        for (i, f) in long.into_iter().enumerate() {
            cells.push(CellSupport {
                cell: Cell {
                    size_bucket: i as u8,
                    haul: Haul::MediumLong,
                },
                frequencies: f,
            });
        }
        FrequencyGrid { cells }
    }

    /// Data-driven supports: per cell, the fewest canonical bins (most
    /// frequent first) covering at least 90% of observed products. Cells
    /// without observations fall back to `fallback` when given.
    pub fn from_data(ds: &Dataset, fallback: Option<&FrequencyGrid>) -> Result<Self> {
        let mut counts: BTreeMap<Cell, BTreeMap<usize, usize>> = BTreeMap::new();
        for p in &ds.products {
            let m = ds.market(ds.market_of(p.route));
            let cell = Cell::classify(m.size, m.distance_km);
            let bin = nearest_bin(p.freq);
            let k = CANONICAL_BINS.iter().position(|&b| b == bin).unwrap();
            *counts.entry(cell).or_default().entry(k).or_default() += 1;
        }
        let mut cells = Vec::new();
        for (cell, hist) in &counts {
            let total: usize = hist.values().sum();
            let mut ranked: Vec<(usize, usize)> = hist.iter().map(|(&k, &c)| (k, c)).collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut chosen = Vec::new();
            let mut covered = 0usize;
            for (k, c) in ranked {
                chosen.push(k);
                covered += c;
                if covered as f64 >= COVERAGE * total as f64 {
                    break;
                }
            }
            chosen.sort();
            cells.push(CellSupport {
                cell: *cell,
                frequencies: chosen.into_iter().map(|k| CANONICAL_BINS[k]).collect(),
            });
        }
        if let Some(fb) = fallback {
            for c in &fb.cells {
                if !counts.contains_key(&c.cell) {
                    cells.push(c.clone());
                }
            }
        }
        cells.sort_by(|a, b| a.cell.cmp(&b.cell));
        let grid = FrequencyGrid { cells };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.cells {
            if c.frequencies.is_empty() {
                return Err(SkyError::domain(format!("empty frequency cell {:?}", c.cell)));
            }
            if c.frequencies.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(SkyError::domain(format!(
                    "frequency cell {:?} is not strictly increasing",
                    c.cell
                )));
            }
        }
        Ok(())
    }

    pub fn support(&self, cell: Cell) -> Result<&[f64]> {
        self.cells
            .iter()
            .find(|c| c.cell == cell)
            .map(|c| c.frequencies.as_slice())
            .ok_or_else(|| {
                SkyError::domain(format!(
                    "no frequency support for cell {:?} (no observations and no static table)",
                    cell
                ))
            })
    }

    /// Feasible frequencies for a market.
    pub fn frequency_support(&self, ds: &Dataset, m: MarketIdx) -> Result<&[f64]> {
        let mk = ds.market(m);
        self.support(Cell::classify(mk.size, mk.distance_km))
    }
}
