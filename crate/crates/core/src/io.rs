//! CSV and JSON artefacts: the dataset bundle plus generic readers/writers.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SkyError};
use crate::model::{Airline, City, Dataset, DatasetParts, RawAirport, RawDistance, RawProduct};
use crate::pricing::load_per_flight;

pub const CITIES_CSV: &str = "cities.csv";
pub const AIRPORTS_CSV: &str = "airports.csv";
pub const AIRLINES_CSV: &str = "airlines.csv";
pub const DISTANCES_CSV: &str = "distances.csv";
pub const PRODUCTS_CSV: &str = "products.csv";

/// Files making up a dataset bundle, in write order.
pub const BUNDLE_FILES: [&str; 5] = [CITIES_CSV, AIRPORTS_CSV, AIRLINES_CSV, DISTANCES_CSV, PRODUCTS_CSV];

/// Fares outside this band (USD) are legal but reported.
const PLAUSIBLE_FARE: (f64, f64) = (10.0, 2_000.0);
/// Passengers per flight above which a product is reported.
const PLAUSIBLE_LOAD: f64 = 400.0;

fn io_err(path: &Path, source: std::io::Error) -> SkyError {
    SkyError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, source: csv::Error) -> SkyError {
    SkyError::Csv {
        path: path.display().to_string(),
        source,
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads every row; a malformed row fails with its line number.
pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| SkyError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| SkyError::Json {
        path: path.display().to_string(),
        source: e,
    })
}

/// Writes the five bundle CSVs into `dir` and returns their paths.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let parts = ds.to_parts();
    let paths: Vec<PathBuf> = BUNDLE_FILES.iter().map(|f| dir.join(f)).collect();
    write_csv(&paths[0], &parts.cities)?;
    write_csv(&paths[1], &parts.airports)?;
    write_csv(&paths[2], &parts.airlines)?;
    write_csv(&paths[3], &parts.distances)?;
    write_csv(&paths[4], &parts.products)?;
    Ok(paths)
}

pub fn read_parts(dir: &Path) -> Result<DatasetParts> {
    Ok(DatasetParts {
        cities: read_csv::<City>(&dir.join(CITIES_CSV))?,
        airports: read_csv::<RawAirport>(&dir.join(AIRPORTS_CSV))?,
        airlines: read_csv::<Airline>(&dir.join(AIRLINES_CSV))?,
        distances: read_csv::<RawDistance>(&dir.join(DISTANCES_CSV))?,
        products: read_csv::<RawProduct>(&dir.join(PRODUCTS_CSV))?,
    })
}

/// Loads and validates a bundle. Product errors carry the CSV line of the
/// offending row.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let parts = read_parts(dir)?;
    // Line 1 is the header.
    let lines: HashMap<String, usize> = parts
        .products
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("products[{}]", p.id), i + 2))
        .collect();
    Dataset::build(parts).map_err(|e| match e {
        SkyError::Validation { messages } => SkyError::Validation {
            messages: messages
                .into_iter()
                .map(|m| {
                    let line = m.split_once(':').and_then(|(tag, _)| lines.get(tag));
                    match line {
                        Some(n) => format!("{PRODUCTS_CSV} line {n}: {m}"),
                        None => m,
                    }
                })
                .collect(),
        },
        other => other,
    })
}

/// Plausibility summary of a validated dataset. Hard violations never get
/// this far; `warnings` lists legal but suspicious rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub cities: usize,
    pub airports: usize,
    pub airlines: usize,
    pub markets: usize,
    pub routes: usize,
    pub products: usize,
    pub quarters: usize,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.warnings.is_empty()
    }
}

pub fn validate(ds: &Dataset) -> ValidationReport {
    let mut warnings = Vec::new();
    for p in &ds.products {
        if p.fare < PLAUSIBLE_FARE.0 || p.fare > PLAUSIBLE_FARE.1 {
            warnings.push(format!("products[{}]: fare {:.2} USD outside the usual range", p.id, p.fare));
        }
        let size = ds.market(ds.market_of(p.route)).size;
        let load = load_per_flight(p.passengers / size, size, p.freq);
        if load > PLAUSIBLE_LOAD {
            warnings.push(format!("products[{}]: {:.0} passengers per flight", p.id, load));
        }
        if p.passengers == 0.0 {
            warnings.push(format!("products[{}]: zero passengers", p.id));
        }
    }
    for (q, m, _) in ds.market_quarters() {
        let (inside, _, _) = ds.observed_shares(q, m);
        let total: f64 = inside.iter().sum();
        if total >= 1.0 {
            warnings.push(format!(
                "market {} Q{}: inside shares sum to {:.3}",
                ds.market_label(m),
                q.get(),
                total
            ));
        }
    }
    ValidationReport {
        cities: ds.cities.len(),
        airports: ds.airports.len(),
        airlines: ds.airlines.len(),
        markets: ds.markets.len(),
        routes: ds.routes.len(),
        products: ds.products.len(),
        quarters: ds.quarters().len(),
        warnings,
    }
}
