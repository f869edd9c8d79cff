//! Product characteristics `x` and linear indices over them.
//!
//! A [`Design`] is an ordered list of named columns. The same design serves
//! the demand index, the marginal-cost index, and the estimation regressors.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SkyError};
use crate::model::{AirlineIdx, Dataset, Quarter, RouteIdx};
use crate::units::KM_PER_DISTANCE_UNIT;

/// Which fixed effects enter the design.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixedEffects {
    pub airline: bool,
    pub quarter: bool,
    /// Airline-by-quarter dummies; supersedes `airline` and `quarter`.
    pub airline_quarter: bool,
    pub major_airport: bool,
    pub airline_hub: bool,
    pub top_city: bool,
}

impl Default for FixedEffects {
    fn default() -> Self {
        FixedEffects {
            airline: true,
            quarter: true,
            airline_quarter: false,
            major_airport: false,
            airline_hub: false,
            top_city: false,
        }
    }
}

impl FixedEffects {
    pub fn full() -> Self {
        FixedEffects {
            airline: false,
            quarter: false,
            airline_quarter: true,
            major_airport: true,
            airline_hub: true,
            top_city: true,
        }
    }

    pub fn none() -> Self {
        FixedEffects {
            airline: false,
            quarter: false,
            airline_quarter: false,
            major_airport: false,
            airline_hub: false,
            top_city: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Column {
    Constant,
    LogFreq,
    /// Distance in 1000 km.
    Distance,
    DistanceSq,
    Airline(AirlineIdx),
    Quarter(u8),
    AirlineQuarter(AirlineIdx, u8),
    /// Count of major endpoint airports.
    MajorAirports,
    /// Route touches the airline's hub.
    AirlineHub,
    /// Count of endpoints in the largest cities.
    TopCity,
}

/// Characteristics of one (airline, route, quarter, frequency) observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obs {
    pub airline: AirlineIdx,
    pub route: RouteIdx,
    pub quarter: Quarter,
    pub freq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub columns: Vec<Column>,
    pub names: Vec<String>,
    /// Cities counted by the top-city column.
    pub top_cities: Vec<u32>,
}

/// Number of cities flagged by the top-city indicator.
pub const TOP_CITY_COUNT: usize = 50;

impl Design {
    /// Builds columns for `fe`. With `drop_baseline`, the first airline and
    /// first quarter present in the data are omitted so the design stays full
    /// rank alongside the constant.
    pub fn new(ds: &Dataset, fe: FixedEffects, drop_baseline: bool) -> Self {
        let airlines: Vec<AirlineIdx> = {
            let set: std::collections::BTreeSet<AirlineIdx> =
                ds.products.iter().map(|p| p.airline).collect();
            if set.is_empty() {
                (0..ds.airlines.len() as u32).map(AirlineIdx).collect()
            } else {
                set.into_iter().collect()
            }
        };
        let quarters: Vec<u8> = ds.quarters().iter().map(|q| q.get()).collect();
        let skip = usize::from(drop_baseline);
        let mut columns = vec![
            Column::Constant,
            Column::LogFreq,
            Column::Distance,
            Column::DistanceSq,
        ];
        if fe.airline_quarter {
            let mut pairs = Vec::new();
            for &g in &airlines {
                for &q in &quarters {
                    pairs.push((g, q));
                }
            }
            columns.extend(pairs.into_iter().skip(skip).map(|(g, q)| Column::AirlineQuarter(g, q)));
        } else {
            if fe.airline {
                columns.extend(airlines.iter().skip(skip).map(|&g| Column::Airline(g)));
            }
            if fe.quarter {
                columns.extend(quarters.iter().skip(skip).map(|&q| Column::Quarter(q)));
            }
        }
        if fe.major_airport {
            columns.push(Column::MajorAirports);
        }
        if fe.airline_hub {
            columns.push(Column::AirlineHub);
        }
        if fe.top_city {
            columns.push(Column::TopCity);
        }
        Self::from_columns(ds, columns)
    }

    pub fn from_columns(ds: &Dataset, columns: Vec<Column>) -> Self {
        let names = columns.iter().map(|c| column_name(ds, *c)).collect();
        let mut order: Vec<u32> = (0..ds.cities.len() as u32).collect();
        order.sort_by(|&a, &b| {
            ds.cities[b as usize]
                .population
                .total_cmp(&ds.cities[a as usize].population)
                .then(a.cmp(&b))
        });
        order.truncate(TOP_CITY_COUNT);
        order.sort();
        Design {
            columns,
            names,
            top_cities: order,
        }
    }

    /// Rebuilds a design from exported column names.
    pub fn from_names(ds: &Dataset, names: &[String]) -> Result<Self> {
        let cols = names
            .iter()
            .map(|n| parse_column(ds, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_columns(ds, cols))
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn position(&self, c: Column) -> Option<usize> {
        self.columns.iter().position(|&x| x == c)
    }

    /// Value of one column for `obs`.
    pub fn value(&self, ds: &Dataset, col: Column, obs: &Obs) -> f64 {
        let d = || ds.route(obs.route).distance_km / KM_PER_DISTANCE_UNIT;
        match col {
            Column::Constant => 1.0,
            Column::LogFreq => obs.freq.ln(),
            Column::Distance => d(),
            Column::DistanceSq => d() * d(),
            Column::Airline(g) => (obs.airline == g) as u8 as f64,
            Column::Quarter(q) => (obs.quarter.get() == q) as u8 as f64,
            Column::AirlineQuarter(g, q) => (obs.airline == g && obs.quarter.get() == q) as u8 as f64,
            Column::MajorAirports => ds.major_endpoints(obs.route) as f64,
            Column::AirlineHub => ds.touches_hub(obs.airline, obs.route) as u8 as f64,
            Column::TopCity => {
                let (a, b) = ds.route_cities(obs.route);
                (self.top_cities.binary_search(&a.0).is_ok() as u8
                    + self.top_cities.binary_search(&b.0).is_ok() as u8) as f64
            }
        }
    }

    /// Writes the design row for `obs` into `out`.
    pub fn fill(&self, ds: &Dataset, obs: &Obs, out: &mut [f64]) {
        for (slot, col) in out.iter_mut().zip(&self.columns) {
            *slot = self.value(ds, *col, obs);
        }
    }

    pub fn row(&self, ds: &Dataset, obs: &Obs) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.fill(ds, obs, &mut out);
        out
    }
}

fn column_name(ds: &Dataset, c: Column) -> String {
    match c {
        Column::Constant => "constant".into(),
        Column::LogFreq => "log_frequency".into(),
        Column::Distance => "distance_1000km".into(),
        Column::DistanceSq => "distance_1000km_sq".into(),
        Column::Airline(g) => format!("airline:{}", ds.airlines[g.idx()].id),
        Column::Quarter(q) => format!("quarter:{q}"),
        Column::AirlineQuarter(g, q) => format!("airline_quarter:{}:{q}", ds.airlines[g.idx()].id),
        Column::MajorAirports => "major_airports".into(),
        Column::AirlineHub => "airline_hub".into(),
        Column::TopCity => "top_city".into(),
    }
}

fn parse_column(ds: &Dataset, name: &str) -> Result<Column> {
    let bad = || SkyError::domain(format!("unrecognised design column `{name}`"));
    let airline = |id: &str| -> Result<AirlineIdx> {
        ds.airlines
            .iter()
            .position(|a| a.id == id)
            .map(|i| AirlineIdx(i as u32))
            .ok_or_else(|| SkyError::unknown("airline", id))
    };
    Ok(match name {
        "constant" => Column::Constant,
        "log_frequency" => Column::LogFreq,
        "distance_1000km" => Column::Distance,
        "distance_1000km_sq" => Column::DistanceSq,
        "major_airports" => Column::MajorAirports,
        "airline_hub" => Column::AirlineHub,
        "top_city" => Column::TopCity,
        _ => {
            if let Some(rest) = name.strip_prefix("airline_quarter:") {
                let (id, q) = rest.rsplit_once(':').ok_or_else(bad)?;
                Column::AirlineQuarter(airline(id)?, q.parse().map_err(|_| bad())?)
            } else if let Some(id) = name.strip_prefix("airline:") {
                Column::Airline(airline(id)?)
            } else if let Some(q) = name.strip_prefix("quarter:") {
                Column::Quarter(q.parse().map_err(|_| bad())?)
            } else {
                return Err(bad());
            }
        }
    })
}

/// Coefficients over a design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearIndex {
    pub design: Design,
    pub coef: Vec<f64>,
}

impl LinearIndex {
    pub fn new(design: Design, coef: Vec<f64>) -> Result<Self> {
        if design.len() != coef.len() {
            return Err(SkyError::domain(format!(
                "design has {} columns but {} coefficients",
                design.len(),
                coef.len()
            )));
        }
        Ok(LinearIndex { design, coef })
    }

    pub fn eval(&self, ds: &Dataset, obs: &Obs) -> f64 {
        self.design
            .columns
            .iter()
            .zip(&self.coef)
            .filter(|(_, &b)| b != 0.0)
            .map(|(col, &b)| b * self.design.value(ds, *col, obs))
            .sum()
    }

    pub fn get(&self, c: Column) -> Option<f64> {
        self.design.position(c).map(|i| self.coef[i])
    }

    /// Named coefficients in design order.
    pub fn named(&self) -> Vec<(String, f64)> {
        self.design
            .names
            .iter()
            .cloned()
            .zip(self.coef.iter().copied())
            .collect()
    }

    /// Coefficients scaled by `factor` (unit conversion at I/O).
    pub fn scaled(&self, factor: f64) -> Self {
        LinearIndex {
            design: self.design.clone(),
            coef: self.coef.iter().map(|c| c * factor).collect(),
        }
    }
}
