//! Domain entities shared by every stage: cities, airports, airline groups,
//! routes, markets and products, plus the derived route/market index.

pub mod dataset;
pub mod grid;
pub mod network;

pub use dataset::{Dataset, DatasetParts, RawAirport, RawDistance, RawProduct};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SkyError};

macro_rules! index_type {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn idx(self) -> usize {
                self.0 as usize
            }
        }
    };
}

index_type!(
    /// Position of a city in [`Dataset::cities`].
    CityIdx
);
index_type!(
    /// Position of an airport in [`Dataset::airports`].
    AirportIdx
);
index_type!(
    /// Position of an airline group in [`Dataset::airlines`].
    AirlineIdx
);
index_type!(
    /// Position of a route in [`Dataset::routes`].
    RouteIdx
);
index_type!(
    /// Position of a market in [`Dataset::markets`].
    MarketIdx
);

/// Quarter of the year, 1 to 4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Quarter(u8);

impl Quarter {
    pub fn new(q: u8) -> Result<Self> {
        if (1..=4).contains(&q) {
            Ok(Quarter(q))
        } else {
            Err(SkyError::domain(format!("quarter {q} outside 1..=4")))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CarrierType {
    FullService,
    LowCost,
    Regional,
}

impl CarrierType {
    pub const ALL: [CarrierType; 3] = [
        CarrierType::FullService,
        CarrierType::LowCost,
        CarrierType::Regional,
    ];

    pub fn code(self) -> &'static str {
        match self {
            CarrierType::FullService => "FSC",
            CarrierType::LowCost => "LCC",
            CarrierType::Regional => "Regional",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fsc" | "fullservice" | "full_service" | "full-service" => Ok(CarrierType::FullService),
            "lcc" | "lowcost" | "low_cost" | "low-cost" => Ok(CarrierType::LowCost),
            "regional" | "reg" => Ok(CarrierType::Regional),
            other => Err(SkyError::domain(format!("unknown carrier type `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct City {
    pub id: String,
    pub name: String,
    pub country: String,
    /// Persons.
    pub population: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Airport {
    pub id: String,
    pub city: CityIdx,
    pub slot_controlled: bool,
    pub major: bool,
    pub hub_of: Option<AirlineIdx>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Airline {
    pub id: String,
    pub code: String,
    pub carrier_type: CarrierType,
    pub home_country: String,
}

/// Non-directional airport pair; `a` precedes `b` in airport-id order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub a: AirportIdx,
    pub b: AirportIdx,
    pub market: MarketIdx,
    pub distance_km: f64,
    /// Number of slot-controlled endpoints (0, 1 or 2).
    pub slot_airports: u8,
}

/// Non-directional city pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Market {
    pub a: CityIdx,
    pub b: CityIdx,
    /// Persons: geometric mean of endpoint populations.
    pub size: f64,
    pub distance_km: f64,
    pub routes: Vec<RouteIdx>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: String,
    pub airline: AirlineIdx,
    pub route: RouteIdx,
    pub quarter: Quarter,
    /// USD.
    pub fare: f64,
    /// Flights per day.
    pub freq: f64,
    /// Persons per quarter.
    pub passengers: f64,
}

/// Geometric mean of two endpoint populations.
pub fn market_size(pop_a: f64, pop_b: f64) -> Result<f64> {
    if !(pop_a > 0.0 && pop_b > 0.0) {
        return Err(SkyError::domain(format!(
            "market size needs positive populations, got {pop_a} and {pop_b}"
        )));
    }
    Ok((pop_a * pop_b).sqrt())
}

/// Orders two ids so that the pair is direction-free.
pub fn canonical_pair<'a>(a: &'a str, b: &'a str) -> (&'a str, &'a str) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}
