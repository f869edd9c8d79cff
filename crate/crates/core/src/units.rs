//! Unit conventions.
//!
//! Internally everything is USD, km, persons and flights per day. The
//! reporting units (fares per 100 USD, distances per 1000 km, fixed costs per
//! 10,000 USD, populations in millions) only appear at I/O boundaries.

/// Days used to turn a daily frequency into a quarterly flight count.
pub const DAYS_PER_QUARTER: f64 = 91.0;
/// Each unit of daily frequency is a round trip.
pub const LEGS_PER_FREQUENCY: f64 = 2.0;
/// Fixed-cost parameters are reported in units of 10,000 USD.
pub const FIXED_COST_UNIT_USD: f64 = 10_000.0;
/// Fare coefficients are reported per 100 USD.
pub const FARE_UNIT_USD: f64 = 100.0;
pub const KM_PER_DISTANCE_UNIT: f64 = 1000.0;
pub const PERSONS_PER_MILLION: f64 = 1.0e6;
/// Average cruising speed used to convert distance into flight hours.
pub const CRUISE_SPEED_KMH: f64 = 860.0;
/// Short-haul markets are at most this long.
pub const SHORT_HAUL_MAX_KM: f64 = 1500.0;

/// Fuel burned per aircraft per 1000 km, in kg.
pub const FLIGHT_FUEL_KG_PER_1000KM: f64 = 2500.0;
/// Marginal fuel burned per passenger per 1000 km, in kg.
pub const PAX_FUEL_KG_PER_1000KM: f64 = 2.5;
/// kg of CO2 emitted per kg of jet fuel.
pub const CO2_PER_KG_FUEL: f64 = 3.16;
/// Social cost of carbon, USD per kg of CO2.
pub const SOCIAL_COST_USD_PER_KG: f64 = 0.215;

/// Quarterly one-way legs flown for a daily frequency.
pub fn legs_per_quarter(freq_per_day: f64) -> f64 {
    freq_per_day * DAYS_PER_QUARTER * LEGS_PER_FREQUENCY
}

pub fn is_short_haul(distance_km: f64) -> bool {
    distance_km <= SHORT_HAUL_MAX_KM
}
