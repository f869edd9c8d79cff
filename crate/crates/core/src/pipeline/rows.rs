//! Flat CSV row types written by the pipeline stages.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub name: String,
    pub target: f64,
    pub actual: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub product_id: String,
    pub xi_hat: f64,
    pub omega_hat: f64,
    /// Recovered marginal cost, USD.
    pub mc_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefRow {
    pub equation: String,
    pub name: String,
    pub value: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub airline: String,
    pub quarter: u8,
    pub kind: String,
    pub observed_route: String,
    pub observed_freq: f64,
    pub alternative_route: String,
    pub alternative_freq: f64,
    pub delta_pi2_usd: f64,
    pub dz_constant: f64,
    pub dz_freq_distance: f64,
    pub dz_log_size: f64,
    pub dz_slots: f64,
    pub cell_market: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentCellRow {
    pub label: String,
    pub records: usize,
    /// Moment value at the least-squares centre, $10,000.
    pub value_at_centre: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub parameter: String,
    pub lower: f64,
    pub upper: f64,
    pub centre: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShockRow {
    pub draw: usize,
    pub run: usize,
    pub seed: u64,
    pub airline: String,
    pub route: String,
    pub freq: f64,
    pub kappa_usd: f64,
    pub lower_usd: Option<f64>,
    pub upper_usd: Option<f64>,
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub scenario: String,
    pub draw: usize,
    pub run: usize,
    pub seed: u64,
    pub ordering: String,
    pub converged: bool,
    pub iterations: usize,
    pub changes: usize,
    pub cycle_length: Option<usize>,
    pub routes: usize,
    pub passengers: f64,
    pub consumer_surplus: f64,
    pub net_profit: f64,
    pub distance_flown_km: f64,
    pub co2_kg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkRow {
    pub draw: usize,
    pub run: usize,
    pub ordering: String,
    pub airline: String,
    pub route: String,
    pub freq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketRow {
    pub draw: usize,
    pub run: usize,
    pub ordering: String,
    pub market: String,
    pub passengers: f64,
    pub consumer_surplus: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AirlineMetricRow {
    pub draw: usize,
    pub run: usize,
    pub ordering: String,
    pub group: String,
    pub airlines: usize,
    pub routes: usize,
    pub profit: f64,
    pub passengers: f64,
    pub mean_fare: f64,
    pub total_flights: f64,
    pub distance_flown_km: f64,
    pub fc_per_pax: f64,
    pub cost_per_pax: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuppiCsvRow {
    pub market: String,
    pub quarter: u8,
    pub product_id: String,
    pub airline: String,
    pub firms: usize,
    pub diversion: f64,
    pub partner_margin: f64,
    pub guppi: f64,
    pub upp: f64,
    pub efficiency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergerRunRow {
    pub draw: usize,
    pub run: usize,
    pub seed: u64,
    pub ordering: String,
    pub both_converged: bool,
    pub delta_passengers: f64,
    pub delta_consumer_surplus: f64,
    pub delta_net_profit: f64,
    pub delta_partner_net_profit: f64,
    pub delta_partner_routes: f64,
    pub delta_distance_flown_km: f64,
    pub delta_co2_kg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelfareRow {
    pub scenario: String,
    /// Run label (`draw/run/ordering`), or `mean`.
    pub run: String,
    pub group: String,
    pub cs_baseline: f64,
    pub delta_cs: f64,
    pub cs_change_pct: f64,
    pub delta_profit: f64,
    pub carbon_revenue: f64,
    pub social_co2_value: f64,
    pub welfare_gain: f64,
    pub passengers_baseline: f64,
    pub passengers: f64,
    pub co2_baseline_kg: f64,
    pub co2_kg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub row_country: String,
    pub col_country: String,
    /// `carbon` below and on the diagonal, `merger` above it.
    pub part: String,
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin: usize,
    pub distance_km: f64,
    pub mean_elasticity: f64,
    pub count: usize,
}
