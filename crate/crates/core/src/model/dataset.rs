use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{
    market_size, Airline, AirlineIdx, Airport, AirportIdx, City, CityIdx, Market, MarketIdx,
    Product, Quarter, Route, RouteIdx,
};
use crate::error::{Result, SkyError};

/// Upper bound on a plausible one-way fare in USD.
const MAX_FARE_USD: f64 = 5_000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawAirport {
    pub id: String,
    pub city_id: String,
    pub slot_controlled: bool,
    pub major: bool,
    pub hub_of: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawProduct {
    pub id: String,
    pub airline: String,
    pub airport_a: String,
    pub airport_b: String,
    pub quarter: u8,
    pub fare_usd: f64,
    pub freq_per_day: f64,
    pub passengers: f64,
    pub distance_km: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawDistance {
    pub city_a: String,
    pub city_b: String,
    pub distance_km: f64,
}

/// Unresolved dataset content as read from CSV or produced by the generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetParts {
    pub cities: Vec<City>,
    pub airports: Vec<RawAirport>,
    pub airlines: Vec<Airline>,
    pub distances: Vec<RawDistance>,
    pub products: Vec<RawProduct>,
}

/// Validated dataset with the derived route and market index.
///
/// Entities are sorted by id so that indices, and therefore every downstream
/// output, do not depend on input row order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub cities: Vec<City>,
    pub airports: Vec<Airport>,
    pub airlines: Vec<Airline>,
    pub routes: Vec<Route>,
    pub markets: Vec<Market>,
    pub products: Vec<Product>,
    city_airports: Vec<Vec<AirportIdx>>,
    route_lookup: HashMap<(AirportIdx, AirportIdx), RouteIdx>,
    market_lookup: HashMap<(CityIdx, CityIdx), MarketIdx>,
    by_market_quarter: BTreeMap<(Quarter, MarketIdx), Vec<usize>>,
    quarters: Vec<Quarter>,
}

impl Dataset {
    /// Resolves references, validates every row, and builds the index.
    pub fn build(parts: DatasetParts) -> Result<Self> {
        let mut errs: Vec<String> = Vec::new();

        let mut cities = parts.cities;
        cities.sort_by(|a, b| a.id.cmp(&b.id));
        for w in cities.windows(2) {
            if w[0].id == w[1].id {
                errs.push(format!("cities: duplicate id `{}`", w[0].id));
            }
        }
        for c in &cities {
            if !(c.population > 0.0) || !c.population.is_finite() {
                errs.push(format!("cities[{}]: population must be > 0", c.id));
            }
            if c.country.trim().is_empty() {
                errs.push(format!("cities[{}]: empty country", c.id));
            }
        }
        let city_ix: HashMap<&str, CityIdx> = cities
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id.as_str(), CityIdx(i as u32)))
            .collect();

        let mut airlines = parts.airlines;
        airlines.sort_by(|a, b| a.id.cmp(&b.id));
        for w in airlines.windows(2) {
            if w[0].id == w[1].id {
                errs.push(format!("airlines: duplicate id `{}`", w[0].id));
            }
        }
        let airline_ix: HashMap<&str, AirlineIdx> = airlines
            .iter()
            .enumerate()
            .map(|(i, a)| (a.id.as_str(), AirlineIdx(i as u32)))
            .collect();

        let mut raw_airports = parts.airports;
        raw_airports.sort_by(|a, b| a.id.cmp(&b.id));
        for w in raw_airports.windows(2) {
            if w[0].id == w[1].id {
                errs.push(format!("airports: duplicate id `{}`", w[0].id));
            }
        }
        let mut airports = Vec::with_capacity(raw_airports.len());
        for a in &raw_airports {
            let city = match city_ix.get(a.city_id.as_str()) {
                Some(&c) => c,
                None => {
                    errs.push(format!(
                        "airports[{}]: unknown city `{}`",
                        a.id, a.city_id
                    ));
                    CityIdx(0)
                }
            };
            let hub_of = match a.hub_of.as_deref().map(str::trim) {
                None | Some("") => None,
                Some(h) => match airline_ix.get(h) {
                    Some(&g) => Some(g),
                    None => {
                        errs.push(format!("airports[{}]: unknown hub airline `{h}`", a.id));
                        None
                    }
                },
            };
            airports.push(Airport {
                id: a.id.clone(),
                city,
                slot_controlled: a.slot_controlled,
                major: a.major,
                hub_of,
            });
        }
        let airport_ix: HashMap<&str, AirportIdx> = airports
            .iter()
            .enumerate()
            .map(|(i, a)| (a.id.as_str(), AirportIdx(i as u32)))
            .collect();

        // City-pair distances: explicit table first, product rows fill gaps.
        let mut dist: BTreeMap<(CityIdx, CityIdx), f64> = BTreeMap::new();
        for (row, d) in parts.distances.iter().enumerate() {
            let (Some(&ca), Some(&cb)) = (
                city_ix.get(d.city_a.as_str()),
                city_ix.get(d.city_b.as_str()),
            ) else {
                errs.push(format!(
                    "distances row {}: unknown city pair `{}`-`{}`",
                    row + 1,
                    d.city_a,
                    d.city_b
                ));
                continue;
            };
            if ca == cb {
                errs.push(format!("distances row {}: identical endpoints", row + 1));
                continue;
            }
            if !(d.distance_km > 0.0) || !d.distance_km.is_finite() {
                errs.push(format!("distances row {}: distance must be > 0", row + 1));
                continue;
            }
            dist.insert(ordered(ca, cb), d.distance_km);
        }

        let mut raw_products = parts.products;
        raw_products.sort_by(|a, b| a.id.cmp(&b.id));
        for w in raw_products.windows(2) {
            if w[0].id == w[1].id {
                errs.push(format!("products: duplicate id `{}`", w[0].id));
            }
        }
        struct Resolved {
            airline: AirlineIdx,
            a: AirportIdx,
            b: AirportIdx,
            quarter: Quarter,
        }
        let mut resolved: Vec<Option<Resolved>> = Vec::with_capacity(raw_products.len());
        for p in &raw_products {
            let tag = format!("products[{}]", p.id);
            let mut ok = true;
            let airline = airline_ix.get(p.airline.as_str()).copied();
            if airline.is_none() {
                errs.push(format!("{tag}: unknown airline `{}`", p.airline));
                ok = false;
            }
            let a = airport_ix.get(p.airport_a.as_str()).copied();
            let b = airport_ix.get(p.airport_b.as_str()).copied();
            if a.is_none() {
                errs.push(format!("{tag}: unknown airport `{}`", p.airport_a));
                ok = false;
            }
            if b.is_none() {
                errs.push(format!("{tag}: unknown airport `{}`", p.airport_b));
                ok = false;
            }
            let quarter = Quarter::new(p.quarter).ok();
            if quarter.is_none() {
                errs.push(format!("{tag}: quarter {} outside 1..=4", p.quarter));
                ok = false;
            }
            if !(p.fare_usd > 0.0 && p.fare_usd <= MAX_FARE_USD) {
                errs.push(format!(
                    "{tag}: fare {} USD outside (0, {MAX_FARE_USD}]",
                    p.fare_usd
                ));
                ok = false;
            }
            if !(p.freq_per_day > 0.0) || !p.freq_per_day.is_finite() {
                errs.push(format!("{tag}: frequency must be > 0"));
                ok = false;
            }
            if !(p.passengers >= 0.0) || !p.passengers.is_finite() {
                errs.push(format!("{tag}: passengers must be >= 0"));
                ok = false;
            }
            if !(p.distance_km > 0.0) || !p.distance_km.is_finite() {
                errs.push(format!("{tag}: distance must be > 0"));
                ok = false;
            }
            if let (Some(a), Some(b)) = (a, b) {
                let (ca, cb) = (airports[a.idx()].city, airports[b.idx()].city);
                if a == b {
                    errs.push(format!("{tag}: identical endpoints"));
                    ok = false;
                } else if ca == cb {
                    errs.push(format!("{tag}: endpoints in the same city"));
                    ok = false;
                } else if p.distance_km > 0.0 {
                    dist.entry(ordered(ca, cb)).or_insert(p.distance_km);
                }
            }
            resolved.push(if ok {
                Some(Resolved {
                    airline: airline.unwrap(),
                    a: a.unwrap(),
                    b: b.unwrap(),
                    quarter: quarter.unwrap(),
                })
            } else {
                None
            });
        }

        if !errs.is_empty() {
            return Err(SkyError::Validation { messages: errs });
        }

        let mut city_airports = vec![Vec::new(); cities.len()];
        for (i, a) in airports.iter().enumerate() {
            city_airports[a.city.idx()].push(AirportIdx(i as u32));
        }

        let mut markets = Vec::new();
        let mut market_lookup = HashMap::new();
        for (&(ca, cb), &d) in &dist {
            let size = market_size(cities[ca.idx()].population, cities[cb.idx()].population)?;
            market_lookup.insert((ca, cb), MarketIdx(markets.len() as u32));
            markets.push(Market {
                a: ca,
                b: cb,
                size,
                distance_km: d,
                routes: Vec::new(),
            });
        }

        let mut routes = Vec::new();
        let mut route_lookup = HashMap::new();
        for i in 0..airports.len() {
            for j in i + 1..airports.len() {
                let (ai, aj) = (AirportIdx(i as u32), AirportIdx(j as u32));
                let (ci, cj) = (airports[i].city, airports[j].city);
                if ci == cj {
                    continue;
                }
                let Some(&m) = market_lookup.get(&ordered(ci, cj)) else {
                    continue;
                };
                let r = RouteIdx(routes.len() as u32);
                let slots = airports[i].slot_controlled as u8 + airports[j].slot_controlled as u8;
                routes.push(Route {
                    a: ai,
                    b: aj,
                    market: m,
                    distance_km: markets[m.idx()].distance_km,
                    slot_airports: slots,
                });
                markets[m.idx()].routes.push(r);
                route_lookup.insert((ai, aj), r);
            }
        }

        let mut products = Vec::with_capacity(raw_products.len());
        let mut seen: BTreeSet<(AirlineIdx, RouteIdx, Quarter)> = BTreeSet::new();
        for (p, res) in raw_products.iter().zip(resolved) {
            let res = res.expect("validated above");
            let key = if res.a < res.b {
                (res.a, res.b)
            } else {
                (res.b, res.a)
            };
            let route = route_lookup[&key];
            if !seen.insert((res.airline, route, res.quarter)) {
                errs.push(format!(
                    "products[{}]: duplicate airline/route/quarter combination",
                    p.id
                ));
            }
            let rd = routes[route.idx()].distance_km;
            if (rd - p.distance_km).abs() > 1.0 + 1e-3 * rd {
                log::warn!(
                    "products[{}]: distance {} km differs from city-pair distance {} km",
                    p.id,
                    p.distance_km,
                    rd
                );
            }
            products.push(Product {
                id: p.id.clone(),
                airline: res.airline,
                route,
                quarter: res.quarter,
                fare: p.fare_usd,
                freq: p.freq_per_day,
                passengers: p.passengers,
            });
        }

        let mut by_market_quarter: BTreeMap<(Quarter, MarketIdx), Vec<usize>> = BTreeMap::new();
        for (i, p) in products.iter().enumerate() {
            let m = routes[p.route.idx()].market;
            by_market_quarter.entry((p.quarter, m)).or_default().push(i);
        }
        for (&(q, m), idxs) in &by_market_quarter {
            let total: f64 = idxs.iter().map(|&i| products[i].passengers).sum();
            if total >= markets[m.idx()].size {
                errs.push(format!(
                    "market {}-{} quarter {}: passengers exceed market size",
                    cities[markets[m.idx()].a.idx()].id,
                    cities[markets[m.idx()].b.idx()].id,
                    q.get()
                ));
            }
        }
        if !errs.is_empty() {
            return Err(SkyError::Validation { messages: errs });
        }
        let quarters: BTreeSet<Quarter> = products.iter().map(|p| p.quarter).collect();

        Ok(Dataset {
            cities,
            airports,
            airlines,
            routes,
            markets,
            products,
            city_airports,
            route_lookup,
            market_lookup,
            by_market_quarter,
            quarters: quarters.into_iter().collect(),
        })
    }

    /// Rebuilds the unresolved parts (inverse of [`Dataset::build`]).
    pub fn to_parts(&self) -> DatasetParts {
        let airports = self
            .airports
            .iter()
            .map(|a| RawAirport {
                id: a.id.clone(),
                city_id: self.cities[a.city.idx()].id.clone(),
                slot_controlled: a.slot_controlled,
                major: a.major,
                hub_of: a.hub_of.map(|g| self.airlines[g.idx()].id.clone()),
            })
            .collect();
        let distances = self
            .markets
            .iter()
            .map(|m| RawDistance {
                city_a: self.cities[m.a.idx()].id.clone(),
                city_b: self.cities[m.b.idx()].id.clone(),
                distance_km: m.distance_km,
            })
            .collect();
        let products = self
            .products
            .iter()
            .map(|p| {
                let r = &self.routes[p.route.idx()];
                RawProduct {
                    id: p.id.clone(),
                    airline: self.airlines[p.airline.idx()].id.clone(),
                    airport_a: self.airports[r.a.idx()].id.clone(),
                    airport_b: self.airports[r.b.idx()].id.clone(),
                    quarter: p.quarter.get(),
                    fare_usd: p.fare,
                    freq_per_day: p.freq,
                    passengers: p.passengers,
                    distance_km: r.distance_km,
                }
            })
            .collect();
        DatasetParts {
            cities: self.cities.clone(),
            airports,
            airlines: self.airlines.clone(),
            distances,
            products,
        }
    }

    pub fn route(&self, r: RouteIdx) -> &Route {
        &self.routes[r.idx()]
    }

    pub fn market(&self, m: MarketIdx) -> &Market {
        &self.markets[m.idx()]
    }

    pub fn market_of(&self, r: RouteIdx) -> MarketIdx {
        self.routes[r.idx()].market
    }

    /// Route between two airports, in either order.
    pub fn route_between(&self, a: AirportIdx, b: AirportIdx) -> Option<RouteIdx> {
        let key = if a < b { (a, b) } else { (b, a) };
        self.route_lookup.get(&key).copied()
    }

    pub fn market_between(&self, a: CityIdx, b: CityIdx) -> Option<MarketIdx> {
        self.market_lookup.get(&ordered(a, b)).copied()
    }

    pub fn airports_of(&self, c: CityIdx) -> &[AirportIdx] {
        &self.city_airports[c.idx()]
    }

    pub fn route_cities(&self, r: RouteIdx) -> (CityIdx, CityIdx) {
        let route = &self.routes[r.idx()];
        (
            self.airports[route.a.idx()].city,
            self.airports[route.b.idx()].city,
        )
    }

    /// Count of route endpoints located in the airline's home country.
    pub fn home_endpoints(&self, airline: AirlineIdx, r: RouteIdx) -> u8 {
        let home = &self.airlines[airline.idx()].home_country;
        let (a, b) = self.route_cities(r);
        (self.cities[a.idx()].country == *home) as u8 + (self.cities[b.idx()].country == *home) as u8
    }

    pub fn major_endpoints(&self, r: RouteIdx) -> u8 {
        let route = &self.routes[r.idx()];
        self.airports[route.a.idx()].major as u8 + self.airports[route.b.idx()].major as u8
    }

    pub fn touches_hub(&self, airline: AirlineIdx, r: RouteIdx) -> bool {
        let route = &self.routes[r.idx()];
        self.airports[route.a.idx()].hub_of == Some(airline)
            || self.airports[route.b.idx()].hub_of == Some(airline)
    }

    pub fn quarters(&self) -> &[Quarter] {
        &self.quarters
    }

    /// Product indices grouped by (quarter, market), in deterministic order.
    pub fn market_quarters(&self) -> impl Iterator<Item = (Quarter, MarketIdx, &[usize])> {
        self.by_market_quarter
            .iter()
            .map(|(&(q, m), v)| (q, m, v.as_slice()))
    }

    pub fn products_in(&self, q: Quarter, m: MarketIdx) -> &[usize] {
        self.by_market_quarter
            .get(&(q, m))
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn airline_by_id(&self, id: &str) -> Result<AirlineIdx> {
        self.airlines
            .iter()
            .position(|a| a.id == id || a.code == id)
            .map(|i| AirlineIdx(i as u32))
            .ok_or_else(|| SkyError::unknown("airline", id))
    }

    /// Route label `A-B` using airport ids.
    pub fn route_label(&self, r: RouteIdx) -> String {
        let route = &self.routes[r.idx()];
        format!(
            "{}-{}",
            self.airports[route.a.idx()].id,
            self.airports[route.b.idx()].id
        )
    }

    pub fn market_label(&self, m: MarketIdx) -> String {
        let mk = &self.markets[m.idx()];
        format!("{}-{}", self.cities[mk.a.idx()].id, self.cities[mk.b.idx()].id)
    }

    /// Observed shares for the products of one market-quarter: (inside, within, outside).
    pub fn observed_shares(&self, q: Quarter, m: MarketIdx) -> (Vec<f64>, Vec<f64>, f64) {
        let idxs = self.products_in(q, m);
        let size = self.markets[m.idx()].size;
        let inside: Vec<f64> = idxs
            .iter()
            .map(|&i| self.products[i].passengers / size)
            .collect();
        let total: f64 = inside.iter().sum();
        let within = inside.iter().map(|s| s / total).collect();
        (inside, within, 1.0 - total)
    }
}

fn ordered(a: CityIdx, b: CityIdx) -> (CityIdx, CityIdx) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::model::CarrierType;

    pub fn city(id: &str, country: &str, pop: f64) -> City {
        City {
            id: id.into(),
            name: id.into(),
            country: country.into(),
            population: pop,
        }
    }

    pub fn airport(id: &str, city: &str, slot: bool) -> RawAirport {
        RawAirport {
            id: id.into(),
            city_id: city.into(),
            slot_controlled: slot,
            major: slot,
            hub_of: None,
        }
    }

    pub fn airline(id: &str, t: CarrierType, home: &str) -> Airline {
        Airline {
            id: id.into(),
            code: id.into(),
            carrier_type: t,
            home_country: home.into(),
        }
    }

    pub fn product(id: &str, airline: &str, a: &str, b: &str, fare: f64, freq: f64, pax: f64) -> RawProduct {
        RawProduct {
            id: id.into(),
            airline: airline.into(),
            airport_a: a.into(),
            airport_b: b.into(),
            quarter: 1,
            fare_usd: fare,
            freq_per_day: freq,
            passengers: pax,
            distance_km: 0.0,
        }
    }

    pub fn dist(a: &str, b: &str, d: f64) -> RawDistance {
        RawDistance {
            city_a: a.into(),
            city_b: b.into(),
            distance_km: d,
        }
    }

    /// Four cities in two countries, one airport each, all pairs 800-2000 km.
    pub fn four_city_parts() -> DatasetParts {
        let cities = vec![
            city("C1", "AA", 4.0e6),
            city("C2", "AA", 2.0e6),
            city("C3", "BB", 3.0e6),
            city("C4", "BB", 1.0e6),
        ];
        let airports = vec![
            airport("P1", "C1", true),
            airport("P2", "C2", false),
            airport("P3", "C3", false),
            airport("P4", "C4", false),
        ];
        let airlines = vec![
            airline("G1", CarrierType::FullService, "AA"),
            airline("G2", CarrierType::LowCost, "BB"),
        ];
        let distances = vec![
            dist("C1", "C2", 800.0),
            dist("C1", "C3", 1200.0),
            dist("C1", "C4", 1600.0),
            dist("C2", "C3", 900.0),
            dist("C2", "C4", 2000.0),
            dist("C3", "C4", 1000.0),
        ];
        let mut products = vec![
            product("p1", "G1", "P1", "P2", 120.0, 2.0, 30_000.0),
            product("p2", "G1", "P1", "P3", 140.0, 4.0 / 7.0, 12_000.0),
            product("p3", "G2", "P1", "P3", 60.0, 2.0 / 7.0, 9_000.0),
            product("p4", "G2", "P3", "P4", 55.0, 1.0 / 7.0, 4_000.0),
        ];
        for (p, d) in products.iter_mut().zip([800.0, 1200.0, 1200.0, 1000.0]) {
            p.distance_km = d;
        }
        DatasetParts {
            cities,
            airports,
            airlines,
            distances,
            products,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn builds_index() {
        let ds = Dataset::build(four_city_parts()).unwrap();
        assert_eq!(ds.markets.len(), 6);
        assert_eq!(ds.routes.len(), 6);
        assert_eq!(ds.products.len(), 4);
        let r = ds.products[0].route;
        assert_eq!(ds.route(r).distance_km, 800.0);
        assert_eq!(ds.route(r).slot_airports, 1);
        let m = ds.market_of(r);
        assert!((ds.market(m).size - (8.0e12f64).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn routes_are_direction_free() {
        let ds = Dataset::build(four_city_parts()).unwrap();
        let a = AirportIdx(0);
        let b = AirportIdx(2);
        assert_eq!(ds.route_between(a, b), ds.route_between(b, a));
    }

    #[test]
    fn missing_airport_names_row() {
        let mut parts = four_city_parts();
        parts.products[1].airport_b = "XX".into();
        let err = Dataset::build(parts).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("products[p2]"), "{msg}");
        assert!(msg.contains("XX"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn negative_fare_fails_validation() {
        let mut parts = four_city_parts();
        parts.products[0].fare_usd = -5.0;
        let err = Dataset::build(parts).unwrap_err();
        assert!(matches!(err, SkyError::Validation { .. }));
    }

    #[test]
    fn roundtrips_through_parts() {
        let ds = Dataset::build(four_city_parts()).unwrap();
        let again = Dataset::build(ds.to_parts()).unwrap();
        assert_eq!(ds.products, again.products);
        assert_eq!(ds.routes, again.routes);
        assert_eq!(ds.markets, again.markets);
    }

    #[test]
    fn row_order_does_not_matter() {
        let mut parts = four_city_parts();
        parts.products.reverse();
        parts.cities.reverse();
        parts.airports.reverse();
        let a = Dataset::build(four_city_parts()).unwrap();
        let b = Dataset::build(parts).unwrap();
        assert_eq!(a.products, b.products);
        assert_eq!(a.routes, b.routes);
    }
}
