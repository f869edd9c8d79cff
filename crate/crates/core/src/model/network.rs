//! Route networks, airline profiles, and consideration sets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{AirlineIdx, AirportIdx, CityIdx, Dataset, Quarter, RouteIdx};
use crate::error::{Result, SkyError};

/// Slack allowed when comparing summed frequencies against a cap.
pub const FREQ_TOL: f64 = 1e-9;

/// One airline's network: route to daily frequency.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub owner: AirlineIdx,
    pub freq: BTreeMap<RouteIdx, f64>,
}

impl Network {
    pub fn total_frequency(&self) -> f64 {
        self.freq.values().sum()
    }
}

/// Every airline's network in one quarter, keyed by (airline, route).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Networks {
    pub quarter: Option<Quarter>,
    #[serde(with = "entries")]
    pub freq: BTreeMap<(AirlineIdx, RouteIdx), f64>,
}

/// Serializes the frequency map as a list, since JSON keys must be strings.
mod entries {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::model::{AirlineIdx, RouteIdx};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        airline: AirlineIdx,
        route: RouteIdx,
        freq: f64,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<(AirlineIdx, RouteIdx), f64>, s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<Entry> = map
            .iter()
            .map(|(&(airline, route), &freq)| Entry { airline, route, freq })
            .collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(AirlineIdx, RouteIdx), f64>, D::Error> {
        let v = Vec::<Entry>::deserialize(d)?;
        Ok(v.into_iter().map(|e| ((e.airline, e.route), e.freq)).collect())
    }
}

impl Networks {
    /// Observed networks for a quarter.
    pub fn observed(ds: &Dataset, q: Quarter) -> Self {
        let freq = ds
            .products
            .iter()
            .filter(|p| p.quarter == q)
            .map(|p| ((p.airline, p.route), p.freq))
            .collect();
        Networks {
            quarter: Some(q),
            freq,
        }
    }

    pub fn of(&self, g: AirlineIdx) -> Network {
        Network {
            owner: g,
            freq: self
                .freq
                .range((g, RouteIdx(0))..=(g, RouteIdx(u32::MAX)))
                .map(|(&(_, r), &f)| (r, f))
                .collect(),
        }
    }

    pub fn get(&self, g: AirlineIdx, r: RouteIdx) -> Option<f64> {
        self.freq.get(&(g, r)).copied()
    }

    pub fn total_frequency(&self, g: AirlineIdx) -> f64 {
        self.freq
            .range((g, RouteIdx(0))..=(g, RouteIdx(u32::MAX)))
            .map(|(_, f)| f)
            .sum()
    }

    pub fn airlines(&self) -> BTreeSet<AirlineIdx> {
        self.freq.keys().map(|&(g, _)| g).collect()
    }
}

/// Airline attributes derived from its baseline network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AirlineProfile {
    pub airline: AirlineIdx,
    pub served_cities: BTreeSet<CityIdx>,
    /// Slot-controlled airports where the airline is active at baseline.
    pub slot_presence: BTreeSet<AirportIdx>,
    /// Flights per day summed over the network.
    pub total_frequency_cap: f64,
}

impl AirlineProfile {
    pub fn from_network(ds: &Dataset, net: &Network) -> Result<Self> {
        if net.owner.idx() >= ds.airlines.len() {
            return Err(SkyError::unknown("airline", net.owner.0.to_string()));
        }
        let mut served_cities = BTreeSet::new();
        let mut slot_presence = BTreeSet::new();
        for &r in net.freq.keys() {
            let route = ds.route(r);
            for ap in [route.a, route.b] {
                served_cities.insert(ds.airports[ap.idx()].city);
                if ds.airports[ap.idx()].slot_controlled {
                    slot_presence.insert(ap);
                }
            }
        }
        Ok(AirlineProfile {
            airline: net.owner,
            served_cities,
            slot_presence,
            total_frequency_cap: net.total_frequency(),
        })
    }

    /// Profile whose served cities are replaced by a merged city set.
    pub fn with_cities(&self, cities: BTreeSet<CityIdx>) -> Self {
        AirlineProfile {
            served_cities: cities,
            ..self.clone()
        }
    }
}

/// Routes an airline may operate: both endpoint cities served, and no
/// slot-controlled endpoint outside its slot presence. Sorted by route index.
pub fn consideration_set(ds: &Dataset, profile: &AirlineProfile) -> Vec<RouteIdx> {
    let mut out = Vec::new();
    let cities: Vec<CityIdx> = profile.served_cities.iter().copied().collect();
    for (i, &ca) in cities.iter().enumerate() {
        for &cb in &cities[i + 1..] {
            let Some(m) = ds.market_between(ca, cb) else {
                continue;
            };
            for &r in &ds.market(m).routes {
                if route_allowed(ds, profile, r) {
                    out.push(r);
                }
            }
        }
    }
    out.sort();
    out
}

/// Slot gate for a single route.
pub fn route_allowed(ds: &Dataset, profile: &AirlineProfile, r: RouteIdx) -> bool {
    let route = ds.route(r);
    [route.a, route.b].iter().all(|&ap| {
        !ds.airports[ap.idx()].slot_controlled || profile.slot_presence.contains(&ap)
    })
}

/// Home-country rule for redeploying from `from` to `to`.
pub fn switch_allowed(ds: &Dataset, g: AirlineIdx, from: RouteIdx, to: RouteIdx) -> bool {
    ds.home_endpoints(g, to) >= ds.home_endpoints(g, from)
}

/// Profiles for every airline with at least one route in `nets`.
pub fn profiles(ds: &Dataset, nets: &Networks) -> Result<BTreeMap<AirlineIdx, AirlineProfile>> {
    nets.airlines()
        .into_iter()
        .map(|g| Ok((g, AirlineProfile::from_network(ds, &nets.of(g))?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::dataset::fixtures::*;
    use crate::model::{CarrierType, DatasetParts};
    use proptest::prelude::*;

    fn observed(ds: &Dataset) -> Networks {
        Networks::observed(ds, Quarter::new(1).unwrap())
    }

    #[test]
    fn networks_roundtrip_through_json() {
        let ds = Dataset::build(four_city_parts()).unwrap();
        let nets = observed(&ds);
        assert!(!nets.freq.is_empty());
        let json = serde_json::to_string(&nets).unwrap();
        let back: Networks = serde_json::from_str(&json).unwrap();
        assert_eq!(back, nets);
    }

    #[test]
    fn two_city_airline_has_single_route() {
        let parts = DatasetParts {
            cities: vec![city("A", "XX", 1e6), city("B", "XX", 2e6), city("C", "XX", 3e6)],
            airports: vec![airport("a", "A", false), airport("b", "B", false), airport("c", "C", false)],
            airlines: vec![airline("G", CarrierType::LowCost, "XX")],
            distances: vec![dist("A", "B", 500.0), dist("A", "C", 700.0), dist("B", "C", 900.0)],
            products: vec![product("p", "G", "a", "b", 50.0, 1.0, 100.0)],
        };
        let mut parts = parts;
        parts.products[0].distance_km = 500.0;
        let ds = Dataset::build(parts).unwrap();
        let nets = observed(&ds);
        let prof = AirlineProfile::from_network(&ds, &nets.of(AirlineIdx(0))).unwrap();
        let cs = consideration_set(&ds, &prof);
        assert_eq!(cs, vec![ds.products[0].route]);
    }

    #[test]
    fn slot_airports_outside_presence_are_excluded() {
        let ds = Dataset::build(four_city_parts()).unwrap();
        let nets = observed(&ds);
        // G2 flies P1-P3 so it holds P1's slot; drop that route from its network.
        let g2 = ds.airline_by_id("G2").unwrap();
        let mut net = nets.of(g2);
        let p1 = ds.products.iter().find(|p| p.id == "p3").unwrap().route;
        net.freq.remove(&p1);
        let mut prof = AirlineProfile::from_network(&ds, &net).unwrap();
        prof.served_cities.insert(ds.airports[0].city);
        let cs = consideration_set(&ds, &prof);
        assert!(cs.iter().all(|&r| {
            let route = ds.route(r);
            route.a != AirportIdx(0) && route.b != AirportIdx(0)
        }));
    }

    /// Brute-force oracle: check the three rules independently on all routes.
    #[test]
    fn toy_consideration_matches_rule_enumeration() {
        let ds = Dataset::build(four_city_parts()).unwrap();
        let nets = observed(&ds);
        for g in nets.airlines() {
            let prof = AirlineProfile::from_network(&ds, &nets.of(g)).unwrap();
            let got: BTreeSet<RouteIdx> = consideration_set(&ds, &prof).into_iter().collect();
            let mut want = BTreeSet::new();
            for (i, route) in ds.routes.iter().enumerate() {
                let ca = ds.airports[route.a.idx()].city;
                let cb = ds.airports[route.b.idx()].city;
                let served = prof.served_cities.contains(&ca) && prof.served_cities.contains(&cb);
                let slot_ok = [route.a, route.b].iter().all(|a| {
                    !ds.airports[a.idx()].slot_controlled || prof.slot_presence.contains(a)
                });
                if served && slot_ok {
                    want.insert(RouteIdx(i as u32));
                }
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn home_rule_compares_endpoint_counts() {
        let ds = Dataset::build(four_city_parts()).unwrap();
        let g1 = ds.airline_by_id("G1").unwrap();
        let c = |a: &str, b: &str| {
            let ia = ds.airports.iter().position(|x| x.id == a).unwrap();
            let ib = ds.airports.iter().position(|x| x.id == b).unwrap();
            ds.route_between(AirportIdx(ia as u32), AirportIdx(ib as u32)).unwrap()
        };
        // P1-P2 is domestic for G1 (2 home endpoints); P3-P4 has none.
        assert!(!switch_allowed(&ds, g1, c("P1", "P2"), c("P3", "P4")));
        assert!(switch_allowed(&ds, g1, c("P3", "P4"), c("P1", "P2")));
        assert!(switch_allowed(&ds, g1, c("P1", "P3"), c("P2", "P3")));
    }

    proptest! {
        #[test]
        fn consideration_stays_inside_served_cities(mask in 0u8..16, slot_mask in 0u8..2) {
            let ds = Dataset::build(four_city_parts()).unwrap();
            let served: BTreeSet<CityIdx> = (0..4u32)
                .filter(|i| mask & (1 << i) != 0)
                .map(CityIdx)
                .collect();
            let slot_presence: BTreeSet<AirportIdx> =
                if slot_mask == 1 { [AirportIdx(0)].into() } else { BTreeSet::new() };
            let prof = AirlineProfile {
                airline: AirlineIdx(0),
                served_cities: served.clone(),
                slot_presence,
                total_frequency_cap: 1.0,
            };
            for r in consideration_set(&ds, &prof) {
                let (a, b) = ds.route_cities(r);
                prop_assert!(served.contains(&a) && served.contains(&b));
            }
        }
    }
}
