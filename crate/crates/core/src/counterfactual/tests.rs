use std::collections::VecDeque;

use super::engine::cycle_start;
use super::*;
use crate::evaluator::testing::toy_model;
use crate::evaluator::{EvalSettings, Model};
use crate::model::dataset::fixtures::four_city_parts;
use crate::model::network::FREQ_TOL;
use crate::shocks::{DrawSource, ShockSampler};

const THETA: [f64; 4] = [2.0, 1.0, 0.3, 1.0];

fn setup() -> (Dataset, Model, ShockSampler, FrequencyGrid) {
    let ds = Dataset::build(four_city_parts()).unwrap();
    let model = toy_model(&ds, 0.03, 0.9, -4.0, 50.0);
    let sampler = ShockSampler::new(3, 6, DrawSource::Parametric { xi_sd: 0.3, omega_sd: 2.0 });
    (ds, model, sampler, FrequencyGrid::static_table())
}

fn baseline(ds: &Dataset) -> Networks {
    Networks::observed(ds, Quarter::new(1).unwrap())
}

#[test]
fn grid_minimum_with_empty_pool_cannot_cut_or_grow() {
    let (ds, model, sampler, grid) = setup();
    let ev = Evaluator::new(&ds, &model, &sampler, EvalSettings::plain(&ds)).unwrap();
    let mut base = baseline(&ds);
    let (g, r) = *base.freq.keys().next().unwrap();
    let lowest = grid.frequency_support(&ds, ds.market_of(r)).unwrap()[0];
    base.freq.insert((g, r), lowest);
    let world = World::new(&ev, &grid, scenario_params(ScenarioName::Base), FixedCostParams::new(THETA), &base).unwrap();
    let cands = feasible_deviations(&world, &base, g, r, 0.0).unwrap();
    assert_eq!(cands[0].kind, MoveKind::FullExit);
    assert_eq!(cands.iter().filter(|c| c.kind == MoveKind::FullExit).count(), 1);
    for c in &cands {
        assert!(!matches!(c.kind, MoveKind::PartialExit | MoveKind::Increase | MoveKind::PartialSwitch));
        if let Some((_, x)) = c.target {
            assert!(x <= lowest + FREQ_TOL);
        }
        assert!(c.pool_change() >= -FREQ_TOL);
    }
}

#[test]
fn increases_are_bounded_by_pool() {
    let (ds, model, sampler, grid) = setup();
    let ev = Evaluator::new(&ds, &model, &sampler, EvalSettings::plain(&ds)).unwrap();
    let base = baseline(&ds);
    let world = World::new(&ev, &grid, scenario_params(ScenarioName::Base), FixedCostParams::new(THETA), &base).unwrap();
    for (&(g, r), &f) in &base.freq {
        let support = grid.frequency_support(&ds, ds.market_of(r)).unwrap();
        let cands = feasible_deviations(&world, &base, g, r, 2.0).unwrap();
        let mut got: Vec<f64> = cands
            .iter()
            .filter(|c| c.kind == MoveKind::Increase)
            .map(|c| c.remaining)
            .collect();
        got.sort_by(f64::total_cmp);
        let want: Vec<f64> = support
            .iter()
            .copied()
            .filter(|&x| x > f + FREQ_TOL && x <= f + 2.0 + FREQ_TOL)
            .collect();
        assert_eq!(got, want);
        for c in &cands {
            assert!(c.pool_change() >= -2.0 - FREQ_TOL);
        }
    }
}

#[test]
fn switch_targets_lie_in_served_markets() {
    let (ds, model, sampler, grid) = setup();
    let ev = Evaluator::new(&ds, &model, &sampler, EvalSettings::plain(&ds)).unwrap();
    let base = baseline(&ds);
    let world = World::new(&ev, &grid, scenario_params(ScenarioName::Base), FixedCostParams::new(THETA), &base).unwrap();
    let served: std::collections::BTreeSet<MarketIdx> = base.freq.keys().map(|&(_, r)| ds.market_of(r)).collect();
    for &(g, r) in base.freq.keys() {
        for c in feasible_deviations(&world, &base, g, r, 0.0).unwrap() {
            if let Some((alt, _)) = c.target {
                assert!(served.contains(&ds.market_of(alt)));
                assert!(base.get(g, alt).is_none());
                assert!(world.considered[&g].contains(&alt));
            }
        }
    }
}

#[test]
fn rationalized_baseline_is_stable() {
    let (ds, model, sampler, grid) = setup();
    let ev = Evaluator::new(&ds, &model, &sampler, EvalSettings::plain(&ds)).unwrap();
    let base = baseline(&ds);
    let world = World::new(&ev, &grid, scenario_params(ScenarioName::Base), FixedCostParams::new(THETA), &base).unwrap();
    for seed in 0..5 {
        let ledger = rationalize_shocks(&world, &base, seed).unwrap();
        assert!(!ledger.is_empty());
        assert!(verify_stable(&world, &ledger, &base).unwrap().is_empty());
        for order in EvalOrder::ALL {
            let config = SimConfig {
                ordering: order,
                seed,
                ..SimConfig::default()
            };
            let out = simulate(&world, &ledger, &base, &config).unwrap();
            assert!(out.converged);
            assert_eq!(out.total_changes(), 0);
            assert_eq!(out.network, base);
        }
    }
}

#[test]
fn unrationalized_shocks_can_move_the_network() {
    // A large constant makes every route unprofitable, so everything exits.
    let (ds, model, sampler, grid) = setup();
    let ev = Evaluator::new(&ds, &model, &sampler, EvalSettings::plain(&ds)).unwrap();
    let base = baseline(&ds);
    let theta = FixedCostParams::new([1e6, 0.0, 0.0, 0.0]);
    let world = World::new(&ev, &grid, scenario_params(ScenarioName::Base), theta, &base).unwrap();
    let ledger = ShockLedger::unconstrained(0, world.quarter, theta, vec![0.0; ds.airlines.len()]);
    let out = simulate(&world, &ledger, &base, &SimConfig::default()).unwrap();
    assert!(out.converged);
    assert!(out.network.freq.is_empty());
    assert_eq!(out.changes[0], base.freq.len());
    assert_eq!(out.stats.total_passengers(), 0.0);
}

#[test]
fn fleets_never_grow() {
    let (ds, model, sampler, grid) = setup();
    let base = baseline(&ds);
    let ev0 = Evaluator::new(&ds, &model, &sampler, EvalSettings::plain(&ds)).unwrap();
    let world0 = World::new(&ev0, &grid, scenario_params(ScenarioName::Base), FixedCostParams::new(THETA), &base).unwrap();
    let ledger = rationalize_shocks(&world0, &base, 7).unwrap();
    let uh = scenario_params(ScenarioName::Uh);
    let ev = Evaluator::new(&ds, &model, &sampler, uh.settings(&EvalSettings::plain(&ds))).unwrap();
    let world = World::new(&ev, &grid, uh, FixedCostParams::new(THETA), &base).unwrap();
    let mut state = base.clone();
    for it in 0..5 {
        let moves = best_response_pass(&world, &ledger, &mut state, EvalOrder::ProfitDesc, 7, it).unwrap();
        for g in base.airlines() {
            assert!(state.total_frequency(g) <= base.total_frequency(g) + 1e-9);
        }
        if moves.is_empty() {
            break;
        }
    }
}

#[test]
fn simulation_is_deterministic() {
    let (ds, model, sampler, grid) = setup();
    let base = baseline(&ds);
    let ev0 = Evaluator::new(&ds, &model, &sampler, EvalSettings::plain(&ds)).unwrap();
    let world0 = World::new(&ev0, &grid, scenario_params(ScenarioName::Base), FixedCostParams::new(THETA), &base).unwrap();
    let ledger = rationalize_shocks(&world0, &base, 11).unwrap();
    let again = rationalize_shocks(&world0, &base, 11).unwrap();
    assert_eq!(ledger, again);
    let high = scenario_params(ScenarioName::High);
    let run = || {
        let ev = Evaluator::new(&ds, &model, &sampler, high.settings(&EvalSettings::plain(&ds))).unwrap();
        let world = World::new(&ev, &grid, high, FixedCostParams::new(THETA), &base).unwrap();
        let config = SimConfig {
            ordering: EvalOrder::Random,
            seed: 11,
            ..SimConfig::default()
        };
        simulate(&world, &ledger, &base, &config).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn surcharge_raises_prices_and_cuts_traffic() {
    let (ds, model, sampler, grid) = setup();
    let base = baseline(&ds);
    let theta = FixedCostParams::new(THETA);
    let plain = EvalSettings::plain(&ds);
    let ev0 = Evaluator::new(&ds, &model, &sampler, plain.clone()).unwrap();
    let uh = scenario_params(ScenarioName::Uh);
    let ev1 = Evaluator::new(&ds, &model, &sampler, uh.settings(&plain)).unwrap();
    let w0 = World::new(&ev0, &grid, scenario_params(ScenarioName::Base), theta, &base).unwrap();
    let w1 = World::new(&ev1, &grid, uh, theta, &base).unwrap();
    let ledger = ShockLedger::unconstrained(0, w0.quarter, theta, vec![0.0; ds.airlines.len()]);
    let s0 = OutcomeStats::compute(&w0, &ledger, &base).unwrap();
    let s1 = OutcomeStats::compute(&w1, &ledger, &base).unwrap();
    assert!(s1.total_passengers() < s0.total_passengers());
    assert!(s1.consumer_surplus() < s0.consumer_surplus());
    for (a, b) in s0.products.iter().zip(&s1.products) {
        assert!(b.revenue / b.passengers > a.revenue / a.passengers);
        assert!(b.fixed_cost > a.fixed_cost);
    }
}

#[test]
fn cycle_detection_finds_period_two() {
    let (ds, _, _, _) = setup();
    let a = baseline(&ds);
    let mut b = a.clone();
    let k = *b.freq.keys().next().unwrap();
    b.freq.remove(&k);
    let history: VecDeque<Networks> = VecDeque::from([a.clone(), b.clone()]);
    assert_eq!(cycle_start(&history, &a), Some(0));
    assert_eq!(cycle_start(&history, &b), Some(1));
    let mut c = a.clone();
    c.freq.insert(k, 99.0);
    assert_eq!(cycle_start(&history, &c), None);
}

#[test]
fn cycle_statistics_are_state_means() {
    let (ds, model, sampler, grid) = setup();
    let ev = Evaluator::new(&ds, &model, &sampler, EvalSettings::plain(&ds)).unwrap();
    let a = baseline(&ds);
    let theta = FixedCostParams::new(THETA);
    let world = World::new(&ev, &grid, scenario_params(ScenarioName::Base), theta, &a).unwrap();
    let mut b = a.clone();
    let k = *b.freq.keys().next().unwrap();
    b.freq.remove(&k);
    let ledger = ShockLedger::unconstrained(0, world.quarter, theta, vec![0.0; ds.airlines.len()]);
    let sa = OutcomeStats::compute(&world, &ledger, &a).unwrap();
    let sb = OutcomeStats::compute(&world, &ledger, &b).unwrap();
    let m = OutcomeStats::mean(&[sa.clone(), sb.clone()]);
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * y.abs().max(1.0);
    assert!(close(m.total_passengers(), 0.5 * (sa.total_passengers() + sb.total_passengers())));
    assert!(close(m.consumer_surplus(), 0.5 * (sa.consumer_surplus() + sb.consumer_surplus())));
    assert!(close(m.distance_flown(&ds), 0.5 * (sa.distance_flown(&ds) + sb.distance_flown(&ds))));
}
