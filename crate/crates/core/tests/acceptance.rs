//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line and then asserts. Run with `--release --nocapture` to see the lines;
//! the long Monte Carlo checks take a few minutes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use skyquil::config::{ParameterSource, PipelineConfig};
use skyquil::counterfactual::carbon::{carbon_accounting, flight_co2_kg};
use skyquil::counterfactual::{
    rationalize_shocks, scenario_params, simulate, EvalOrder, ScenarioName, SimConfig, World,
};
use skyquil::datagen::{generate, SyntheticConfig};
use skyquil::demand::{diversion_ratio, diversion_to_outside, invert_demand, market_shares, share_jacobian};
use skyquil::estimation::{estimate_demand, IvSpec};
use skyquil::evaluator::{EvalSettings, Evaluator};
use skyquil::fixedcost::clr::clr_stat;
use skyquil::fixedcost::region::test_point;
use skyquil::fixedcost::{enumerate_deviations, CellScheme, CovarianceKind, SufficientStats};
use skyquil::io::read_json;
use skyquil::linalg::{mean, sample_std};
use skyquil::model::grid::FrequencyGrid;
use skyquil::model::network::Networks;
use skyquil::model::Quarter;
use skyquil::pipeline::{identity_residual, Pipeline, ReportKind, RunManifest, Workspace, MANIFEST_FILE};
use skyquil::pricing::{
    capacity_penalty, recover_marginal_costs, solve_prices, MarketInputs, OwnershipMatrix, SolverOptions,
};
use skyquil::shocks::{DrawSource, ShockSampler};
use skyquil::welfare::{welfare_report, Segment, WelfareLedger};

fn verdict(n: u32, ok: bool, detail: &str) -> bool {
    println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

struct RandomMarket {
    utility: Vec<f64>,
    mc: Vec<f64>,
    freq: Vec<f64>,
    owners: Vec<usize>,
    alpha: f64,
    lambda: f64,
    size: f64,
}

fn random_market(rng: &mut ChaCha8Rng, n: usize) -> RandomMarket {
    let alpha = rng.random_range(0.005..0.08);
    let firms = rng.random_range(1..=n);
    RandomMarket {
        utility: (0..n).map(|_| rng.random_range(-1.0..4.0)).collect(),
        mc: (0..n).map(|_| rng.random_range(40.0..300.0)).collect(),
        freq: (0..n).map(|_| rng.random_range(1.0..8.0)).collect(),
        owners: (0..n).map(|_| rng.random_range(0..firms)).collect(),
        alpha,
        lambda: rng.random_range(0.15..=1.0),
        size: rng.random_range(2_000.0..200_000.0),
    }
}

#[test]
fn criterion_01_demand_core() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (mut norm, mut inv, mut jac) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(1..=10);
        let alpha = rng.random_range(0.005..0.08);
        let lambda = rng.random_range(0.1..=1.0);
        let xb: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..6.0)).collect();
        let xi: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let prices: Vec<f64> = (0..n).map(|_| rng.random_range(50.0..400.0)).collect();
        let deltas = |p: &[f64]| -> Vec<f64> { (0..n).map(|j| xb[j] + xi[j] - alpha * p[j]).collect() };
        let s = market_shares(&deltas(&prices), lambda).unwrap();

        norm = norm.max((s.inside.iter().sum::<f64>() + s.outside - 1.0).abs());

        let back = invert_demand(&s.inside, &s.within, s.outside, &xb, &prices, alpha, lambda).unwrap();
        for j in 0..n {
            inv = inv.max((back[j] - xi[j]).abs());
        }

        // Central differences in price against the analytic share Jacobian.
        let analytic = share_jacobian(&s, alpha, lambda);
        let scale = analytic.abs().max();
        let h = 1e-5 / alpha;
        for k in 0..n {
            let mut up = prices.clone();
            let mut dn = prices.clone();
            up[k] += h;
            dn[k] -= h;
            let su = market_shares(&deltas(&up), lambda).unwrap();
            let sd = market_shares(&deltas(&dn), lambda).unwrap();
            for j in 0..n {
                let fd = (su.inside[j] - sd.inside[j]) / (2.0 * h);
                jac = jac.max((analytic[(j, k)] - fd).abs() / scale);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = norm < 1e-12 && inv < 1e-10 && jac < 1e-6 && secs < 10.0;
    let detail = format!(
        "normalization {norm:.1e}, inversion {inv:.1e}, jacobian rel {jac:.1e}, {secs:.2}s over 1000 markets"
    );
    assert!(verdict(1, ok, &detail), "{detail}");
}

/// Bisection on `p = mc + 1 / (alpha (1 - s(p)))`, the single-product
/// first-order condition, where `s(p)` is the logistic share.
fn bisection_price(utility: f64, mc: f64, alpha: f64) -> f64 {
    let share = |p: f64| 1.0 / (1.0 + (alpha * p - utility).exp());
    let gap = |p: f64| p - mc - 1.0 / (alpha * (1.0 - share(p)));
    let (mut lo, mut hi) = (mc, mc + 1.0 / alpha);
    while gap(hi) < 0.0 {
        hi += 1.0 / alpha;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn criterion_02_pricing() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut solved, mut converged, mut foc, mut roundtrip) = (0, 0, 0.0f64, 0.0f64);
    for i in 0..1000 {
        let n = rng.random_range(1..=10);
        let m = random_market(&mut rng, n);
        let own = OwnershipMatrix::from_owners(&m.owners);
        let inp = MarketInputs {
            utility: &m.utility,
            mc: &m.mc,
            freq: &m.freq,
            ownership: &own,
            market_size: m.size,
        };
        let opts = SolverOptions::new(m.alpha, m.lambda).with_penalty(i % 2 == 1);
        let eq = solve_prices(&inp, &opts, None);
        solved += 1;
        if !eq.converged {
            continue;
        }
        converged += 1;
        foc = foc.max(eq.foc_residual);
        // Costs recovered from the equilibrium must give back the effective costs.
        let back = recover_marginal_costs(&eq.prices, &eq.shares, &eq.within, &own, m.alpha, m.lambda, "random").unwrap();
        for j in 0..n {
            roundtrip = roundtrip.max((back[j] - eq.mc_eff[j]).abs());
        }
    }

    let mut bisect = 0.0f64;
    for _ in 0..200 {
        let m = random_market(&mut rng, 1);
        let own = OwnershipMatrix::from_owners(&[0]);
        let inp = MarketInputs {
            utility: &m.utility,
            mc: &m.mc,
            freq: &m.freq,
            ownership: &own,
            market_size: m.size,
        };
        let eq = solve_prices(&inp, &SolverOptions::new(m.alpha, m.lambda), None);
        assert!(eq.converged);
        bisect = bisect.max((eq.prices[0] - bisection_price(m.utility[0], m.mc[0], m.alpha)).abs());
    }
    let ok = foc < 1e-8 && bisect < 1e-6 && roundtrip < 1e-8;
    let detail = format!(
        "{converged}/{solved} converged, max FOC {foc:.1e}, bisection {bisect:.1e}, recover-solve {roundtrip:.1e}"
    );
    assert!(verdict(2, ok, &detail), "{detail}");
}

#[test]
fn criterion_03_capacity_penalty() {
    let at200 = capacity_penalty(200.0);
    let at300 = capacity_penalty(300.0);
    let ok = (at200 - 2.85 * 2f64.ln()).abs() < 1e-12 && (28.3..=28.7).contains(&at300);
    let detail = format!("f(200) = {at200:.15}, f(300) = {at300:.4}");
    assert!(verdict(3, ok, &detail), "{detail}");
}

#[test]
fn criterion_04_estimation_monte_carlo() {
    let start = Instant::now();
    let reps = 200;
    let truth = SyntheticConfig::default();
    assert_eq!(truth.n_cities, 30);
    let (mut alphas, mut lambdas) = (Vec::new(), Vec::new());
    for rep in 0..reps {
        let cfg = SyntheticConfig {
            seed: 1000 + rep,
            tolerance: 1e9,
            ..SyntheticConfig::default()
        };
        let s = generate(&cfg).unwrap();
        let e = estimate_demand(&s.dataset, &IvSpec::default()).unwrap();
        alphas.push(e.params.alpha);
        lambdas.push(e.params.lambda);
    }
    let mcse = |v: &[f64]| sample_std(v) / (v.len() as f64).sqrt();
    let (ba, bl) = (mean(&alphas) - truth.alpha, mean(&lambdas) - truth.lambda);
    let (sa, sl) = (mcse(&alphas), mcse(&lambdas));
    let secs = start.elapsed().as_secs_f64();
    let ok = ba.abs() <= 2.0 * sa && bl.abs() <= 2.0 * sl && secs < 600.0;
    let detail = format!(
        "alpha bias {ba:.5}/USD (MC SE {sa:.5}), lambda bias {bl:.4} (MC SE {sl:.4}), {reps} reps in {secs:.0}s"
    );
    assert!(verdict(4, ok, &detail), "{detail}");
}

#[test]
fn criterion_05_clr() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut closed, mut zero_iff) = (0.0f64, true);
    for _ in 0..500 {
        let k = rng.random_range(1..=12);
        let m: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let r = clr_stat(&m, &nalgebra::DMatrix::identity(k, k)).unwrap();
        let expect: f64 = m.iter().map(|v| v.max(0.0).powi(2)).sum();
        closed = closed.max((r.value - expect).abs());
        zero_iff &= (r.value == 0.0) == m.iter().all(|&v| v <= 0.0);
        // Any covariance: zero exactly when no moment is positive.
        let a = nalgebra::DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
        let cov = &a * a.transpose() + nalgebra::DMatrix::identity(k, k) * 0.1;
        let neg: Vec<f64> = m.iter().map(|v| -v.abs()).collect();
        zero_iff &= clr_stat(&neg, &cov).unwrap().value == 0.0;
        zero_iff &= m.iter().all(|&v| v <= 0.0) || clr_stat(&m, &cov).unwrap().value > 0.0;
    }

    let reps = 100;
    let mut covered = 0;
    for rep in 0..reps {
        let cfg = SyntheticConfig {
            seed: 500 + rep,
            tolerance: 1e9,
            ..SyntheticConfig::default()
        };
        let s = generate(&cfg).unwrap();
        let ds = &s.dataset;
        let sampler = ShockSampler::new(
            rep + 77,
            16,
            DrawSource::Parametric {
                xi_sd: s.truth.xi_sd,
                omega_sd: s.truth.omega_sd,
            },
        );
        let ev = Evaluator::new(ds, &s.truth.model, &sampler, EvalSettings::plain(ds)).unwrap();
        let nets = Networks::observed(ds, Quarter::new(1).unwrap());
        let recs = enumerate_deviations(&ev, &nets).unwrap();
        let stats = SufficientStats::build(ds, &recs, CellScheme::default(), CovarianceKind::PerRecord).unwrap();
        if test_point(&stats, &s.truth.fixed_cost.theta, 0.05).unwrap().0 {
            covered += 1;
        }
    }
    let coverage = covered as f64 / reps as f64;
    let ok = closed < 1e-10 && zero_iff && coverage >= 0.93;
    let detail = format!(
        "identity closed form {closed:.1e}, zero iff non-positive: {zero_iff}, coverage {covered}/{reps} at 95%"
    );
    assert!(verdict(5, ok, &detail), "{detail}");
}

struct ScenarioRuns {
    distance: f64,
    passengers: f64,
    short_pct: f64,
    ml_pct: f64,
}

/// Counterfactual runs on the default dataset with the true model: base
/// stability for every seed, ordering and fixed-cost draw, then the carbon
/// scenarios with the true fixed-cost parameters.
#[test]
fn criterion_06_to_08_counterfactuals() {
    let start = Instant::now();
    let s = generate(&SyntheticConfig::default()).unwrap();
    let ds = &s.dataset;
    let sampler = ShockSampler::new(
        77,
        16,
        DrawSource::Parametric {
            xi_sd: s.truth.xi_sd,
            omega_sd: s.truth.omega_sd,
        },
    );
    let grid = FrequencyGrid::static_table();
    let base = Networks::observed(ds, Quarter::new(1).unwrap());
    let mut settings = EvalSettings::plain(ds);
    settings.capacity_penalty = true;
    let ev0 = Evaluator::new(ds, &s.truth.model, &sampler, settings.clone()).unwrap();
    let truth = s.truth.fixed_cost;
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut thetas = vec![truth];
    for _ in 0..2 {
        let mut t = truth;
        for v in t.theta.iter_mut() {
            *v *= rng.random_range(0.8..1.2);
        }
        thetas.push(t);
    }

    let seeds = 5u64;
    let worlds: Vec<_> = ScenarioName::ALL[1..]
        .iter()
        .map(|&name| {
            let sc = scenario_params(name);
            (name, Evaluator::new(ds, &s.truth.model, &sampler, sc.settings(&settings)).unwrap())
        })
        .collect();

    let (mut stable, mut base_runs) = (0, 0);
    let mut ledgers: Vec<Vec<WelfareLedger>> = Vec::new();
    let mut per_scenario: BTreeMap<ScenarioName, Vec<(f64, f64, f64, f64)>> = BTreeMap::new();
    for (d, theta) in thetas.iter().enumerate() {
        let w0 = World::new(&ev0, &grid, scenario_params(ScenarioName::Base), *theta, &base).unwrap();
        for seed in 0..seeds {
            let ledger = rationalize_shocks(&w0, &base, seed).unwrap();
            for ordering in EvalOrder::ALL {
                let cfg = SimConfig {
                    ordering,
                    seed,
                    ..SimConfig::default()
                };
                let b = simulate(&w0, &ledger, &base, &cfg).unwrap();
                base_runs += 1;
                if b.total_changes() == 0 {
                    stable += 1;
                }
                if d > 0 {
                    continue;
                }
                for (name, ev) in &worlds {
                    let w = World::new(ev, &grid, scenario_params(*name), *theta, &base).unwrap();
                    let out = simulate(&w, &ledger, &base, &cfg).unwrap();
                    let rep = welfare_report(ds, &b, &out, 0.215).unwrap();
                    let mut all = vec![rep.total];
                    all.extend(rep.by_segment.values().copied());
                    all.extend(rep.by_carrier.values().copied());
                    ledgers.push(all);
                    per_scenario.entry(*name).or_default().push((
                        out.stats.distance_flown(ds),
                        out.stats.total_passengers(),
                        rep.by_segment[&Segment::Short].cs_change_pct(),
                        rep.by_segment[&Segment::MediumLong].cs_change_pct(),
                    ));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();

    let detail6 = format!("{stable}/{base_runs} base runs unchanged ({} theta draws x {seeds} seeds x 3 orderings)", thetas.len());
    let ok6 = verdict(6, stable == base_runs, &detail6);

    let avg: Vec<(ScenarioName, ScenarioRuns)> = per_scenario
        .iter()
        .map(|(n, v)| {
            let k = v.len() as f64;
            let f = |g: fn(&(f64, f64, f64, f64)) -> f64| v.iter().map(g).sum::<f64>() / k;
            (
                *n,
                ScenarioRuns {
                    distance: f(|r| r.0),
                    passengers: f(|r| r.1),
                    short_pct: f(|r| r.2),
                    ml_pct: f(|r| r.3),
                },
            )
        })
        .collect();
    let mut ok7 = secs < 1800.0;
    for pair in avg.windows(2) {
        ok7 &= pair[1].1.distance <= pair[0].1.distance && pair[1].1.passengers <= pair[0].1.passengers;
    }
    let mut rows = Vec::new();
    for (n, r) in &avg {
        // Losses are negative changes: a larger loss is a more negative percentage.
        ok7 &= r.ml_pct < r.short_pct;
        rows.push(format!(
            "{n}: km {:.0} pax {:.0} CS short {:.1}% ML {:.1}%",
            r.distance, r.passengers, r.short_pct, r.ml_pct
        ));
    }
    let detail7 = format!("{}; {secs:.0}s", rows.join("; "));
    let ok7 = verdict(7, ok7, &detail7);

    let worst = ledgers.iter().flatten().map(identity_residual).fold(0.0, f64::max);
    let detail8 = format!("max residual {worst:.1e} over {} ledgers", ledgers.iter().map(Vec::len).sum::<usize>());
    let ok8 = verdict(8, worst < 1e-9, &detail8);
    assert!(ok6 && ok7 && ok8, "{detail6}\n{detail7}\n{detail8}");
}

#[test]
fn criterion_09_carbon() {
    let kg = flight_co2_kg(1.0, 1000.0);
    let revenue = carbon_accounting([(1.0, 1000.0, 0.0)], &scenario_params(ScenarioName::Low)).revenue_usd;
    let ok = rel_err(kg / 1000.0, 1437.8) < 1e-3 && rel_err(revenue, 91_013.0) < 5e-3;
    let detail = format!("{:.1} t CO2 per quarter, Low revenue ${revenue:.0}", kg / 1000.0);
    assert!(verdict(9, ok, &detail), "{detail}");
}

#[test]
fn criterion_10_guppi() {
    // Symmetric logit: three products at a quarter share each.
    let s = market_shares(&[0.0, 0.0, 0.0], 1.0).unwrap();
    let d = diversion_ratio(&s, 0, 1, 1.0).unwrap();
    let symmetric = (s.inside[0] - 0.25).abs() < 1e-15 && (d - 1.0 / 3.0).abs() < 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut sums = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(2..=10);
        let lambda = rng.random_range(0.1..=1.0);
        let deltas: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let s = market_shares(&deltas, lambda).unwrap();
        for j in 0..n {
            let mut total = diversion_to_outside(&s, j, lambda).unwrap();
            for k in (0..n).filter(|&k| k != j) {
                total += diversion_ratio(&s, j, k, lambda).unwrap();
            }
            sums = sums.max((total - 1.0).abs());
        }
    }

    let mut failures = Vec::new();
    let instances = 500;
    for i in 0..instances {
        let n = rng.random_range(2..=8);
        let mut m = random_market(&mut rng, n);
        if m.owners.iter().all(|&o| o == m.owners[0]) {
            m.owners[1] = m.owners[0] + 1;
        }
        let (a, b) = (m.owners[0], *m.owners.iter().find(|&&o| o != m.owners[0]).unwrap());
        let merged: Vec<usize> = m.owners.iter().map(|&o| if o == b { a } else { o }).collect();
        let opts = SolverOptions::new(m.alpha, m.lambda);
        let solve = |owners: &[usize]| {
            let own = OwnershipMatrix::from_owners(owners);
            solve_prices(
                &MarketInputs {
                    utility: &m.utility,
                    mc: &m.mc,
                    freq: &m.freq,
                    ownership: &own,
                    market_size: m.size,
                },
                &opts,
                None,
            )
        };
        let (pre, post) = (solve(&m.owners), solve(&merged));
        let raised = pre.converged
            && post.converged
            && pre.prices.iter().zip(&post.prices).all(|(p0, p1)| *p1 >= *p0 - 1e-9);
        if !raised {
            failures.push(serde_json::json!({
                "instance": i, "alpha": m.alpha, "lambda": m.lambda, "utility": m.utility,
                "mc": m.mc, "owners": m.owners, "merged": merged,
                "pre": pre.prices, "post": post.prices,
                "converged": [pre.converged, post.converged],
            }));
        }
    }
    let dump = Path::new(env!("CARGO_TARGET_TMPDIR")).join("merger_price_failures.json");
    fs::write(&dump, serde_json::to_string_pretty(&failures).unwrap()).unwrap();
    let rate = 1.0 - failures.len() as f64 / instances as f64;
    let ok = symmetric && sums < 1e-12 && rate >= 0.99;
    let detail = format!(
        "symmetric diversion {d:.15}, diversion sum error {sums:.1e}, prices weakly rise in {:.1}% of {instances} mergers (failures in {})",
        100.0 * rate,
        dump.display()
    );
    assert!(verdict(10, ok, &detail), "{detail}");
}

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig {
        synthetic: SyntheticConfig {
            n_cities: 14,
            n_countries: 4,
            quarters: 2,
            tolerance: 1e9,
            ..SyntheticConfig::default()
        },
        parameters: ParameterSource::Truth,
        ..PipelineConfig::default()
    }
    .with_seed(11);
    cfg.fixed_cost.profit_draws = 4;
    cfg.fixed_cost.max_points = 20_000;
    cfg.counterfactual.profit_draws = 4;
    cfg.counterfactual.seeds = 2;
    cfg
}

#[test]
fn criterion_11_determinism() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let p = Pipeline::new(Workspace::new(d.path()), small_config());
        p.generate().unwrap();
        p.fixedcost().unwrap();
        p.rationalize().unwrap();
        p.simulate(ScenarioName::Base).unwrap();
        p.simulate(ScenarioName::Uh).unwrap();
        p.report(ReportKind::Welfare, ScenarioName::Uh, None, 10).unwrap();
    }
    let subs = ["data", "fixedcost", "rationalize", "simulate/base", "simulate/uh", "report/welfare/uh"];
    let mut same = 0;
    let mut files = 0;
    for sub in subs {
        let m = |d: &Path| -> RunManifest { read_json(&d.join(sub).join(MANIFEST_FILE)).unwrap() };
        let (a, b) = (m(dirs[0].path()), m(dirs[1].path()));
        files += a.outputs.len();
        if a.output_hashes() == b.output_hashes() && a.config_hash == b.config_hash {
            same += 1;
        }
        // Digests in the manifest must describe the bytes on disk.
        for out in &a.outputs {
            let bytes_a = fs::read(dirs[0].path().join(&out.path)).unwrap();
            let bytes_b = fs::read(dirs[1].path().join(&out.path)).unwrap();
            assert!(bytes_a == bytes_b, "{} differs", out.path);
        }
    }
    let detail = format!("{same}/{} stages identical, {files} files compared byte for byte", subs.len());
    assert!(verdict(11, same == subs.len(), &detail), "{detail}");
}
