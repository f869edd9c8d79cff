//! Second-stage supply: marginal-cost recovery, Bertrand-Nash prices,
//! capacity penalty and variable profits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::demand::shares_into;
use crate::design::LinearIndex;
use crate::error::{Result, SkyError};
use crate::linalg::{softplus, solve_in_place};
use crate::units::legs_per_quarter;

/// Passengers per flight above which the capacity penalty bites.
pub const CAPACITY_THRESHOLD: f64 = 200.0;
const PENALTY_SCALE_USD: f64 = 2.85;
const PENALTY_SLOPE: f64 = 0.1;

pub const DEFAULT_MAX_ITERATIONS: usize = 5_000;
/// Convergence threshold on `max |p - (mc_eff + markup)|`, in USD.
pub const FOC_TOLERANCE: f64 = 1e-8;
const STEP_TOLERANCE: f64 = 1e-10;
const MIN_DAMPING: f64 = 1.0 / 64.0;
/// Fixed-point iterations before switching to Newton steps.
const FIXED_POINT_BUDGET: usize = 60;

/// Smooth penalty added to marginal cost, in USD per passenger.
pub fn capacity_penalty(load: f64) -> f64 {
    PENALTY_SCALE_USD * softplus(PENALTY_SLOPE * (load - CAPACITY_THRESHOLD))
}

/// Derivative of [`capacity_penalty`] with respect to load.
pub fn penalty_slope(load: f64) -> f64 {
    PENALTY_SCALE_USD * PENALTY_SLOPE * crate::linalg::sigmoid(PENALTY_SLOPE * (load - CAPACITY_THRESHOLD))
}

/// Passengers per flight leg implied by a quarterly share.
pub fn load_per_flight(share: f64, market_size: f64, freq: f64) -> f64 {
    share * market_size / legs_per_quarter(freq)
}

/// Common-ownership mask over the products of one market.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OwnershipMatrix {
    n: usize,
    entries: Vec<bool>,
}

impl OwnershipMatrix {
    /// `owners[j]` is the parent of product `j`.
    pub fn from_owners<K: PartialEq>(owners: &[K]) -> Self {
        let n = owners.len();
        let mut entries = vec![false; n * n];
        for j in 0..n {
            for k in 0..n {
                entries[j * n + k] = owners[j] == owners[k];
            }
        }
        OwnershipMatrix { n, entries }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, j: usize, k: usize) -> bool {
        self.entries[j * self.n + k]
    }

    pub fn set(&mut self, j: usize, k: usize, v: bool) {
        self.entries[j * self.n + k] = v;
        self.entries[k * self.n + j] = v;
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|j| (0..self.n).all(|k| self.get(j, k) == self.get(k, j)))
    }
}

/// Marginal-cost index over the product design, in USD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub index: LinearIndex,
}

/// Everything needed to price one market, except demand parameters.
#[derive(Clone, Copy, Debug)]
pub struct MarketInputs<'a> {
    /// `x beta + xi` per product.
    pub utility: &'a [f64],
    /// Marginal cost before the capacity penalty, in USD.
    pub mc: &'a [f64],
    pub freq: &'a [f64],
    pub ownership: &'a OwnershipMatrix,
    pub market_size: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub alpha: f64,
    pub lambda: f64,
    pub capacity_penalty: bool,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl SolverOptions {
    pub fn new(alpha: f64, lambda: f64) -> Self {
        SolverOptions {
            alpha,
            lambda,
            capacity_penalty: false,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            tolerance: FOC_TOLERANCE,
        }
    }

    pub fn with_penalty(mut self, on: bool) -> Self {
        self.capacity_penalty = on;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquilibriumResult {
    pub prices: Vec<f64>,
    pub shares: Vec<f64>,
    pub within: Vec<f64>,
    pub outside: f64,
    pub log_iv: f64,
    /// Marginal cost including the capacity penalty.
    pub mc_eff: Vec<f64>,
    pub markups: Vec<f64>,
    pub foc_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Scratch buffers reused across fixed-point iterations.
struct Work {
    deltas: Vec<f64>,
    within: Vec<f64>,
    shares: Vec<f64>,
    jac: Vec<f64>,
    rhs: Vec<f64>,
    mc_eff: Vec<f64>,
    /// `1 - d penalty_j / d p_j`, used to precondition the step.
    slope: Vec<f64>,
}

impl Work {
    fn new(n: usize) -> Self {
        Work {
            deltas: vec![0.0; n],
            within: vec![0.0; n],
            shares: vec![0.0; n],
            jac: vec![0.0; n * n],
            rhs: vec![0.0; n],
            mc_eff: vec![0.0; n],
            slope: vec![1.0; n],
        }
    }

    /// Shares, effective marginal cost and markups at `prices`; markups land
    /// in `rhs`. Returns `(outside, ln IV)` or `None` on a singular system.
    fn evaluate(&mut self, inp: &MarketInputs<'_>, opts: &SolverOptions, prices: &[f64]) -> Option<(f64, f64)> {
        let n = prices.len();
        for j in 0..n {
            self.deltas[j] = inp.utility[j] - opts.alpha * prices[j];
        }
        let (outside, log_iv) = shares_into(&self.deltas, opts.lambda, &mut self.within, &mut self.shares);
        for j in 0..n {
            self.mc_eff[j] = inp.mc[j];
            self.slope[j] = 1.0;
            if opts.capacity_penalty {
                let per_share = inp.market_size / legs_per_quarter(inp.freq[j]);
                let load = self.shares[j] * per_share;
                self.mc_eff[j] += capacity_penalty(load);
                let own = opts.alpha / opts.lambda
                    * self.shares[j]
                    * (1.0 - (1.0 - opts.lambda) * self.within[j] - opts.lambda * self.shares[j]);
                self.slope[j] += penalty_slope(load) * per_share * own;
            }
        }
        markups_into(&self.shares, &self.within, inp.ownership, opts.alpha, opts.lambda, &mut self.jac, &mut self.rhs)
            .then_some((outside, log_iv))
    }
}

impl Work {
    /// Writes `mc_eff + markup - p` into `gap` and returns its max norm.
    fn gap(&mut self, inp: &MarketInputs<'_>, opts: &SolverOptions, prices: &[f64], gap: &mut [f64]) -> Option<f64> {
        self.evaluate(inp, opts, prices)?;
        let mut r = 0.0f64;
        for j in 0..prices.len() {
            gap[j] = self.mc_eff[j] + self.rhs[j] - prices[j];
            r = r.max(gap[j].abs());
        }
        r.is_finite().then_some(r)
    }
}

/// Newton steps on the price gap with a forward-difference Jacobian and
/// backtracking on the max norm.
struct Newton {
    jac: Vec<f64>,
    dir: Vec<f64>,
    trial: Vec<f64>,
    probe: Vec<f64>,
}

impl Newton {
    fn new(n: usize) -> Self {
        Newton {
            jac: vec![0.0; n * n],
            dir: vec![0.0; n],
            trial: vec![0.0; n],
            probe: vec![0.0; n],
        }
    }

    /// Moves `prices` and returns the max step, or `None` if no step helps.
    fn step(
        &mut self,
        work: &mut Work,
        inp: &MarketInputs<'_>,
        opts: &SolverOptions,
        prices: &mut [f64],
        gap: &[f64],
        residual: f64,
    ) -> Option<f64> {
        let n = prices.len();
        self.trial.copy_from_slice(prices);
        for k in 0..n {
            let h = 1e-6 * prices[k].abs().max(1.0);
            self.trial[k] += h;
            work.gap(inp, opts, &self.trial, &mut self.probe)?;
            for j in 0..n {
                self.jac[j * n + k] = (self.probe[j] - gap[j]) / h;
            }
            self.trial[k] = prices[k];
        }
        for j in 0..n {
            self.dir[j] = -gap[j];
        }
        if !solve_in_place(&mut self.jac, &mut self.dir, n) {
            return None;
        }
        let mut t = 1.0;
        for _ in 0..40 {
            for j in 0..n {
                self.trial[j] = prices[j] + t * self.dir[j];
            }
            if let Some(r) = work.gap(inp, opts, &self.trial, &mut self.probe) {
                if r < residual {
                    let step = (0..n).map(|j| (t * self.dir[j]).abs()).fold(0.0, f64::max);
                    prices.copy_from_slice(&self.trial);
                    return Some(step);
                }
            }
            t *= 0.5;
        }
        None
    }
}

/// Bertrand markups `p - mc = -[(O . ds/dp)']^{-1} s`. The nested-logit
/// Jacobian is symmetric, so the transpose is implicit. Row `j` of the system
/// is divided by `s_j`; shares can span dozens of orders of magnitude when
/// `lambda` is small, and the unscaled rows then look singular.
fn markups_into(
    shares: &[f64],
    within: &[f64],
    ownership: &OwnershipMatrix,
    alpha: f64,
    lambda: f64,
    jac: &mut [f64],
    out: &mut [f64],
) -> bool {
    let n = shares.len();
    for j in 0..n {
        for k in 0..n {
            jac[j * n + k] = if ownership.get(j, k) {
                let own = if j == k { 1.0 } else { 0.0 };
                (own - (1.0 - lambda) * within[k] - lambda * shares[k]) / lambda
            } else {
                0.0
            };
        }
    }
    out.fill(1.0);
    if !solve_in_place(jac, out, n) {
        return false;
    }
    for m in out.iter_mut() {
        *m /= alpha;
    }
    true
}

/// Marginal costs implied by observed prices and shares.
pub fn recover_marginal_costs(
    prices: &[f64],
    shares: &[f64],
    within: &[f64],
    ownership: &OwnershipMatrix,
    alpha: f64,
    lambda: f64,
    market: &str,
) -> Result<Vec<f64>> {
    let n = prices.len();
    if shares.len() != n || within.len() != n || ownership.len() != n {
        return Err(SkyError::domain("price/share/ownership sizes differ"));
    }
    let mut jac = vec![0.0; n * n];
    let mut markup = vec![0.0; n];
    if !markups_into(shares, within, ownership, alpha, lambda, &mut jac, &mut markup) {
        return Err(SkyError::SingularJacobian {
            market: market.to_string(),
        });
    }
    Ok(prices.iter().zip(&markup).map(|(p, m)| p - m).collect())
}

/// Damped fixed point on `p <- mc_eff(p) + markup(p)`. Each product's step
/// is divided by `1 - d penalty / d p`, which keeps the map stable when the
/// capacity penalty is steep. Markets that have not converged after a fixed
/// budget switch to Newton steps on the same gap. `start` warm-starts the iteration; the default
/// is `mc + 1 / alpha`.
pub fn solve_prices(inp: &MarketInputs<'_>, opts: &SolverOptions, start: Option<&[f64]>) -> EquilibriumResult {
    let n = inp.mc.len();
    debug_assert_eq!(inp.utility.len(), n);
    debug_assert_eq!(inp.freq.len(), n);
    let mut prices: Vec<f64> = match start {
        Some(s) if s.len() == n && s.iter().all(|p| p.is_finite()) => s.to_vec(),
        _ => inp.mc.iter().map(|c| c + 1.0 / opts.alpha).collect(),
    };
    let mut work = Work::new(n);
    if n == 0 {
        return EquilibriumResult {
            prices,
            shares: vec![],
            within: vec![],
            outside: 1.0,
            log_iv: f64::NEG_INFINITY,
            mc_eff: vec![],
            markups: vec![],
            foc_residual: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let mut damping = 1.0;
    let mut last = f64::INFINITY;
    let mut residual = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut ok = true;
    let mut gap = vec![0.0; n];
    let mut newton = Newton::new(n);
    while iterations < opts.max_iterations {
        iterations += 1;
        match work.gap(inp, opts, &prices, &mut gap) {
            Some(r) => residual = r,
            None => {
                ok = false;
                break;
            }
        }
        if residual < opts.tolerance {
            converged = true;
            break;
        }
        let step = if iterations > FIXED_POINT_BUDGET {
            match newton.step(&mut work, inp, opts, &mut prices, &gap, residual) {
                Some(step) => step,
                None => break,
            }
        } else {
            if residual > last {
                damping = f64::max(damping * 0.5, MIN_DAMPING);
            }
            last = residual;
            let mut step = 0.0f64;
            for j in 0..n {
                let next = prices[j] + damping * gap[j] / work.slope[j];
                step = step.max((next - prices[j]).abs());
                prices[j] = next;
            }
            step
        };
        if step < STEP_TOLERANCE {
            // Stalled at floating-point resolution; accept only a tiny gap.
            converged = residual < opts.tolerance.max(1e-6);
            break;
        }
    }
    let (outside, log_iv) = if ok {
        work.evaluate(inp, opts, &prices).unwrap_or((f64::NAN, f64::NAN))
    } else {
        (f64::NAN, f64::NAN)
    };
    let markups = prices.iter().zip(&work.mc_eff).map(|(p, c)| p - c).collect();
    EquilibriumResult {
        prices,
        shares: work.shares,
        within: work.within,
        outside,
        log_iv,
        mc_eff: work.mc_eff,
        markups,
        foc_residual: residual,
        iterations,
        converged: converged && ok,
    }
}

/// Per-owner `(p - mc_eff) s MS`.
pub fn variable_profit<K: Ord + Copy>(result: &EquilibriumResult, owners: &[K], market_size: f64) -> BTreeMap<K, f64> {
    let mut out = BTreeMap::new();
    for (j, &o) in owners.iter().enumerate() {
        *out.entry(o).or_insert(0.0) += product_profit(result, j, market_size);
    }
    out
}

pub fn product_profit(result: &EquilibriumResult, j: usize, market_size: f64) -> f64 {
    (result.prices[j] - result.mc_eff[j]) * result.shares[j] * market_size
}

/// One `(xi, omega)` draw for every product in a market.
#[derive(Clone, Debug, PartialEq)]
pub struct ShockDraw {
    pub xi: Vec<f64>,
    pub omega: Vec<f64>,
}

/// Mean equilibrium outcome over a list of shock draws.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpectedOutcome {
    pub profit: Vec<f64>,
    pub prices: Vec<f64>,
    pub shares: Vec<f64>,
    pub mc_eff: Vec<f64>,
    /// Expected passengers, fare revenue and variable cost (USD) per product.
    pub passengers: Vec<f64>,
    pub revenue: Vec<f64>,
    pub variable_cost: Vec<f64>,
    /// Mean of `ln(1 + IV^lambda)` for consumer surplus.
    pub surplus_index: f64,
    pub converged: bool,
    pub worst_residual: f64,
}

/// Expected variable profits: each draw shifts `utility` by `xi` and `mc` by
/// `omega`, prices are re-solved, and per-product results averaged.
pub fn expected_profit(base: &MarketInputs<'_>, opts: &SolverOptions, draws: &[ShockDraw]) -> ExpectedOutcome {
    let n = base.mc.len();
    let mut out = ExpectedOutcome {
        profit: vec![0.0; n],
        prices: vec![0.0; n],
        shares: vec![0.0; n],
        mc_eff: vec![0.0; n],
        passengers: vec![0.0; n],
        revenue: vec![0.0; n],
        variable_cost: vec![0.0; n],
        surplus_index: 0.0,
        converged: true,
        worst_residual: 0.0,
    };
    if draws.is_empty() {
        return out;
    }
    let mut utility = vec![0.0; n];
    let mut mc = vec![0.0; n];
    let mut warm: Option<Vec<f64>> = None;
    for d in draws {
        for j in 0..n {
            utility[j] = base.utility[j] + d.xi[j];
            mc[j] = base.mc[j] + d.omega[j];
        }
        let inp = MarketInputs {
            utility: &utility,
            mc: &mc,
            ..*base
        };
        let eq = solve_prices(&inp, opts, warm.as_deref());
        out.converged &= eq.converged;
        out.worst_residual = out.worst_residual.max(eq.foc_residual);
        for j in 0..n {
            out.profit[j] += product_profit(&eq, j, base.market_size);
            out.prices[j] += eq.prices[j];
            out.shares[j] += eq.shares[j];
            out.mc_eff[j] += eq.mc_eff[j];
            let pax = eq.shares[j] * base.market_size;
            out.passengers[j] += pax;
            out.revenue[j] += eq.prices[j] * pax;
            out.variable_cost[j] += eq.mc_eff[j] * pax;
        }
        if n > 0 {
            out.surplus_index += softplus(opts.lambda * eq.log_iv);
        }
        warm = Some(eq.prices);
    }
    let k = draws.len() as f64;
    for v in [
        &mut out.profit,
        &mut out.prices,
        &mut out.shares,
        &mut out.mc_eff,
        &mut out.passengers,
        &mut out.revenue,
        &mut out.variable_cost,
    ] {
        for x in v.iter_mut() {
            *x /= k;
        }
    }
    out.surplus_index /= k;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::market_shares;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn solve(util: &[f64], mc: &[f64], owners: &[u32], alpha: f64, lambda: f64) -> EquilibriumResult {
        let o = OwnershipMatrix::from_owners(owners);
        let freq = vec![1.0; mc.len()];
        let inp = MarketInputs {
            utility: util,
            mc,
            freq: &freq,
            ownership: &o,
            market_size: 1e6,
        };
        solve_prices(&inp, &SolverOptions::new(alpha, lambda), None)
    }

    /// Max FOC gap recomputed from scratch through the demand module.
    fn foc_gap(eq: &EquilibriumResult, util: &[f64], owners: &[u32], alpha: f64, lambda: f64) -> f64 {
        let deltas: Vec<f64> = util.iter().zip(&eq.prices).map(|(u, p)| u - alpha * p).collect();
        let s = market_shares(&deltas, lambda).unwrap();
        let o = OwnershipMatrix::from_owners(owners);
        let mc = recover_marginal_costs(&eq.prices, &s.inside, &s.within, &o, alpha, lambda, "t").unwrap();
        mc.iter().zip(&eq.mc_eff).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn penalty_golden_values() {
        assert!((capacity_penalty(200.0) - 2.85 * 2f64.ln()).abs() < 1e-12);
        let at300 = capacity_penalty(300.0);
        assert!((28.3..=28.7).contains(&at300), "{at300}");
        assert!((capacity_penalty(0.0) - 2.85 * (-20f64).exp().ln_1p()).abs() < 1e-20);
        assert!(capacity_penalty(0.0) < 6e-9);
    }

    #[test]
    fn penalty_is_monotone_and_convex() {
        let h = 1e-3;
        let mut load = 0.0;
        while load < 600.0 {
            let (a, b, c) = (capacity_penalty(load - h), capacity_penalty(load), capacity_penalty(load + h));
            assert!(c >= b && b >= a);
            assert!(a + c - 2.0 * b >= -1e-12);
            load += 7.3;
        }
    }

    #[test]
    fn monopoly_markup_limit() {
        let alpha = 0.03435;
        let s = market_shares(&[-30.0 - alpha * 100.0], 1.0).unwrap();
        let o = OwnershipMatrix::from_owners(&[0]);
        let mc = recover_marginal_costs(&[100.0], &s.inside, &s.within, &o, alpha, 1.0, "m").unwrap();
        let markup = 100.0 - mc[0];
        assert_relative_eq!(markup, 1.0 / (alpha * (1.0 - s.inside[0])), epsilon = 1e-9);
        assert!((markup - 29.11).abs() < 0.01);
    }

    #[test]
    fn single_product_matches_bisection() {
        // p = mc + 1 / (1 - s(p)) with s(p) = e^{-p} / (1 + e^{-p}), alpha = 1.
        let mc = 0.7;
        let f = |p: f64| p - mc - 1.0 / (1.0 - (-p).exp() / (1.0 + (-p).exp()));
        let (mut lo, mut hi) = (mc, mc + 10.0);
        assert!(f(lo) < 0.0 && f(hi) > 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let eq = solve(&[0.0], &[mc], &[0], 1.0, 1.0);
        assert!(eq.converged);
        assert!((eq.prices[0] - 0.5 * (lo + hi)).abs() < 1e-6);
    }

    #[test]
    fn symmetric_duopoly_prices_equal() {
        let eq = solve(&[1.0, 1.0], &[50.0, 50.0], &[0, 1], 0.03, 0.8);
        assert!(eq.converged);
        assert!((eq.prices[0] - eq.prices[1]).abs() < 1e-9);
    }

    #[test]
    fn zero_markup_gives_zero_profit() {
        let eq = EquilibriumResult {
            prices: vec![10.0, 12.0],
            shares: vec![0.1, 0.2],
            within: vec![1.0 / 3.0, 2.0 / 3.0],
            outside: 0.7,
            log_iv: 0.0,
            mc_eff: vec![10.0, 12.0],
            markups: vec![0.0, 0.0],
            foc_residual: 0.0,
            iterations: 0,
            converged: true,
        };
        let vp = variable_profit(&eq, &[0u32, 1], 1e6);
        assert!(vp.values().all(|v| *v == 0.0));
    }

    #[test]
    fn single_product_profit_by_hand() {
        let eq = solve(&[2.0], &[40.0], &[7], 0.05, 0.9);
        let vp = variable_profit(&eq, &[7u32], 2e6);
        let hand = (eq.prices[0] - 40.0) * eq.shares[0] * 2e6;
        assert_relative_eq!(vp[&7], hand, max_relative = 1e-14);
    }

    #[test]
    fn penalty_enters_effective_cost() {
        let o = OwnershipMatrix::from_owners(&[0u32]);
        let inp = MarketInputs {
            utility: &[3.0],
            mc: &[50.0],
            freq: &[1.0 / 7.0],
            ownership: &o,
            market_size: 5e6,
        };
        let opts = SolverOptions::new(0.03435, 0.91).with_penalty(true);
        let eq = solve_prices(&inp, &opts, None);
        assert!(eq.converged);
        let load = load_per_flight(eq.shares[0], 5e6, 1.0 / 7.0);
        assert!(load > 200.0);
        assert_relative_eq!(eq.mc_eff[0], 50.0 + capacity_penalty(load), epsilon = 1e-6);
    }

    #[test]
    fn expected_profit_degenerate_draws() {
        let o = OwnershipMatrix::from_owners(&[0u32, 1]);
        let inp = MarketInputs {
            utility: &[1.0, 0.5],
            mc: &[40.0, 45.0],
            freq: &[1.0, 2.0],
            ownership: &o,
            market_size: 1e6,
        };
        let opts = SolverOptions::new(0.04, 0.85);
        let d = ShockDraw {
            xi: vec![0.3, -0.2],
            omega: vec![1.0, -2.0],
        };
        let one = expected_profit(&inp, &opts, std::slice::from_ref(&d));
        let many = expected_profit(&inp, &opts, &vec![d.clone(); 5]);
        let util = [1.3, 0.3];
        let mc = [41.0, 43.0];
        let direct = solve_prices(&MarketInputs { utility: &util, mc: &mc, ..inp }, &opts, None);
        for j in 0..2 {
            assert_relative_eq!(one.profit[j], product_profit(&direct, j, 1e6), max_relative = 1e-9);
            assert_relative_eq!(many.profit[j], one.profit[j], max_relative = 1e-9);
        }
    }

    /// 36 draws against a 10,000-draw reference on a toy market.
    #[test]
    fn thirty_six_draws_close_to_large_sample() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let o = OwnershipMatrix::from_owners(&[0u32]);
        let inp = MarketInputs {
            utility: &[0.0],
            mc: &[40.0],
            freq: &[1.0],
            ownership: &o,
            market_size: 1e6,
        };
        let opts = SolverOptions::new(0.04, 1.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let nx = Normal::new(0.0, 0.5).unwrap();
        let nw = Normal::new(0.0, 3.0).unwrap();
        let mut draw = || ShockDraw {
            xi: vec![nx.sample(&mut rng)],
            omega: vec![nw.sample(&mut rng)],
        };
        let big: Vec<ShockDraw> = (0..10_000).map(|_| draw()).collect();
        let small: Vec<ShockDraw> = (0..36).map(|_| draw()).collect();
        let per_draw: Vec<f64> = small
            .iter()
            .map(|d| expected_profit(&inp, &opts, std::slice::from_ref(d)).profit[0])
            .collect();
        let se = crate::linalg::sample_std(&per_draw) / 6.0;
        let ref_mean = expected_profit(&inp, &opts, &big).profit[0];
        let est = expected_profit(&inp, &opts, &small).profit[0];
        assert!((est - ref_mean).abs() < 3.0 * se, "est {est} ref {ref_mean} se {se}");
    }

    fn market() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<u32>, f64, f64)> {
        (1usize..=6).prop_flat_map(|n| {
            (
                prop::collection::vec(-2.0f64..2.0, n),
                prop::collection::vec(20.0f64..150.0, n),
                prop::collection::vec(0u32..3, n),
                0.01f64..0.06,
                0.3f64..=1.0,
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn converged_equilibria_satisfy_foc((util, mc, owners, alpha, lambda) in market()) {
            let eq = solve(&util, &mc, &owners, alpha, lambda);
            prop_assert!(eq.converged, "residual {}", eq.foc_residual);
            prop_assert!(eq.foc_residual < 1e-8);
            prop_assert!(eq.prices.iter().zip(&eq.mc_eff).all(|(p, c)| p > c));
            prop_assert!(foc_gap(&eq, &util, &owners, alpha, lambda) < 1e-8);
        }

        #[test]
        fn recover_solve_roundtrip((util, mc, owners, alpha, lambda) in market()) {
            let eq = solve(&util, &mc, &owners, alpha, lambda);
            let o = OwnershipMatrix::from_owners(&owners);
            let back = recover_marginal_costs(&eq.prices, &eq.shares, &eq.within, &o, alpha, lambda, "t").unwrap();
            for (a, b) in back.iter().zip(&mc) {
                prop_assert!((a - b).abs() < 1e-8);
            }
        }

        #[test]
        fn doubling_costs_raises_prices((util, mc, _owners, alpha, lambda) in market()) {
            // Single-product firms: with shared owners the common markup can
            // fall by more than a cheap product's cost rises.
            let owners: Vec<u32> = (0..util.len() as u32).collect();
            let eq = solve(&util, &mc, &owners, alpha, lambda);
            let mc2: Vec<f64> = mc.iter().map(|c| 2.0 * c).collect();
            let eq2 = solve(&util, &mc2, &owners, alpha, lambda);
            for (a, b) in eq.prices.iter().zip(&eq2.prices) {
                prop_assert!(b >= a);
            }
        }

        #[test]
        fn joint_ownership_raises_prices((util, mc, owners, alpha, lambda) in market()) {
            let eq = solve(&util, &mc, &owners, alpha, lambda);
            let merged: Vec<u32> = owners.iter().map(|&o| if o == 1 { 0 } else { o }).collect();
            let eq2 = solve(&util, &mc, &merged, alpha, lambda);
            for j in 0..owners.len() {
                if merged[j] == 0 {
                    prop_assert!(eq2.prices[j] >= eq.prices[j] - 1e-9);
                }
            }
        }
    }
}
