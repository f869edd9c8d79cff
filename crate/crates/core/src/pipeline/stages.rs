use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::manifest::{dataset_hash, RunManifest};
use super::rows::*;
use super::{rel, Workspace};
use crate::config::{ParameterSource, PipelineConfig};
use crate::counterfactual::{
    rationalize_shocks, scenario_params, simulate as simulate_run, EvalOrder, OutcomeStats, ScenarioName, ShockLedger,
    SimConfig, SimOutcome, World,
};
use crate::datagen::{generate as generate_synthetic, Truth};
use crate::error::{Result, SkyError};
use crate::estimation::{estimate_demand, estimate_mc};
use crate::evaluator::{EvalSettings, Evaluator, Model};
use crate::fixedcost::diagnostics::fc_per_flight_hour;
use crate::fixedcost::{
    confidence_region, enumerate_deviations, ConfidenceRegion, DeviationKind, FixedCostParams, SufficientStats,
    CHARACTERISTIC_NAMES,
};
use crate::io::{ensure_dir, load_dataset, read_csv, read_json, validate, write_csv, write_dataset, write_json, BUNDLE_FILES};
use crate::merger::{guppi_report, merged_world, merger_delta, network_expansion, MergerSpec};
use crate::model::grid::FrequencyGrid;
use crate::model::network::Networks;
use crate::model::{Dataset, Quarter};
use crate::rng;
use crate::shocks::{DrawSource, ShockSampler};
use crate::welfare::{
    airline_breakdown, country_pair_matrix, elasticity_binscatter, welfare_report, PairMatrixSpec, WelfareLedger,
};

pub const TRUTH_JSON: &str = "truth.json";
pub const MODEL_JSON: &str = "model.json";
pub const ESTIMATE_JSON: &str = "estimate.json";
pub const REGION_JSON: &str = "region.json";
pub const LEDGERS_JSON: &str = "ledgers.json";
pub const OUTCOMES_JSON: &str = "outcomes.json";
pub const SUMMARY_JSON: &str = "summary.json";

/// Equal-count distance bins in the elasticity binscatter.
pub const DEFAULT_BINS: usize = 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    #[default]
    Csv,
    Json,
}

impl TableFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Csv => "csv",
            TableFormat::Json => "json",
        }
    }
}

impl fmt::Display for TableFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

impl FromStr for TableFormat {
    type Err = SkyError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            _ => Err(SkyError::unknown("format", s)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    Welfare,
    Heatmap,
    Binscatter,
    AirlineBreakdown,
}

impl ReportKind {
    pub const ALL: [ReportKind; 4] = [
        ReportKind::Welfare,
        ReportKind::Heatmap,
        ReportKind::Binscatter,
        ReportKind::AirlineBreakdown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReportKind::Welfare => "welfare",
            ReportKind::Heatmap => "heatmap",
            ReportKind::Binscatter => "binscatter",
            ReportKind::AirlineBreakdown => "airline-breakdown",
        }
    }
}

impl FromStr for ReportKind {
    type Err = SkyError;

    fn from_str(s: &str) -> Result<Self> {
        ReportKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase().replace('_', "-"))
            .ok_or_else(|| SkyError::unknown("report", s))
    }
}

/// What a stage did: its directory, manifest and a JSON summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub command: String,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub summary: Value,
}

/// Parameters the post-estimation stages run on.
#[derive(Clone, Debug)]
pub struct Parameters {
    pub model: Model,
    pub draws: DrawSource,
    /// Marginal cost per product implied by the demand parameters, USD.
    pub mc: Vec<f64>,
    pub truth: Option<Truth>,
}

/// Shock ledger of one (parameter draw, simulation seed) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub draw: usize,
    pub run: usize,
    pub seed: u64,
    pub theta: FixedCostParams,
    pub ledger: ShockLedger,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub draw: usize,
    pub run: usize,
    pub outcome: SimOutcome,
}

impl RunRecord {
    pub fn key(&self) -> (usize, usize, EvalOrder) {
        (self.draw, self.run, self.outcome.ordering)
    }

    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.draw, self.run, self.outcome.ordering)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub alpha: f64,
    pub se_alpha: f64,
    pub lambda: f64,
    pub se_lambda: f64,
    pub first_stage_f: BTreeMap<String, f64>,
    pub observations: usize,
    pub mean_own_elasticity: Option<f64>,
    /// Mean of (fare - mc) / fare, percent.
    pub mean_markup_pct: Option<f64>,
    pub mean_mc: Option<f64>,
    pub cost_r_squared: Option<f64>,
    pub dataset: crate::io::ValidationReport,
    pub warnings: Vec<String>,
}

/// Stage runner bound to a workspace and configuration.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub ws: Workspace,
    pub cfg: PipelineConfig,
    pub format: TableFormat,
}

fn need(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(SkyError::domain(format!(
            "{} not found; run `skyquil {stage}` first",
            path.display()
        )))
    }
}

fn mean_of(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn welfare_row(scenario: ScenarioName, run: &str, group: &str, l: &WelfareLedger) -> WelfareRow {
    WelfareRow {
        scenario: scenario.as_str().to_string(),
        run: run.to_string(),
        group: group.to_string(),
        cs_baseline: l.cs_baseline,
        delta_cs: l.delta_cs,
        cs_change_pct: l.cs_change_pct(),
        delta_profit: l.delta_profit,
        carbon_revenue: l.carbon_revenue,
        social_co2_value: l.social_co2_value,
        welfare_gain: l.welfare_gain,
        passengers_baseline: l.passengers_baseline,
        passengers: l.passengers,
        co2_baseline_kg: l.co2_baseline_kg,
        co2_kg: l.co2_kg,
    }
}

/// Field-wise mean of welfare ledgers.
pub fn mean_ledger(ls: &[WelfareLedger]) -> WelfareLedger {
    let k = ls.len().max(1) as f64;
    let f = |g: fn(&WelfareLedger) -> f64| ls.iter().map(g).sum::<f64>() / k;
    WelfareLedger {
        cs_baseline: f(|l| l.cs_baseline),
        delta_cs: f(|l| l.delta_cs),
        profit_baseline: f(|l| l.profit_baseline),
        delta_profit: f(|l| l.delta_profit),
        carbon_revenue: f(|l| l.carbon_revenue),
        social_co2_value: f(|l| l.social_co2_value),
        welfare_gain: f(|l| l.welfare_gain),
        passengers_baseline: f(|l| l.passengers_baseline),
        passengers: f(|l| l.passengers),
        co2_baseline_kg: f(|l| l.co2_baseline_kg),
        co2_kg: f(|l| l.co2_kg),
    }
}

/// Largest violation of welfare = profit + CS + carbon revenue + social value.
pub fn identity_residual(l: &WelfareLedger) -> f64 {
    (l.welfare_gain - (l.delta_profit + l.delta_cs + l.carbon_revenue + l.social_co2_value)).abs()
}

impl Pipeline {
    pub fn new(ws: Workspace, cfg: PipelineConfig) -> Self {
        Pipeline {
            ws,
            cfg,
            format: TableFormat::Csv,
        }
    }

    pub fn with_format(mut self, format: TableFormat) -> Self {
        self.format = format;
        self
    }

    fn table<T: Serialize>(&self, dir: &Path, stem: &str, rows: &[T]) -> Result<PathBuf> {
        let path = dir.join(format!("{stem}.{}", self.format.extension()));
        match self.format {
            TableFormat::Csv => write_csv(&path, rows)?,
            TableFormat::Json => write_json(&path, rows)?,
        }
        Ok(path)
    }

    fn start(&self, command: &str) -> Result<RunManifest> {
        let mut m = RunManifest::start(command, self.cfg.hash());
        m.seeds.push(self.cfg.seed);
        if BUNDLE_FILES.iter().all(|f| self.ws.data.join(f).exists()) {
            m.dataset_hash = Some(dataset_hash(&self.ws.data)?);
        }
        Ok(m)
    }

    fn finish(&self, mut man: RunManifest, dir: &Path, outputs: &[PathBuf], summary: Value) -> Result<StageReport> {
        man.outputs(outputs)?;
        for d in man.inputs.iter_mut().chain(man.outputs.iter_mut()) {
            d.path = rel(&self.ws.root, Path::new(&d.path));
        }
        let manifest = man.finish(dir)?;
        Ok(StageReport {
            command: manifest.command.clone(),
            dir: dir.to_path_buf(),
            manifest,
            summary,
        })
    }

    fn summary(&self, dir: &Path, value: &Value, outputs: &mut Vec<PathBuf>) -> Result<()> {
        let path = dir.join(SUMMARY_JSON);
        write_json(&path, value)?;
        outputs.push(path);
        Ok(())
    }

    pub fn dataset(&self) -> Result<Dataset> {
        need(&self.ws.data.join(BUNDLE_FILES[0]), "generate")?;
        load_dataset(&self.ws.data)
    }

    fn dataset_inputs(&self, man: &mut RunManifest) -> Result<()> {
        for f in BUNDLE_FILES {
            man.input(&self.ws.data.join(f))?;
        }
        Ok(())
    }

    /// Demand, cost and shock draws for the configured source.
    pub fn parameters(&self, ds: &Dataset, man: &mut RunManifest) -> Result<Parameters> {
        match self.cfg.parameters {
            ParameterSource::Estimated => {
                let dir = self.ws.estimate();
                let model_path = dir.join(MODEL_JSON);
                need(&model_path, "estimate")?;
                let model: Model = read_json(&model_path)?;
                model.demand.validate()?;
                let res_path = dir.join(format!("residuals.{}", TableFormat::Csv.extension()));
                let residuals: Vec<ResidualRow> = if res_path.exists() {
                    read_csv(&res_path)?
                } else {
                    read_json(&dir.join("residuals.json"))?
                };
                man.input(&model_path)?;
                if residuals.len() != ds.products.len()
                    || residuals.iter().zip(&ds.products).any(|(r, p)| r.product_id != p.id)
                {
                    return Err(SkyError::domain("residuals do not match the dataset products; re-run estimate"));
                }
                let pairs: Vec<(f64, f64)> = residuals.iter().map(|r| (r.xi_hat, r.omega_hat)).collect();
                Ok(Parameters {
                    model,
                    draws: DrawSource::empirical(&pairs)?,
                    mc: residuals.iter().map(|r| r.mc_hat).collect(),
                    truth: None,
                })
            }
            ParameterSource::Truth => {
                let path = self.ws.data.join(TRUTH_JSON);
                need(&path, "generate")?;
                let truth: Truth = read_json(&path)?;
                man.input(&path)?;
                let mc = estimate_mc(ds, &truth.model.demand)?.mc;
                Ok(Parameters {
                    model: truth.model.clone(),
                    draws: DrawSource::Parametric {
                        xi_sd: truth.xi_sd,
                        omega_sd: truth.omega_sd,
                    },
                    mc,
                    truth: Some(truth),
                })
            }
        }
    }

    fn counterfactual_quarter(&self) -> Result<Quarter> {
        Quarter::new(self.cfg.counterfactual.quarter)
    }

    fn counterfactual_sampler(&self, draws: DrawSource) -> ShockSampler {
        ShockSampler::new(
            rng::mix(self.cfg.seed, "counterfactual-draws", &[]),
            self.cfg.counterfactual.profit_draws,
            draws,
        )
    }

    fn counterfactual_settings(&self, ds: &Dataset) -> EvalSettings {
        let mut s = EvalSettings::plain(ds);
        s.capacity_penalty = self.cfg.counterfactual.capacity_penalty;
        s
    }

    fn ledgers(&self, man: &mut RunManifest) -> Result<Vec<RunLedger>> {
        let path = self.ws.rationalize().join(LEDGERS_JSON);
        need(&path, "rationalize")?;
        man.input(&path)?;
        let all: Vec<RunLedger> = read_json(&path)?;
        let want = self.cfg.counterfactual.seeds;
        let ledgers: Vec<RunLedger> = all.into_iter().filter(|l| l.run < want).collect();
        let have = ledgers.iter().map(|l| l.run + 1).max().unwrap_or(0);
        if have < want {
            return Err(SkyError::Validation {
                messages: vec![format!(
                    "{want} seeds requested but {LEDGERS_JSON} holds {have}; re-run rationalize with --seeds {want}"
                )],
            });
        }
        man.seeds.extend(ledgers.iter().map(|l| l.seed));
        man.seeds.dedup();
        Ok(ledgers)
    }

    fn outcomes(&self, dir: &Path, stage: &str, man: &mut RunManifest) -> Result<Vec<RunRecord>> {
        let path = dir.join(OUTCOMES_JSON);
        need(&path, stage)?;
        man.input(&path)?;
        read_json(&path)
    }

    pub fn generate(&self) -> Result<StageReport> {
        let syn = generate_synthetic(&self.cfg.synthetic)?;
        let dir = self.ws.data.clone();
        let mut out = write_dataset(&dir, &syn.dataset)?;
        let truth = dir.join(TRUTH_JSON);
        write_json(&truth, &syn.truth)?;
        out.push(truth);
        let rows: Vec<MomentRow> = syn
            .moments
            .iter()
            .map(|m| MomentRow {
                name: m.name.clone(),
                target: m.target,
                actual: m.actual,
                relative_error: m.relative_error(),
            })
            .collect();
        out.push(self.table(&dir, "moments", &rows)?);
        let mut man = self.start("generate")?;
        man.seeds = vec![self.cfg.synthetic.seed];
        let ds = &syn.dataset;
        let summary = json!({
            "cities": ds.cities.len(),
            "airlines": ds.airlines.len(),
            "markets": ds.markets.len(),
            "routes": ds.routes.len(),
            "products": ds.products.len(),
            "quarters": ds.quarters().len(),
            "max_moment_error": rows.iter().map(|r| r.relative_error).fold(0.0, f64::max),
        });
        self.summary(&dir, &summary, &mut out)?;
        self.finish(man, &dir, &out, summary)
    }

    pub fn estimate(&self) -> Result<StageReport> {
        let ds = self.dataset()?;
        let mut man = self.start("estimate")?;
        self.dataset_inputs(&mut man)?;
        let report = validate(&ds);
        let dem = estimate_demand(&ds, &self.cfg.estimation)?;
        let dir = self.ws.estimate();
        ensure_dir(&dir)?;
        let mut coefs: Vec<CoefRow> = dem
            .fit
            .names
            .iter()
            .zip(dem.fit.coef.iter().zip(&dem.fit.se))
            .map(|(n, (c, s))| CoefRow {
                equation: "demand".into(),
                name: n.clone(),
                value: *c,
                se: *s,
            })
            .collect();
        let mut warnings = dem.warnings.clone();
        warnings.extend(report.warnings.iter().cloned());
        let valid = dem.params.validate();
        let cost = match valid {
            Ok(()) => Some(estimate_mc(&ds, &dem.params)?),
            Err(_) => None,
        };
        let mut summary = EstimateSummary {
            alpha: dem.params.alpha,
            se_alpha: dem.se_alpha,
            lambda: dem.params.lambda,
            se_lambda: dem.se_lambda,
            first_stage_f: dem.first_stage_f.clone(),
            observations: dem.fit.n_obs,
            mean_own_elasticity: None,
            mean_markup_pct: None,
            mean_mc: None,
            cost_r_squared: None,
            dataset: report,
            warnings,
        };
        let mut out = Vec::new();
        if let Some(cost) = &cost {
            coefs.extend(
                cost.fit
                    .names
                    .iter()
                    .zip(cost.fit.coef.iter().zip(&cost.fit.se))
                    .map(|(n, (c, s))| CoefRow {
                        equation: "cost".into(),
                        name: n.clone(),
                        value: *c,
                        se: *s,
                    }),
            );
            let bins = elasticity_binscatter(&ds, &dem.params, 1)?;
            summary.mean_own_elasticity = bins.means.first().copied();
            let markups: Vec<f64> = ds
                .products
                .iter()
                .zip(&cost.mc)
                .map(|(p, c)| 100.0 * (p.fare - c) / p.fare)
                .collect();
            summary.mean_markup_pct = mean_of(&markups);
            summary.mean_mc = mean_of(&cost.mc);
            summary.cost_r_squared = Some(cost.r_squared);
            let model = Model {
                demand: dem.params.clone(),
                cost: cost.params.clone(),
            };
            let path = dir.join(MODEL_JSON);
            write_json(&path, &model)?;
            out.push(path);
            let rows: Vec<ResidualRow> = ds
                .products
                .iter()
                .enumerate()
                .map(|(i, p)| ResidualRow {
                    product_id: p.id.clone(),
                    xi_hat: dem.xi[i],
                    omega_hat: cost.omega[i],
                    mc_hat: cost.mc[i],
                })
                .collect();
            out.push(self.table(&dir, "residuals", &rows)?);
        }
        out.push(self.table(&dir, "coefficients", &coefs)?);
        let path = dir.join(ESTIMATE_JSON);
        write_json(&path, &summary)?;
        out.push(path);
        let value = serde_json::to_value(&summary).expect("summary serializes");
        let stage = self.finish(man, &dir, &out, value)?;
        match valid {
            Ok(()) => Ok(stage),
            Err(e) => Err(SkyError::Validation {
                messages: vec![format!("estimated demand parameters are inadmissible: {e}")],
            }),
        }
    }

    pub fn fixedcost(&self) -> Result<StageReport> {
        let ds = self.dataset()?;
        let mut man = self.start("fixedcost")?;
        self.dataset_inputs(&mut man)?;
        let params = self.parameters(&ds, &mut man)?;
        let fc = &self.cfg.fixed_cost;
        let q = Quarter::new(fc.quarter)?;
        let draw_seed = rng::mix(self.cfg.seed, "fixedcost-draws", &[]);
        man.seeds.push(draw_seed);
        let sampler = ShockSampler::new(draw_seed, fc.profit_draws, params.draws.clone());
        let ev = Evaluator::new(&ds, &params.model, &sampler, EvalSettings::plain(&ds))?;
        let nets = Networks::observed(&ds, q);
        let recs = enumerate_deviations(&ev, &nets)?;
        let stats = SufficientStats::build(&ds, &recs, fc.cells, fc.covariance)?;
        let centre = stats.least_squares_centre();
        let region = confidence_region(&stats, &fc.grid(centre))?;

        let dir = self.ws.fixedcost();
        ensure_dir(&dir)?;
        let mut out = Vec::new();
        let route = |o: Option<(crate::model::RouteIdx, f64)>| match o {
            Some((r, f)) => (ds.route_label(r), f),
            None => (String::new(), 0.0),
        };
        let dev_rows: Vec<DeviationRow> = recs
            .iter()
            .map(|r| {
                let (or, of) = route(r.observed);
                let (ar, af) = route(r.alternative);
                DeviationRow {
                    airline: ds.airlines[r.airline.idx()].id.clone(),
                    quarter: r.quarter.get(),
                    kind: r.kind.label().to_string(),
                    observed_route: or,
                    observed_freq: of,
                    alternative_route: ar,
                    alternative_freq: af,
                    delta_pi2_usd: r.delta_pi2,
                    dz_constant: r.delta_z[0],
                    dz_freq_distance: r.delta_z[1],
                    dz_log_size: r.delta_z[2],
                    dz_slots: r.delta_z[3],
                    cell_market: ds.market_label(r.cell_market),
                }
            })
            .collect();
        out.push(self.table(&dir, "deviations", &dev_rows)?);
        let at_centre = stats.evaluate(&centre);
        let counts: BTreeMap<&str, usize> = stats.cells.iter().map(|c| (c.label.as_str(), c.n)).collect();
        let moment_rows: Vec<MomentCellRow> = at_centre
            .labels
            .iter()
            .zip(&at_centre.moments)
            .map(|(l, v)| MomentCellRow {
                label: l.clone(),
                records: counts.get(l.as_str()).copied().unwrap_or(0),
                value_at_centre: *v,
            })
            .collect();
        out.push(self.table(&dir, "moments", &moment_rows)?);
        let path = dir.join(REGION_JSON);
        write_json(&path, &region)?;
        out.push(path);
        let proj_rows: Vec<ProjectionRow> = match region.projections {
            Some(p) => CHARACTERISTIC_NAMES
                .iter()
                .zip(p)
                .zip(centre)
                .map(|((n, (lo, hi)), c)| ProjectionRow {
                    parameter: n.to_string(),
                    lower: lo,
                    upper: hi,
                    centre: c,
                })
                .collect(),
            None => Vec::new(),
        };
        out.push(self.table(&dir, "projections", &proj_rows)?);
        let accepted: Vec<FixedCostParams> = region.points.iter().map(|p| FixedCostParams::new(p.theta)).collect();
        let by_kind: BTreeMap<&str, usize> = DeviationKind::ALL
            .iter()
            .map(|k| (k.label(), recs.iter().filter(|r| r.kind == *k).count()))
            .collect();
        let summary = json!({
            "records": recs.len(),
            "records_by_kind": by_kind,
            "moments": at_centre.moments.len(),
            "dropped_cells": stats.dropped,
            "centre": centre,
            "accepted_points": region.points.len(),
            "evaluated_points": region.evaluated,
            "projections": proj_rows,
            "fc_per_flight_hour_usd": fc_per_flight_hour(&accepted, &ds),
        });
        self.summary(&dir, &summary, &mut out)?;
        let stage = self.finish(man, &dir, &out, summary)?;
        if region.is_empty() {
            return Err(SkyError::EmptyRegion);
        }
        Ok(stage)
    }

    pub fn rationalize(&self) -> Result<StageReport> {
        let ds = self.dataset()?;
        let mut man = self.start("rationalize")?;
        self.dataset_inputs(&mut man)?;
        let params = self.parameters(&ds, &mut man)?;
        let cf = &self.cfg.counterfactual;
        let thetas: Vec<FixedCostParams> = match &params.truth {
            Some(t) => vec![t.fixed_cost; cf.theta_draws],
            None => {
                let path = self.ws.fixedcost().join(REGION_JSON);
                need(&path, "fixedcost")?;
                man.input(&path)?;
                let region: ConfidenceRegion = read_json(&path)?;
                let seed = rng::mix(self.cfg.seed, "theta-draws", &[]);
                man.seeds.push(seed);
                region.sample(cf.theta_draws, seed)?
            }
        };
        let q = self.counterfactual_quarter()?;
        let sampler = self.counterfactual_sampler(params.draws.clone());
        let ev = Evaluator::new(&ds, &params.model, &sampler, self.counterfactual_settings(&ds))?;
        let grid = FrequencyGrid::static_table();
        let base = Networks::observed(&ds, q);
        let jobs: Vec<(usize, usize)> = (0..thetas.len())
            .flat_map(|d| (0..cf.seeds).map(move |k| (d, k)))
            .collect();
        let ledgers: Vec<RunLedger> = jobs
            .par_iter()
            .map(|&(d, k)| -> Result<RunLedger> {
                let seed = rng::mix(self.cfg.seed, "simulation-run", &[k as u64]);
                let world = World::new(&ev, &grid, scenario_params(ScenarioName::Base), thetas[d], &base)?;
                Ok(RunLedger {
                    draw: d,
                    run: k,
                    seed,
                    theta: thetas[d],
                    ledger: rationalize_shocks(&world, &base, seed)?,
                })
            })
            .collect::<Result<_>>()?;
        man.seeds.extend(ledgers.iter().map(|l| l.seed));

        let dir = self.ws.rationalize();
        ensure_dir(&dir)?;
        let mut out = Vec::new();
        let path = dir.join(LEDGERS_JSON);
        write_json(&path, &ledgers)?;
        out.push(path);
        let rows: Vec<ShockRow> = ledgers
            .iter()
            .flat_map(|l| {
                let ds = &ds;
                l.ledger.entries.iter().map(move |e| ShockRow {
                    draw: l.draw,
                    run: l.run,
                    seed: l.seed,
                    airline: ds.airlines[e.airline.idx()].id.clone(),
                    route: ds.route_label(e.route),
                    freq: e.freq,
                    kappa_usd: e.kappa,
                    lower_usd: e.lower,
                    upper_usd: e.upper,
                    fallback: e.fallback,
                })
            })
            .collect();
        out.push(self.table(&dir, "shocks", &rows)?);
        let summary = json!({
            "ledgers": ledgers.len(),
            "entries": rows.len(),
            "fallbacks": ledgers.iter().map(|l| l.ledger.fallbacks).sum::<usize>(),
            "thetas": thetas.iter().map(|t| t.theta).collect::<Vec<_>>(),
        });
        self.summary(&dir, &summary, &mut out)?;
        self.finish(man, &dir, &out, summary)
    }

    fn run_all(
        &self,
        ds: &Dataset,
        params: &Parameters,
        ledgers: &[RunLedger],
        scenario: ScenarioName,
        merger: Option<&MergerSpec>,
    ) -> Result<Vec<RunRecord>> {
        let cf = &self.cfg.counterfactual;
        let sc = scenario_params(scenario);
        let sampler = self.counterfactual_sampler(params.draws.clone());
        let mut settings = sc.settings(&self.counterfactual_settings(ds));
        if let Some(spec) = merger {
            settings = spec.settings(&settings);
        }
        let ev = Evaluator::new(ds, &params.model, &sampler, settings)?;
        let grid = FrequencyGrid::static_table();
        let base = Networks::observed(ds, self.counterfactual_quarter()?);
        let jobs: Vec<(&RunLedger, EvalOrder)> = ledgers
            .iter()
            .flat_map(|l| cf.orderings.iter().map(move |&o| (l, o)))
            .collect();
        jobs.par_iter()
            .map(|&(l, ordering)| -> Result<RunRecord> {
                let world = match merger {
                    Some(spec) => merged_world(&ev, &grid, sc, l.theta, &base, spec)?,
                    None => World::new(&ev, &grid, sc, l.theta, &base)?,
                };
                let sim = SimConfig {
                    ordering,
                    max_iterations: cf.max_iterations,
                    seed: l.seed,
                    cycle_window: cf.cycle_window,
                };
                Ok(RunRecord {
                    draw: l.draw,
                    run: l.run,
                    outcome: simulate_run(&world, &l.ledger, &base, &sim)?,
                })
            })
            .collect()
    }

    pub fn simulate(&self, scenario: ScenarioName) -> Result<StageReport> {
        let ds = self.dataset()?;
        let mut man = self.start(&format!("simulate --scenario {scenario}"))?;
        self.dataset_inputs(&mut man)?;
        let params = self.parameters(&ds, &mut man)?;
        let ledgers = self.ledgers(&mut man)?;
        let runs = self.run_all(&ds, &params, &ledgers, scenario, None)?;

        let dir = self.ws.simulate(scenario);
        ensure_dir(&dir)?;
        let mut out = Vec::new();
        let path = dir.join(OUTCOMES_JSON);
        write_json(&path, &runs)?;
        out.push(path);
        let run_rows: Vec<RunRow> = runs
            .iter()
            .map(|r| {
                let o = &r.outcome;
                RunRow {
                    scenario: scenario.as_str().to_string(),
                    draw: r.draw,
                    run: r.run,
                    seed: o.seed,
                    ordering: o.ordering.as_str().to_string(),
                    converged: o.converged,
                    iterations: o.iterations,
                    changes: o.total_changes(),
                    cycle_length: o.cycle_length,
                    routes: o.network.freq.len(),
                    passengers: o.stats.total_passengers(),
                    consumer_surplus: o.stats.consumer_surplus(),
                    net_profit: o.stats.net_profit(),
                    distance_flown_km: o.stats.distance_flown(&ds),
                    co2_kg: o.stats.co2_kg(),
                }
            })
            .collect();
        out.push(self.table(&dir, "runs", &run_rows)?);
        let mut nets = Vec::new();
        let mut markets = Vec::new();
        let mut metrics = Vec::new();
        for r in &runs {
            let o = &r.outcome;
            let ordering = o.ordering.as_str().to_string();
            nets.extend(o.network.freq.iter().map(|(&(g, route), &freq)| NetworkRow {
                draw: r.draw,
                run: r.run,
                ordering: ordering.clone(),
                airline: ds.airlines[g.idx()].id.clone(),
                route: ds.route_label(route),
                freq,
            }));
            markets.extend(o.stats.markets.iter().map(|m| MarketRow {
                draw: r.draw,
                run: r.run,
                ordering: ordering.clone(),
                market: ds.market_label(m.market),
                passengers: m.passengers,
                consumer_surplus: m.consumer_surplus,
            }));
            metrics.extend(airline_breakdown(&ds, &o.stats).into_iter().map(|c| AirlineMetricRow {
                draw: r.draw,
                run: r.run,
                ordering: ordering.clone(),
                group: c.group,
                airlines: c.airlines,
                routes: c.routes,
                profit: c.profit,
                passengers: c.passengers,
                mean_fare: c.mean_fare,
                total_flights: c.total_flights,
                distance_flown_km: c.distance_flown,
                fc_per_pax: c.fc_per_pax,
                cost_per_pax: c.cost_per_pax,
            }));
        }
        out.push(self.table(&dir, "networks_final", &nets)?);
        out.push(self.table(&dir, "market_equilibrium", &markets)?);
        out.push(self.table(&dir, "airline_metrics", &metrics)?);
        let col = |f: fn(&RunRow) -> f64| mean_of(&run_rows.iter().map(f).collect::<Vec<_>>());
        let summary = json!({
            "scenario": scenario,
            "runs": runs.len(),
            "converged": run_rows.iter().filter(|r| r.converged).count(),
            "total_changes": run_rows.iter().map(|r| r.changes).sum::<usize>(),
            "mean_passengers": col(|r| r.passengers),
            "mean_consumer_surplus": col(|r| r.consumer_surplus),
            "mean_distance_flown_km": col(|r| r.distance_flown_km),
            "mean_co2_kg": col(|r| r.co2_kg),
        });
        self.summary(&dir, &summary, &mut out)?;
        self.finish(man, &dir, &out, summary)
    }

    pub fn merge(&self, a: &str, b: &str, scenario: ScenarioName, screen_only: bool) -> Result<StageReport> {
        let ds = self.dataset()?;
        let spec = MergerSpec::new(&ds, a, b)?;
        let (ida, idb) = (
            ds.airlines[spec.partner_a.idx()].id.clone(),
            ds.airlines[spec.partner_b.idx()].id.clone(),
        );
        let mut cmd = format!("merge --partners {ida},{idb} --scenario {scenario}");
        if screen_only {
            cmd.push_str(" --screen-only");
        }
        let mut man = self.start(&cmd)?;
        self.dataset_inputs(&mut man)?;
        let params = self.parameters(&ds, &mut man)?;
        let dir = self.ws.merge(&ida, &idb, scenario);
        ensure_dir(&dir)?;
        let mut out = Vec::new();

        let guppi = guppi_report(&ds, params.model.demand.lambda, &params.mc, &spec)?;
        let rows: Vec<GuppiCsvRow> = guppi
            .rows
            .iter()
            .map(|r| GuppiCsvRow {
                market: ds.market_label(r.market),
                quarter: r.quarter.get(),
                product_id: ds.products[r.product].id.clone(),
                airline: ds.airlines[r.airline.idx()].id.clone(),
                firms: r.firms,
                diversion: r.pressure.diversion,
                partner_margin: r.pressure.partner_margin,
                guppi: r.pressure.guppi,
                upp: r.pressure.upp,
                efficiency: r.pressure.efficiency,
            })
            .collect();
        out.push(self.table(&dir, "guppi", &rows)?);
        let base = Networks::observed(&ds, self.counterfactual_quarter()?);
        let expansion = network_expansion(&ds, &base, &spec)?;
        let path = dir.join("expansion.json");
        write_json(&path, &expansion)?;
        out.push(path);

        let mut summary = json!({
            "partners": [ida, idb],
            "scenario": scenario,
            "guppi": {
                "overall": guppi.overall,
                "by_firms": guppi.by_firms,
                "skipped": guppi.skipped,
            },
            "expansion": expansion,
        });
        if !screen_only {
            let ledgers = self.ledgers(&mut man)?;
            let carbon = self.run_all(&ds, &params, &ledgers, scenario, None)?;
            let merged = self.run_all(&ds, &params, &ledgers, scenario, Some(&spec))?;
            let mut deltas = Vec::with_capacity(carbon.len());
            for (c, m) in carbon.iter().zip(&merged) {
                let d = merger_delta(&ds, &spec, &c.outcome, &m.outcome)?;
                deltas.push(MergerRunRow {
                    draw: c.draw,
                    run: c.run,
                    seed: d.seed,
                    ordering: d.ordering.as_str().to_string(),
                    both_converged: d.both_converged,
                    delta_passengers: d.delta.passengers,
                    delta_consumer_surplus: d.delta.consumer_surplus,
                    delta_net_profit: d.delta.net_profit,
                    delta_partner_net_profit: d.delta.partner_net_profit,
                    delta_partner_routes: d.delta.partner_routes,
                    delta_distance_flown_km: d.delta.distance_flown,
                    delta_co2_kg: d.delta.co2_kg,
                });
            }
            let path = dir.join(OUTCOMES_JSON);
            write_json(&path, &merged)?;
            out.push(path);
            out.push(self.table(&dir, "merger_runs", &deltas)?);
            let col = |f: fn(&MergerRunRow) -> f64| mean_of(&deltas.iter().map(f).collect::<Vec<_>>());
            summary["runs"] = json!({
                "count": deltas.len(),
                "both_converged": deltas.iter().filter(|d| d.both_converged).count(),
                "mean_delta_passengers": col(|d| d.delta_passengers),
                "mean_delta_consumer_surplus": col(|d| d.delta_consumer_surplus),
                "mean_delta_partner_net_profit": col(|d| d.delta_partner_net_profit),
                "mean_delta_partner_routes": col(|d| d.delta_partner_routes),
                "mean_delta_co2_kg": col(|d| d.delta_co2_kg),
            });
        }
        self.summary(&dir, &summary, &mut out)?;
        self.finish(man, &dir, &out, summary)
    }

    /// `partners` names a merger whose outcomes feed the heatmap's upper triangle.
    pub fn report(
        &self,
        kind: ReportKind,
        scenario: ScenarioName,
        partners: Option<(&str, &str)>,
        bins: usize,
    ) -> Result<StageReport> {
        let ds = self.dataset()?;
        let mut man = self.start(&format!("report {} --scenario {scenario}", kind.as_str()))?;
        self.dataset_inputs(&mut man)?;
        let dir = match kind {
            ReportKind::Binscatter => self.ws.report(kind.as_str()),
            _ => self.ws.report(kind.as_str()).join(scenario.as_str()),
        };
        ensure_dir(&dir)?;
        let mut out = Vec::new();
        let scc = self.cfg.counterfactual.social_cost_per_kg;
        let summary = match kind {
            ReportKind::Welfare => {
                let base = self.outcomes(&self.ws.simulate(ScenarioName::Base), "simulate --scenario base", &mut man)?;
                let runs = self.outcomes(&self.ws.simulate(scenario), "simulate", &mut man)?;
                let by_key: BTreeMap<_, _> = base.iter().map(|r| (r.key(), r)).collect();
                let mut rows = Vec::new();
                let mut groups: BTreeMap<String, Vec<WelfareLedger>> = BTreeMap::new();
                let mut worst = 0.0_f64;
                for r in &runs {
                    let b = by_key
                        .get(&r.key())
                        .ok_or_else(|| SkyError::RunKeyMismatch(format!("no baseline run for {}", r.label())))?;
                    let rep = welfare_report(&ds, &b.outcome, &r.outcome, scc)?;
                    let mut parts = vec![("total".to_string(), rep.total)];
                    parts.extend(rep.by_segment.iter().map(|(s, l)| (s.as_str().to_string(), *l)));
                    parts.extend(rep.by_carrier.iter().map(|(c, l)| (c.code().to_string(), *l)));
                    for (g, l) in parts {
                        worst = worst.max(identity_residual(&l));
                        rows.push(welfare_row(scenario, &r.label(), &g, &l));
                        groups.entry(g).or_default().push(l);
                    }
                }
                let means: BTreeMap<String, WelfareLedger> =
                    groups.iter().map(|(g, ls)| (g.clone(), mean_ledger(ls))).collect();
                rows.extend(means.iter().map(|(g, l)| welfare_row(scenario, "mean", g, l)));
                out.push(self.table(&dir, "welfare", &rows)?);
                let pct: BTreeMap<&str, f64> = means.iter().map(|(g, l)| (g.as_str(), l.cs_change_pct())).collect();
                json!({
                    "scenario": scenario,
                    "runs": runs.len(),
                    "mean": means,
                    "cs_change_pct": pct,
                    "identity_max_residual": worst,
                })
            }
            ReportKind::Heatmap => {
                let mean = |v: &[RunRecord]| OutcomeStats::mean(&v.iter().map(|r| r.outcome.stats.clone()).collect::<Vec<_>>());
                let base = mean(&self.outcomes(&self.ws.simulate(ScenarioName::Base), "simulate --scenario base", &mut man)?);
                let carbon = mean(&self.outcomes(&self.ws.simulate(scenario), "simulate", &mut man)?);
                let merged = match partners {
                    Some((a, b)) => {
                        let spec = MergerSpec::new(&ds, a, b)?;
                        let dir = self.ws.merge(
                            &ds.airlines[spec.partner_a.idx()].id,
                            &ds.airlines[spec.partner_b.idx()].id,
                            scenario,
                        );
                        Some(mean(&self.outcomes(&dir, "merge", &mut man)?))
                    }
                    None => None,
                };
                let spec = PairMatrixSpec {
                    social_cost_per_kg: scc,
                    ..PairMatrixSpec::default()
                };
                let mx = country_pair_matrix(&ds, &base, &carbon, merged.as_ref(), &scenario_params(scenario), &spec);
                let mut rows = Vec::new();
                for (i, ci) in mx.countries.iter().enumerate() {
                    for (j, cj) in mx.countries.iter().enumerate() {
                        rows.push(HeatmapRow {
                            row_country: ci.clone(),
                            col_country: cj.clone(),
                            part: if i >= j { "carbon" } else { "merger" }.to_string(),
                            value: mx.cells[i][j],
                        });
                    }
                }
                out.push(self.table(&dir, "heatmap", &rows)?);
                json!({
                    "scenario": scenario,
                    "metric": mx.metric,
                    "countries": mx.countries,
                    "merger_missing": mx.merger_missing,
                })
            }
            ReportKind::Binscatter => {
                let params = self.parameters(&ds, &mut man)?;
                let b = elasticity_binscatter(&ds, &params.model.demand, bins)?;
                let rows: Vec<BinRow> = (0..b.means.len())
                    .map(|i| BinRow {
                        bin: i,
                        distance_km: b.centers[i],
                        mean_elasticity: b.means[i],
                        count: b.counts[i],
                    })
                    .collect();
                out.push(self.table(&dir, "binscatter", &rows)?);
                json!({ "bins": rows.len(), "products": b.counts.iter().sum::<usize>() })
            }
            ReportKind::AirlineBreakdown => {
                let runs = self.outcomes(&self.ws.simulate(scenario), "simulate", &mut man)?;
                let stats = OutcomeStats::mean(&runs.iter().map(|r| r.outcome.stats.clone()).collect::<Vec<_>>());
                let rows = airline_breakdown(&ds, &stats);
                out.push(self.table(&dir, "airline_breakdown", &rows)?);
                json!({ "scenario": scenario, "groups": rows.len(), "runs": runs.len() })
            }
        };
        self.summary(&dir, &summary, &mut out)?;
        self.finish(man, &dir, &out, summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats_and_kinds_parse() {
        assert_eq!("JSON".parse::<TableFormat>().unwrap(), TableFormat::Json);
        assert!("xml".parse::<TableFormat>().is_err());
        for k in ReportKind::ALL {
            assert_eq!(k.as_str().parse::<ReportKind>().unwrap(), k);
        }
        assert_eq!("airline_breakdown".parse::<ReportKind>().unwrap(), ReportKind::AirlineBreakdown);
    }

    #[test]
    fn mean_ledger_keeps_the_identity() {
        let l = |x: f64| WelfareLedger {
            delta_cs: x,
            delta_profit: 2.0 * x,
            carbon_revenue: 1.0,
            social_co2_value: 0.5,
            welfare_gain: 3.0 * x + 1.5,
            ..WelfareLedger::default()
        };
        let m = mean_ledger(&[l(1.0), l(3.0)]);
        assert_eq!(m.delta_cs, 2.0);
        assert!(identity_residual(&m) < 1e-12);
    }

    #[test]
    fn missing_prerequisite_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(Workspace::new(dir.path()), PipelineConfig::default());
        let msg = p.estimate().unwrap_err().to_string();
        assert!(msg.contains("skyquil generate"), "{msg}");
    }
}
