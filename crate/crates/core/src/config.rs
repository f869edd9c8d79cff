//! Pipeline configuration, read from JSON. Every field has a default, so a
//! config file only lists what it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::counterfactual::EvalOrder;
use crate::datagen::SyntheticConfig;
use crate::error::{Result, SkyError};
use crate::estimation::IvSpec;
use crate::fixedcost::{CellScheme, CovarianceKind, GridSpec, DIM};
use crate::io::read_json;
use crate::model::Quarter;
use crate::units::SOCIAL_COST_USD_PER_KG;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedCostConfig {
    /// Quarter whose network supplies the deviations.
    pub quarter: u8,
    /// Shock draws per expected-profit evaluation.
    pub profit_draws: usize,
    pub cells: CellScheme,
    pub covariance: CovarianceKind,
    /// Grid box around the least-squares centre, in $10,000.
    pub half_width: f64,
    pub step: f64,
    pub coarse_step: f64,
    pub max_points: usize,
    pub level: f64,
}

impl Default for FixedCostConfig {
    fn default() -> Self {
        FixedCostConfig {
            quarter: 1,
            profit_draws: 16,
            cells: CellScheme::default(),
            covariance: CovarianceKind::default(),
            half_width: GridSpec::DEFAULT_HALF_WIDTH,
            step: 1.0,
            coarse_step: 10.0,
            max_points: 200_000,
            level: 0.05,
        }
    }
}

impl FixedCostConfig {
    pub fn grid(&self, centre: [f64; DIM]) -> GridSpec {
        GridSpec {
            step: self.step,
            coarse_step: self.coarse_step,
            max_points: self.max_points,
            level: self.level,
            ..GridSpec::around(centre, self.half_width)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterfactualConfig {
    pub quarter: u8,
    pub profit_draws: usize,
    pub capacity_penalty: bool,
    /// Simulation seeds per ordering.
    pub seeds: usize,
    pub orderings: Vec<EvalOrder>,
    /// Fixed-cost parameter draws taken from the confidence region.
    pub theta_draws: usize,
    pub max_iterations: usize,
    pub cycle_window: usize,
    /// USD per kg of CO2.
    pub social_cost_per_kg: f64,
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        CounterfactualConfig {
            quarter: 1,
            profit_draws: 16,
            capacity_penalty: true,
            seeds: 5,
            orderings: EvalOrder::ALL.to_vec(),
            theta_draws: 1,
            max_iterations: 100,
            cycle_window: 20,
            social_cost_per_kg: SOCIAL_COST_USD_PER_KG,
        }
    }
}

/// Where the stages after estimation take model parameters from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParameterSource {
    /// Demand and cost estimates, residual draws and the fixed-cost region.
    #[default]
    Estimated,
    /// The generator's `truth.json`; only available for synthetic data.
    Truth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; every stage derives its streams from it.
    pub seed: u64,
    pub parameters: ParameterSource,
    pub synthetic: SyntheticConfig,
    pub estimation: IvSpec,
    pub fixed_cost: FixedCostConfig,
    pub counterfactual: CounterfactualConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let synthetic = SyntheticConfig::default();
        PipelineConfig {
            seed: synthetic.seed,
            parameters: ParameterSource::default(),
            synthetic,
            estimation: IvSpec::default(),
            fixed_cost: FixedCostConfig::default(),
            counterfactual: CounterfactualConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads and validates a config file; a malformed file is a validation error.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: PipelineConfig = read_json(path).map_err(|e| match e {
            SkyError::Json { path, source } => SkyError::Validation {
                messages: vec![format!("{path}: {source}")],
            },
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces the root seed, and with it the generator seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synthetic.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Err(SkyError::Validation { messages }) = self.synthetic.validate() {
            errs.extend(messages.into_iter().map(|m| format!("synthetic: {m}")));
        }
        for (name, q) in [
            ("fixed_cost.quarter", self.fixed_cost.quarter),
            ("counterfactual.quarter", self.counterfactual.quarter),
        ] {
            if Quarter::new(q).is_err() {
                errs.push(format!("{name} must lie in 1..=4, got {q}"));
            }
        }
        if self.fixed_cost.profit_draws == 0 || self.counterfactual.profit_draws == 0 {
            errs.push("profit_draws must be positive".into());
        }
        if !(self.fixed_cost.half_width > 0.0) {
            errs.push("fixed_cost.half_width must be positive".into());
        }
        if self.counterfactual.seeds == 0 || self.counterfactual.theta_draws == 0 {
            errs.push("counterfactual seeds and theta_draws must be positive".into());
        }
        if self.counterfactual.orderings.is_empty() {
            errs.push("counterfactual.orderings must not be empty".into());
        }
        if self.estimation.instruments.len() < 2 {
            errs.push("estimation needs at least two instruments".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SkyError::Validation { messages: errs })
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"seed": 9, "counterfactual": {"seeds": 2}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.counterfactual.seeds, 2);
        assert_eq!(cfg.counterfactual.orderings.len(), 3);
        assert_eq!(cfg.fixed_cost, FixedCostConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 1}"#).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"sed": 1}"#).unwrap();
        let err = PipelineConfig::load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("sed"), "{err}");
    }

    #[test]
    fn default_root_seed_matches_the_generator() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.seed, cfg.synthetic.seed);
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let b = a.clone().with_seed(3);
        assert_eq!(a.hash(), PipelineConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn invalid_values_are_listed() {
        let mut cfg = PipelineConfig::default();
        cfg.counterfactual.quarter = 7;
        cfg.synthetic.lambda = 2.0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("counterfactual.quarter") && msg.contains("synthetic: lambda"), "{msg}");
    }

    #[test]
    fn grid_uses_configured_steps() {
        let fc = FixedCostConfig {
            step: 2.0,
            half_width: 10.0,
            ..FixedCostConfig::default()
        };
        let g = fc.grid([0.0, 50.0, 4.0, -10.0]);
        assert_eq!(g.step, 2.0);
        assert_eq!(g.lower[1], 40.0);
        assert_eq!(g.upper[3], 0.0);
    }
}
