//! Structural model of airline network competition: nested-logit demand,
//! multiproduct Bertrand pricing, fixed costs bounded by moment inequalities,
//! and network counterfactuals under carbon pricing and mergers.

pub mod config;
pub mod counterfactual;
pub mod datagen;
pub mod demand;
pub mod design;
pub mod error;
pub mod estimation;
pub mod evaluator;
pub mod fixedcost;
pub mod io;
pub mod linalg;
pub mod merger;
pub mod pipeline;
pub mod model;
pub mod pricing;
pub mod rng;
pub mod shocks;
pub mod units;
pub mod welfare;

pub use error::{Result, SkyError};
