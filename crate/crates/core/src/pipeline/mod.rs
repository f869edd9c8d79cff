//! Stage orchestration over a run directory.
//!
//! Each stage reads its predecessors' artefacts from well-known
//! subdirectories of the run root and writes its own, together with one
//! `manifest.json`, into a fresh subdirectory:
//!
//! ```text
//! data/                     generate (or user CSVs)
//! estimate/                 estimate
//! fixedcost/                fixedcost
//! rationalize/              rationalize
//! simulate/<scenario>/      simulate
//! merge/<a>-<b>/<scenario>/ merge
//! report/<kind>/            report
//! ```

pub mod manifest;
pub mod rows;
mod stages;

use std::path::{Path, PathBuf};

pub use manifest::{dataset_hash, FileDigest, RunManifest, MANIFEST_FILE};
pub use stages::*;

use crate::counterfactual::ScenarioName;

pub const DATA_DIR: &str = "data";
pub const ESTIMATE_DIR: &str = "estimate";
pub const FIXEDCOST_DIR: &str = "fixedcost";
pub const RATIONALIZE_DIR: &str = "rationalize";
pub const SIMULATE_DIR: &str = "simulate";
pub const MERGE_DIR: &str = "merge";
pub const REPORT_DIR: &str = "report";

/// Locations of every stage's artefacts.
#[derive(Clone, Debug, PartialEq)]
pub struct Workspace {
    pub root: PathBuf,
    /// Dataset bundle; `root/data` unless pointed at user CSVs.
    pub data: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        Workspace {
            data: root.join(DATA_DIR),
            root,
        }
    }

    pub fn with_data(mut self, data: impl Into<PathBuf>) -> Self {
        self.data = data.into();
        self
    }

    pub fn estimate(&self) -> PathBuf {
        self.root.join(ESTIMATE_DIR)
    }

    pub fn fixedcost(&self) -> PathBuf {
        self.root.join(FIXEDCOST_DIR)
    }

    pub fn rationalize(&self) -> PathBuf {
        self.root.join(RATIONALIZE_DIR)
    }

    pub fn simulate(&self, scenario: ScenarioName) -> PathBuf {
        self.root.join(SIMULATE_DIR).join(scenario.as_str())
    }

    pub fn merge(&self, a: &str, b: &str, scenario: ScenarioName) -> PathBuf {
        self.root.join(MERGE_DIR).join(format!("{a}-{b}")).join(scenario.as_str())
    }

    pub fn report(&self, kind: &str) -> PathBuf {
        self.root.join(REPORT_DIR).join(kind)
    }
}

fn rel(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).display().to_string()
}
