//! Scenario files: the JSON surface for configuring runs.
//!
//! A scenario mirrors [`SimConfig`] field by field, plus artifact settings
//! the front end consumes. Unknown keys are rejected, and every parse error
//! carries the JSON path of the offending field.

use std::collections::BTreeMap;

use serde::Deserialize;
use thiserror::Error;

use crate::adversary::{AdversaryStrategy, SchedulerPolicy};
use crate::geometry::{NodeId, Point};
use crate::sim::{BroadcastMode, SimConfig, DEFAULT_MAX_EVENTS};
use crate::validity::{PredicateSpec, ValidityError};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub n: usize,
    pub t: usize,
    pub m: usize,
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_broadcast")]
    pub broadcast: BroadcastMode,
    pub inputs: Vec<Point>,
    /// Strategies keyed by node index. JSON object keys are strings, so the
    /// indices are parsed (and validated) when the scenario is lowered.
    #[serde(default)]
    pub adversaries: BTreeMap<String, AdversaryStrategy>,
    #[serde(default = "default_scheduler")]
    pub scheduler: SchedulerPolicy,
    #[serde(default)]
    pub predicate: PredicateSpec,
    #[serde(default = "default_max_events")]
    pub max_events: u64,
    #[serde(default)]
    pub lower_bound_demo: bool,
    /// Record the full trace stream (the digest is always computed).
    #[serde(default)]
    pub trace: bool,
    /// Treat monitor failures as run failures.
    #[serde(default = "default_true")]
    pub monitors: bool,
    /// Directory for CSV and trace artifacts; the front end's `--out` flag
    /// takes precedence.
    #[serde(default)]
    pub out_dir: Option<String>,
}

fn default_broadcast() -> BroadcastMode {
    BroadcastMode::Ideal
}

fn default_scheduler() -> SchedulerPolicy {
    SchedulerPolicy::Fifo
}

fn default_max_events() -> u64 {
    DEFAULT_MAX_EVENTS
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    // The cause is folded into the message rather than exposed as a source,
    // so error chains don't print it twice.
    #[error("{path}: {cause}")]
    Parse { path: String, cause: serde_json::Error },
    #[error("adversaries.{key}: keys must be node indices")]
    BadAdversaryKey { key: String },
    #[error("predicate: {0}")]
    Predicate(#[from] ValidityError),
}

/// Parses scenario JSON, reporting the path to any malformed field.
pub fn parse_scenario(text: &str) -> Result<ScenarioFile, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|err| ScenarioError::Parse {
        path: err.path().to_string(),
        cause: err.into_inner(),
    })
}

impl ScenarioFile {
    /// Lowers the file into a runnable configuration. Structural problems
    /// (bad keys, unbuildable predicates) surface here; numeric consistency
    /// is [`SimConfig::validate`]'s job.
    pub fn into_config(self) -> Result<SimConfig, ScenarioError> {
        let mut adversaries = BTreeMap::new();
        for (key, strategy) in self.adversaries {
            let id: NodeId = key
                .parse()
                .map_err(|_| ScenarioError::BadAdversaryKey { key: key.clone() })?;
            adversaries.insert(id, strategy);
        }
        let predicate = self.predicate.build()?;
        Ok(SimConfig {
            n: self.n,
            t: self.t,
            m: self.m,
            epsilon: self.epsilon,
            seed: self.seed,
            broadcast_mode: self.broadcast,
            inputs: self.inputs,
            adversaries,
            scheduler: self.scheduler,
            predicate,
            max_events: self.max_events,
            lower_bound_demo: self.lower_bound_demo,
            record_trace: self.trace,
            monitors_enabled: self.monitors,
        })
    }
}
