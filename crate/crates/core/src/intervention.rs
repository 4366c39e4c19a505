use std::collections::BTreeMap;

use crate::dag::{CausalDag, NodeKind};
use crate::error::{Error, Result};

/// A partial assignment `{node := value}`. Values are in data units; discrete
/// nodes take their class label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InterventionSpec {
    pub assignments: BTreeMap<String, f64>,
}

impl InterventionSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, node: impl Into<String>, value: f64) -> Self {
        self.assignments.insert(node.into(), value);
        self
    }

    /// Two-wave treatment arm `{A1 := a1, A2 := a2}`.
    pub fn arm(a1: u8, a2: u8) -> Self {
        Self::new().with("A1", a1 as f64).with("A2", a2 as f64)
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Parses `A1=1,A2=0`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidIntervention(format!("expected NAME=VALUE, got `{part}`")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidIntervention(format!("bad value in `{part}`")))?;
            spec.assignments.insert(name.trim().to_string(), value);
        }
        Ok(spec)
    }

    /// Resolves names to per-node clamps, checking node existence and labels.
    pub fn resolve(&self, dag: &CausalDag) -> Result<Vec<Option<f64>>> {
        let mut clamps = vec![None; dag.len()];
        for (name, &value) in &self.assignments {
            let i = dag
                .index_of(name)
                .map_err(|_| Error::InvalidIntervention(format!("unknown node `{name}`")))?;
            if !value.is_finite() {
                return Err(Error::InvalidIntervention(format!("{name} := {value}")));
            }
            if let NodeKind::Discrete { n_classes } = dag.node(i).kind {
                if value.fract() != 0.0 || value < 0.0 || value >= n_classes as f64 {
                    return Err(Error::InvalidIntervention(format!(
                        "{name} := {value} is not a label in 0..{n_classes}"
                    )));
                }
            }
            clamps[i] = Some(value);
        }
        Ok(clamps)
    }
}
