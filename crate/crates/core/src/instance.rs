use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::topology::Topology;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstanceId(pub u64);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceState {
    Active,
    Finalized,
}

/// An independently executing participant of a deployment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: InstanceId,
    pub is_root: bool,
    pub state: InstanceState,
}

impl Instance {
    pub fn new(id: InstanceId, is_root: bool) -> Self {
        Self { id, is_root, state: InstanceState::Active }
    }

    pub fn is_root(&self) -> bool {
        self.is_root
    }
}

/// Minimum hardware requirements plus free-form metadata for new instances.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceTemplate {
    pub required_topology: Topology,
    pub metadata: BTreeMap<String, String>,
}

impl InstanceTemplate {
    pub fn new(required_topology: Topology) -> Self {
        Self { required_topology, metadata: BTreeMap::new() }
    }
}
