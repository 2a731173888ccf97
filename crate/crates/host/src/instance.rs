//! Single-instance deployment: the process itself is the only, root, instance.

use std::sync::Arc;

use hicr_core::{HicrError, Instance, InstanceId, InstanceManager, InstanceTemplate, Result, TopologyManager};

pub struct HostInstanceManager {
    current: Instance,
    topology: Arc<dyn TopologyManager>,
}

impl HostInstanceManager {
    pub fn new(topology: Arc<dyn TopologyManager>) -> Self {
        Self { current: Instance::new(InstanceId(0), true), topology }
    }
}

impl InstanceManager for HostInstanceManager {
    fn get_instances(&self) -> Result<Vec<Instance>> {
        Ok(vec![self.current.clone()])
    }

    fn current_instance(&self) -> Instance {
        self.current.clone()
    }

    /// Checks the template against the local topology, then refuses: new
    /// instances need a multi-process backend.
    fn create_instances(&self, count: usize, template: &InstanceTemplate) -> Result<Vec<Instance>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let local = self.topology.query_topology()?;
        if !local.satisfies(&template.required_topology) {
            return Err(HicrError::TemplateUnsatisfiable("host topology lacks required resources".into()));
        }
        Err(HicrError::SpawnFailure("the host backend cannot create instances".into()))
    }
}
