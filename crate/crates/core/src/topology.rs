//! Serializable hardware model of one instance.
//!
//! The canonical wire form is JSON with the field order
//! `devices[] { deviceId, kind, memorySpaces[] { spaceId, sizeBytes, kind },
//! computeResources[] { resourceId, kind, affinity } }`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{HicrError, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub devices: Vec<Device>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Device {
    pub device_id: u32,
    pub kind: String,
    #[serde(default)]
    pub memory_spaces: Vec<MemorySpace>,
    #[serde(default)]
    pub compute_resources: Vec<ComputeResource>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorySpace {
    #[serde(rename = "spaceId")]
    pub space_id: u32,
    /// Physical capacity, not addressable range.
    #[serde(rename = "sizeBytes")]
    pub physical_size_bytes: u64,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeResource {
    #[serde(rename = "resourceId")]
    pub resource_id: u32,
    pub kind: String,
    /// Logical core index the resource maps to, if any.
    #[serde(rename = "affinity", default)]
    pub affinity_hint: Option<u32>,
}

impl MemorySpace {
    pub fn new(space_id: u32, physical_size_bytes: u64, kind: impl Into<String>) -> Self {
        Self { space_id, physical_size_bytes, kind: kind.into() }
    }
}

impl ComputeResource {
    pub fn new(resource_id: u32, kind: impl Into<String>, affinity_hint: Option<u32>) -> Self {
        Self { resource_id, kind: kind.into(), affinity_hint }
    }
}

impl Device {
    pub fn new(device_id: u32, kind: impl Into<String>) -> Self {
        Self { device_id, kind: kind.into(), memory_spaces: Vec::new(), compute_resources: Vec::new() }
    }

    pub fn with_memory_space(mut self, space: MemorySpace) -> Self {
        self.memory_spaces.push(space);
        self
    }

    pub fn with_compute_resource(mut self, resource: ComputeResource) -> Self {
        self.compute_resources.push(resource);
        self
    }
}

impl Topology {
    pub fn new(devices: Vec<Device>) -> Self {
        Self { devices }
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn memory_spaces(&self) -> impl Iterator<Item = &MemorySpace> {
        self.devices.iter().flat_map(|d| d.memory_spaces.iter())
    }

    pub fn compute_resources(&self) -> impl Iterator<Item = &ComputeResource> {
        self.devices.iter().flat_map(|d| d.compute_resources.iter())
    }

    /// Checks the identifier and capacity invariants.
    pub fn validate(&self) -> Result<()> {
        let mut devices = HashSet::new();
        let mut spaces = HashSet::new();
        let mut resources = HashSet::new();
        for d in &self.devices {
            if !devices.insert(d.device_id) {
                return Err(HicrError::MalformedTopology(format!("duplicate device id {}", d.device_id)));
            }
            for s in &d.memory_spaces {
                if s.physical_size_bytes == 0 {
                    return Err(HicrError::MalformedTopology(format!("memory space {} has zero size", s.space_id)));
                }
                if !spaces.insert(s.space_id) {
                    return Err(HicrError::MalformedTopology(format!("duplicate memory space id {}", s.space_id)));
                }
            }
            for r in &d.compute_resources {
                if !resources.insert(r.resource_id) {
                    return Err(HicrError::MalformedTopology(format!(
                        "duplicate compute resource id {}",
                        r.resource_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("topology serialization cannot fail")
    }

    pub fn serialize(&self) -> Vec<u8> {
        self.to_json().into_bytes()
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let t: Topology = serde_json::from_slice(bytes).map_err(|e| HicrError::MalformedTopology(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::deserialize(s.as_bytes())
    }

    /// Whether this topology offers at least the resources in `required`.
    ///
    /// Each required device is matched first-fit to a distinct device of the
    /// same kind (an empty required kind matches anything) with at least as
    /// many compute resources and, per required memory space, a distinct space
    /// at least as large.
    pub fn satisfies(&self, required: &Topology) -> bool {
        let mut used = vec![false; self.devices.len()];
        let mut reqs: Vec<&Device> = required.devices.iter().collect();
        reqs.sort_by_key(|d| std::cmp::Reverse(d.compute_resources.len()));
        'req: for req in reqs {
            for (i, dev) in self.devices.iter().enumerate() {
                if used[i] {
                    continue;
                }
                if !req.kind.is_empty() && req.kind != dev.kind {
                    continue;
                }
                if dev.compute_resources.len() < req.compute_resources.len() {
                    continue;
                }
                if !covers_spaces(&dev.memory_spaces, &req.memory_spaces) {
                    continue;
                }
                used[i] = true;
                continue 'req;
            }
            return false;
        }
        true
    }
}

fn covers_spaces(available: &[MemorySpace], required: &[MemorySpace]) -> bool {
    let mut avail: Vec<u64> = available.iter().map(|s| s.physical_size_bytes).collect();
    avail.sort_unstable();
    let mut req: Vec<u64> = required.iter().map(|s| s.physical_size_bytes).collect();
    req.sort_unstable_by(|a, b| b.cmp(a));
    let mut taken = vec![false; avail.len()];
    for r in req {
        // smallest free space that fits
        match (0..avail.len()).find(|&i| !taken[i] && avail[i] >= r) {
            Some(i) => taken[i] = true,
            None => return false,
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    const GIB: u64 = 1 << 30;

    fn numa_example() -> Topology {
        Topology::new(vec![Device::new(0, "numa-domain")
            .with_memory_space(MemorySpace::new(0, 64 * GIB, "ram"))
            .with_memory_space(MemorySpace::new(1, 64 * GIB, "ram"))
            .with_compute_resource(ComputeResource::new(0, "core", Some(0)))
            .with_compute_resource(ComputeResource::new(1, "core", Some(1)))
            .with_compute_resource(ComputeResource::new(2, "core", Some(2)))
            .with_compute_resource(ComputeResource::new(3, "core", None))])
    }

    #[test]
    fn empty_topology_round_trips() {
        let t = Topology::default();
        let bytes = t.serialize();
        assert_eq!(std::str::from_utf8(&bytes).unwrap(), r#"{"devices":[]}"#);
        assert_eq!(Topology::deserialize(&bytes).unwrap(), t);
    }

    #[test]
    fn numa_example_round_trips() {
        let t = numa_example();
        let back = Topology::deserialize(&t.serialize()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.memory_spaces().map(|s| s.physical_size_bytes).sum::<u64>(), 128 * GIB);
        assert_eq!(back.compute_resources().count(), 4);
    }

    #[test]
    fn canonical_field_order() {
        let t = Topology::new(vec![Device::new(7, "x")
            .with_memory_space(MemorySpace::new(1, 2, "m"))
            .with_compute_resource(ComputeResource::new(3, "c", None))]);
        assert_eq!(
            t.to_json(),
            r#"{"devices":[{"deviceId":7,"kind":"x","memorySpaces":[{"spaceId":1,"sizeBytes":2,"kind":"m"}],"computeResources":[{"resourceId":3,"kind":"c","affinity":null}]}]}"#
        );
    }

    #[test]
    fn truncated_stream_is_malformed() {
        let bytes = numa_example().serialize();
        let err = Topology::deserialize(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, HicrError::MalformedTopology(_)));
    }

    #[test]
    fn zero_sized_space_rejected() {
        let json = r#"{"devices":[{"deviceId":0,"kind":"d","memorySpaces":[{"spaceId":0,"sizeBytes":0,"kind":"m"}],"computeResources":[]}]}"#;
        assert!(matches!(Topology::from_json(json), Err(HicrError::MalformedTopology(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let t = Topology::new(vec![Device::new(0, "a"), Device::new(0, "b")]);
        assert!(t.validate().is_err());
    }

    #[test]
    fn satisfaction() {
        let host = numa_example();
        assert!(host.satisfies(&Topology::default()));
        let small = Topology::new(vec![Device::new(0, "")
            .with_memory_space(MemorySpace::new(0, GIB, "ram"))
            .with_compute_resource(ComputeResource::new(0, "core", None))]);
        assert!(host.satisfies(&small));
        let mut huge = Device::new(0, "");
        for i in 0..1_000 {
            huge = huge.with_compute_resource(ComputeResource::new(i, "core", None));
        }
        assert!(!host.satisfies(&Topology::new(vec![huge])));
        let too_much_memory =
            Topology::new(vec![Device::new(0, "").with_memory_space(MemorySpace::new(0, 65 * GIB, "ram"))]);
        assert!(!host.satisfies(&too_much_memory));
        let wrong_kind = Topology::new(vec![Device::new(0, "npu")]);
        assert!(!host.satisfies(&wrong_kind));
    }
}
