//! Host topology discovery, from the operating system or from a fixed description.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use hicr_core::{ComputeResource, Device, HicrError, MemorySpace, Result, Topology, TopologyManager};
use serde_json::Value;

pub const HOST_DEVICE_KIND: &str = "numa-domain";
pub const HOST_MEMORY_KIND: &str = "host-ram";
pub const HOST_CORE_KIND: &str = "cpu-core";

const FALLBACK_MEMORY: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HostTopologyConfig {
    OsQuery,
    Synthetic(Topology),
}

impl HostTopologyConfig {
    /// Parses `{"mode":"osQuery"}` or `{"mode":"synthetic","devices":[...]}`.
    pub fn from_json(s: &str) -> Result<Self> {
        let mut v: Value = serde_json::from_str(s).map_err(|e| HicrError::MalformedTopology(e.to_string()))?;
        let obj =
            v.as_object_mut().ok_or_else(|| HicrError::MalformedTopology("config must be a JSON object".into()))?;
        let mode = obj.remove("mode").and_then(|m| m.as_str().map(str::to_owned));
        match mode.as_deref() {
            Some("osQuery") => {
                if obj.contains_key("devices") {
                    return Err(HicrError::MalformedTopology("osQuery mode takes no devices".into()));
                }
                Ok(HostTopologyConfig::OsQuery)
            }
            Some("synthetic") => {
                let t: Topology = serde_json::from_value(v).map_err(|e| HicrError::MalformedTopology(e.to_string()))?;
                t.validate()?;
                Ok(HostTopologyConfig::Synthetic(t))
            }
            other => Err(HicrError::MalformedTopology(format!("unknown mode {other:?}"))),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub struct HostTopologyManager {
    config: HostTopologyConfig,
    degraded: AtomicBool,
}

impl HostTopologyManager {
    pub fn new(config: HostTopologyConfig) -> Self {
        Self { config, degraded: AtomicBool::new(false) }
    }

    pub fn os_query() -> Self {
        Self::new(HostTopologyConfig::OsQuery)
    }

    pub fn synthetic(t: Topology) -> Self {
        Self::new(HostTopologyConfig::Synthetic(t))
    }

    /// True if the last OS query fell back to the 1-core/1-GiB default.
    pub fn last_query_degraded(&self) -> bool {
        self.degraded.load(Ordering::Relaxed)
    }
}

impl TopologyManager for HostTopologyManager {
    fn query_topology(&self) -> Result<Topology> {
        match &self.config {
            HostTopologyConfig::Synthetic(t) => Ok(t.clone()),
            HostTopologyConfig::OsQuery => {
                let (cores, memory, degraded) = match (allowed_cpus(), total_memory()) {
                    (Some(c), Some(m)) if !c.is_empty() && m > 0 => (c, m, false),
                    (c, m) => {
                        log::warn!("host topology query incomplete, falling back to defaults");
                        (c.filter(|c| !c.is_empty()).unwrap_or_else(|| vec![0]), m.unwrap_or(FALLBACK_MEMORY), true)
                    }
                };
                self.degraded.store(degraded, Ordering::Relaxed);
                Ok(host_topology(&cores, memory))
            }
        }
    }
}

fn host_topology(cores: &[u32], memory: u64) -> Topology {
    let mut d = Device::new(0, HOST_DEVICE_KIND).with_memory_space(MemorySpace::new(0, memory, HOST_MEMORY_KIND));
    for (i, &core) in cores.iter().enumerate() {
        d = d.with_compute_resource(ComputeResource::new(i as u32, HOST_CORE_KIND, Some(core)));
    }
    Topology::new(vec![d])
}

/// Logical cores this process may run on.
#[cfg(target_os = "linux")]
pub fn allowed_cpus() -> Option<Vec<u32>> {
    // SAFETY: cpu_set_t is plain data; sched_getaffinity fills it.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) != 0 {
            return None;
        }
        Some((0..libc::CPU_SETSIZE as usize).filter(|&c| libc::CPU_ISSET(c, &set)).map(|c| c as u32).collect())
    }
}

#[cfg(not(target_os = "linux"))]
pub fn allowed_cpus() -> Option<Vec<u32>> {
    std::thread::available_parallelism().ok().map(|n| (0..n.get() as u32).collect())
}

fn total_memory() -> Option<u64> {
    let text = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = text.lines().find(|l| l.starts_with("MemTotal:"))?;
    let kib: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kib * 1024)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_devices() -> Topology {
        Topology::new(vec![
            Device::new(0, "numa-domain")
                .with_memory_space(MemorySpace::new(0, 4096, "ram"))
                .with_compute_resource(ComputeResource::new(0, "core", Some(0))),
            Device::new(1, "synthetic-accelerator").with_memory_space(MemorySpace::new(1, 1 << 20, "hbm")),
        ])
    }

    #[test]
    fn synthetic_echoes_spec() {
        let tm = HostTopologyManager::synthetic(two_devices());
        assert_eq!(tm.query_topology().unwrap(), two_devices());
    }

    #[test]
    fn os_query_is_deterministic() {
        let tm = HostTopologyManager::os_query();
        let a = tm.query_topology().unwrap();
        let b = tm.query_topology().unwrap();
        assert_eq!(a, b);
        assert!(a.compute_resources().count() >= 1);
        assert_eq!(a.memory_spaces().count(), 1);
    }

    #[test]
    fn config_parsing() {
        assert_eq!(HostTopologyConfig::from_json(r#"{"mode":"osQuery"}"#).unwrap(), HostTopologyConfig::OsQuery);
        let mut json: Value = serde_json::from_str(&two_devices().to_json()).unwrap();
        json["mode"] = "synthetic".into();
        assert_eq!(
            HostTopologyConfig::from_json(&json.to_string()).unwrap(),
            HostTopologyConfig::Synthetic(two_devices())
        );
        assert!(HostTopologyConfig::from_json(r#"{"mode":"magic"}"#).is_err());
        assert!(HostTopologyConfig::from_json(r#"{"devices":[]}"#).is_err());
    }
}
