//! Launch environment and per-instance settings.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use hicr_core::{HicrError, InstanceTemplate, Result};

pub const ENV_INSTANCE_INDEX: &str = "HICR_INSTANCE_INDEX";
pub const ENV_INSTANCE_COUNT: &str = "HICR_INSTANCE_COUNT";
pub const ENV_COORD_ADDR: &str = "HICR_COORD_ADDR";
pub const ENV_JOINED_AT_RUNTIME: &str = "HICR_JOINED_AT_RUNTIME";
/// Set on runtime-spawned instances only.
pub const ENV_SPAWN_REQUEST: &str = "HICR_SPAWN_REQUEST";
pub const ENV_SPAWN_PARENT: &str = "HICR_SPAWN_PARENT";
pub const ENV_SPAWN_TEMPLATE: &str = "HICR_SPAWN_TEMPLATE";

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);
pub const DEFAULT_COLLECTIVE_TIMEOUT: Duration = Duration::from_secs(300);

/// How a runtime-spawned instance finds its way into the deployment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinRequest {
    pub request_id: u64,
    pub spawner: u64,
    pub template: InstanceTemplate,
}

/// Starts one new instance given its environment. Returns a handle that
/// reports early exit.
pub type SpawnHook = Arc<dyn Fn(&[(String, String)]) -> Result<Box<dyn SpawnedChild>> + Send + Sync>;

pub trait SpawnedChild: Send {
    /// `Some(description)` once the child has exited.
    fn exited(&mut self) -> Option<String>;

    /// Waits for exit, killing the child if it outlives `grace`.
    fn reap(&mut self, grace: Duration);
}

#[derive(Clone)]
pub struct NetConfig {
    pub index: u64,
    pub count: u64,
    pub coord_addr: String,
    pub join: Option<JoinRequest>,
    /// Connect/read and point-to-point reply timeout.
    pub timeout: Duration,
    /// Waiting time for collectives, remote procedure replies and teardown.
    pub collective_timeout: Duration,
    /// How to start runtime instances; defaults to re-running this program.
    pub spawn_hook: Option<SpawnHook>,
}

impl std::fmt::Debug for NetConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NetConfig")
            .field("index", &self.index)
            .field("count", &self.count)
            .field("coord_addr", &self.coord_addr)
            .field("join", &self.join)
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl NetConfig {
    pub fn launch(index: u64, count: u64, coord_addr: impl Into<String>) -> Self {
        Self {
            index,
            count,
            coord_addr: coord_addr.into(),
            join: None,
            timeout: DEFAULT_TIMEOUT,
            collective_timeout: DEFAULT_COLLECTIVE_TIMEOUT,
            spawn_hook: None,
        }
    }

    pub fn is_coordinator(&self) -> bool {
        self.join.is_none() && self.index == 0
    }

    pub fn with_timeout(mut self, t: Duration) -> Self {
        self.timeout = t;
        self
    }

    pub fn with_collective_timeout(mut self, t: Duration) -> Self {
        self.collective_timeout = t;
        self
    }

    pub fn with_spawn_hook(mut self, hook: SpawnHook) -> Self {
        self.spawn_hook = Some(hook);
        self
    }

    pub fn from_env() -> Result<Self> {
        let vars: HashMap<String, String> = std::env::vars().collect();
        Self::from_vars(&vars)
    }

    pub fn from_vars(vars: &HashMap<String, String>) -> Result<Self> {
        let get = |k: &str| vars.get(k).cloned().ok_or_else(|| HicrError::MissingEnvironment(k.into()));
        let num = |k: &str| -> Result<u64> {
            get(k)?.trim().parse().map_err(|_| HicrError::MissingEnvironment(format!("{k} (not a number)")))
        };
        let coord_addr = get(ENV_COORD_ADDR)?;
        let joined = vars.get(ENV_JOINED_AT_RUNTIME).map(|v| v.trim() == "1").unwrap_or(false);
        let mut cfg = if joined {
            let template = match vars.get(ENV_SPAWN_TEMPLATE) {
                Some(t) => serde_json::from_str(t)
                    .map_err(|e| HicrError::MissingEnvironment(format!("{ENV_SPAWN_TEMPLATE} ({e})")))?,
                None => InstanceTemplate::default(),
            };
            let mut c = Self::launch(u64::MAX, num(ENV_INSTANCE_COUNT).unwrap_or(0), coord_addr);
            c.join =
                Some(JoinRequest { request_id: num(ENV_SPAWN_REQUEST)?, spawner: num(ENV_SPAWN_PARENT)?, template });
            c
        } else {
            let index = num(ENV_INSTANCE_INDEX)?;
            let count = num(ENV_INSTANCE_COUNT)?;
            if count == 0 || index >= count {
                return Err(HicrError::MissingEnvironment(format!("{ENV_INSTANCE_INDEX}={index} outside 0..{count}")));
            }
            Self::launch(index, count, coord_addr)
        };
        if let Some(ms) = vars.get("HICR_TIMEOUT_MS").and_then(|v| v.parse().ok()) {
            cfg.timeout = Duration::from_millis(ms);
        }
        Ok(cfg)
    }
}

/// Default spawn hook: runs `program args` with the child environment added.
pub fn process_spawn_hook(program: PathBuf, args: Vec<String>) -> SpawnHook {
    Arc::new(move |env| {
        let child = std::process::Command::new(&program)
            .args(&args)
            .envs(env.iter().map(|(k, v)| (k.as_str(), v.as_str())))
            .spawn()
            .map_err(|e| HicrError::SpawnFailure(format!("{}: {e}", program.display())))?;
        Ok(Box::new(ProcessChild(child)) as Box<dyn SpawnedChild>)
    })
}

/// Re-runs the current executable with the current arguments.
pub fn self_spawn_hook() -> Result<SpawnHook> {
    let exe = std::env::current_exe().map_err(|e| HicrError::SpawnFailure(e.to_string()))?;
    Ok(process_spawn_hook(exe, std::env::args().skip(1).collect()))
}

struct ProcessChild(std::process::Child);

impl SpawnedChild for ProcessChild {
    fn exited(&mut self) -> Option<String> {
        match self.0.try_wait() {
            Ok(Some(status)) => Some(status.to_string()),
            Ok(None) => None,
            Err(e) => Some(e.to_string()),
        }
    }

    fn reap(&mut self, grace: Duration) {
        let deadline = std::time::Instant::now() + grace;
        while std::time::Instant::now() < deadline {
            if !matches!(self.0.try_wait(), Ok(None)) {
                return;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> HashMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn launch_env_parsed() {
        let c = NetConfig::from_vars(&vars(&[
            (ENV_INSTANCE_INDEX, "2"),
            (ENV_INSTANCE_COUNT, "4"),
            (ENV_COORD_ADDR, "127.0.0.1:9000"),
            (ENV_JOINED_AT_RUNTIME, "0"),
        ]))
        .unwrap();
        assert_eq!((c.index, c.count, c.coord_addr.as_str()), (2, 4, "127.0.0.1:9000"));
        assert!(c.join.is_none() && !c.is_coordinator());
    }

    #[test]
    fn missing_variables_reported() {
        assert!(matches!(NetConfig::from_vars(&vars(&[])), Err(HicrError::MissingEnvironment(_))));
        let e = NetConfig::from_vars(&vars(&[(ENV_COORD_ADDR, "x:1"), (ENV_INSTANCE_COUNT, "2")]));
        assert_eq!(e.unwrap_err(), HicrError::MissingEnvironment(ENV_INSTANCE_INDEX.into()));
        let e = NetConfig::from_vars(&vars(&[
            (ENV_COORD_ADDR, "x:1"),
            (ENV_INSTANCE_COUNT, "2"),
            (ENV_INSTANCE_INDEX, "2"),
        ]));
        assert!(matches!(e, Err(HicrError::MissingEnvironment(_))));
    }

    #[test]
    fn joined_env_parsed() {
        let c = NetConfig::from_vars(&vars(&[
            (ENV_COORD_ADDR, "127.0.0.1:9000"),
            (ENV_JOINED_AT_RUNTIME, "1"),
            (ENV_SPAWN_REQUEST, "77"),
            (ENV_SPAWN_PARENT, "0"),
        ]))
        .unwrap();
        assert_eq!(c.join.as_ref().unwrap().request_id, 77);
        assert!(!c.is_coordinator());
    }
}
