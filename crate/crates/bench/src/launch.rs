//! Starts the instances of a deployment as local processes.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus};
use std::time::{Duration, Instant};

use hicr_net::config::{ENV_COORD_ADDR, ENV_INSTANCE_COUNT, ENV_INSTANCE_INDEX, ENV_JOINED_AT_RUNTIME};

use crate::error::{BenchError, Result};

#[derive(Debug, Clone)]
pub struct LaunchSpec {
    pub instances: usize,
    /// Coordinator address; a free loopback port when absent.
    pub coord: Option<String>,
    pub program: PathBuf,
    pub args: Vec<String>,
    /// How long the other instances may run on after one has failed.
    pub grace: Duration,
}

/// Environment of instance `index` of `count`.
pub fn instance_env(index: usize, count: usize, coord: &str) -> Vec<(&'static str, String)> {
    vec![
        (ENV_INSTANCE_INDEX, index.to_string()),
        (ENV_INSTANCE_COUNT, count.to_string()),
        (ENV_COORD_ADDR, coord.to_string()),
        (ENV_JOINED_AT_RUNTIME, "0".to_string()),
    ]
}

/// Bare program names are looked up next to the launcher first, then on PATH.
pub fn resolve_program(program: &Path) -> PathBuf {
    if program.components().count() == 1 {
        if let Some(dir) = std::env::current_exe().ok().and_then(|e| e.parent().map(Path::to_path_buf)) {
            let sibling = dir.join(program);
            if sibling.is_file() {
                return sibling;
            }
        }
    }
    program.to_path_buf()
}

pub fn free_loopback_addr() -> Result<String> {
    let l = TcpListener::bind("127.0.0.1:0")?;
    Ok(l.local_addr()?.to_string())
}

fn exit_code(status: ExitStatus) -> i32 {
    if let Some(c) = status.code() {
        return c;
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(sig) = status.signal() {
            return 128 + sig;
        }
    }
    1
}

/// Runs all instances to completion. Returns 0 if every instance exited with
/// 0, otherwise the exit code of the first instance that failed.
pub fn launch(spec: &LaunchSpec) -> Result<i32> {
    if spec.instances == 0 {
        return Err(BenchError::InvalidConfig("at least one instance is needed".into()));
    }
    let coord = match &spec.coord {
        Some(c) => c.clone(),
        None => free_loopback_addr()?,
    };
    let program = resolve_program(&spec.program);
    let mut children: Vec<Child> = Vec::with_capacity(spec.instances);
    for i in 0..spec.instances {
        let spawned = Command::new(&program).args(&spec.args).envs(instance_env(i, spec.instances, &coord)).spawn();
        match spawned {
            Ok(c) => children.push(c),
            Err(e) => {
                for c in &mut children {
                    let _ = c.kill();
                    let _ = c.wait();
                }
                return Err(BenchError::SpawnFailure(format!("{}: {e}", program.display())));
            }
        }
    }
    log::debug!("started {} instances of {} with coordinator {coord}", spec.instances, program.display());
    let mut codes: Vec<Option<i32>> = vec![None; children.len()];
    let mut failed: Option<(usize, i32)> = None;
    let mut deadline: Option<Instant> = None;
    while codes.iter().any(Option::is_none) {
        for (i, c) in children.iter_mut().enumerate() {
            if codes[i].is_some() {
                continue;
            }
            if let Some(status) = c.try_wait()? {
                let code = exit_code(status);
                codes[i] = Some(code);
                if code != 0 && failed.is_none() {
                    log::warn!("instance {i} exited with {code}");
                    failed = Some((i, code));
                    deadline = Some(Instant::now() + spec.grace);
                }
            }
        }
        if deadline.is_some_and(|d| Instant::now() >= d) {
            for (i, c) in children.iter_mut().enumerate() {
                if codes[i].is_none() {
                    log::warn!("stopping instance {i} after a peer failed");
                    let _ = c.kill();
                    codes[i] = Some(exit_code(c.wait()?));
                }
            }
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    Ok(failed.map_or(0, |(_, code)| code))
}
