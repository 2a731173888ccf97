#![allow(dead_code)]

use std::process::{Command, Output};

use serde_json::Value;

pub const LAUNCH: &str = env!("CARGO_BIN_EXE_hicr-launch");
pub const BENCH: &str = env!("CARGO_BIN_EXE_hicr-bench");

/// Runs `hicr-bench args` alone (host backend) or under the launcher with
/// `instances` processes (net backend).
pub fn bench(instances: Option<usize>, args: &[&str]) -> Output {
    let mut cmd = match instances {
        None => Command::new(BENCH),
        Some(n) => {
            let mut c = Command::new(LAUNCH);
            c.args(["--instances", &n.to_string(), "--grace-secs", "5", "--", BENCH]);
            c
        }
    };
    cmd.args(args).env_remove("HICR_INSTANCE_COUNT").output().expect("run bench binary")
}

/// Parsed stdout of a successful run.
pub fn json_of(out: &Output) -> Result<Value, String> {
    if !out.status.success() {
        return Err(format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| format!("bad json ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

/// Schema violations of `doc` against the shipped schema `name`.
pub fn schema_errors(name: &str, doc: &Value) -> Vec<String> {
    let schema: Value = serde_json::from_str(hicr_bench::schema(name).expect("shipped schema")).unwrap();
    let v = jsonschema::validator_for(&schema).expect("valid schema");
    v.iter_errors(doc).map(|e| e.to_string()).collect()
}

pub fn checked(name: &str, out: &Output) -> Result<Value, String> {
    let doc = json_of(out)?;
    let errs = schema_errors(name, &doc);
    if errs.is_empty() {
        Ok(doc)
    } else {
        Err(format!("{name} output violates its schema: {errs:?}"))
    }
}
