//! Launcher and desk-scale benchmarks built on the runtime layers.
//!
//! Every benchmark takes a [`Context`] and runs unchanged on the host
//! backend (one process) or the TCP backend (several processes started by
//! `hicr-launch`). The root instance returns the report; reports serialize to
//! JSON documents described by the schemas in `schemas/`.

pub mod context;
pub mod error;
pub mod examples;
pub mod fib;
pub mod jacobi;
pub mod launch;
pub mod mlp;
pub mod pingpong;
pub mod stats;

use std::io::Write;
use std::path::{Path, PathBuf};

use hicr_frontends::tasking::TraceEvent;

pub use context::{ComputeKind, Context};
pub use error::{BenchError, Result};

/// JSON schema of the document a benchmark prints, by benchmark name.
pub fn schema(name: &str) -> Option<&'static str> {
    Some(match name {
        "pingpong" => include_str!("../schemas/pingpong.schema.json"),
        "fib" => include_str!("../schemas/fib.schema.json"),
        "jacobi" => include_str!("../schemas/jacobi.schema.json"),
        "mlp" => include_str!("../schemas/mlp.schema.json"),
        "broadcast" => include_str!("../schemas/broadcast.schema.json"),
        "parallel-exec" => include_str!("../schemas/parallel-exec.schema.json"),
        "deploy" => include_str!("../schemas/deploy.schema.json"),
        "trace-event" => include_str!("../schemas/trace-event.schema.json"),
        _ => return None,
    })
}

/// `path` for the root, `path.<rank>` for every other instance.
pub fn rank_path(path: &Path, rank: usize) -> PathBuf {
    if rank == 0 {
        return path.to_path_buf();
    }
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".{rank}"));
    PathBuf::from(s)
}

/// One JSON object per line.
pub fn write_trace(path: &Path, events: &[TraceEvent]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
