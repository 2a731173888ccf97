//! Small programs showing the manager API end to end: a local broadcast over
//! memory spaces, one execution per compute resource, and growing a
//! deployment to a desired instance count.

use std::sync::Arc;

use hicr_core::{Argument, ExecutionUnit, InstanceTemplate, SlotRef};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::context::{ComputeKind, Context};
use crate::error::{BenchError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BroadcastReport {
    pub example: String,
    pub instance: usize,
    pub memory_spaces: usize,
    pub message_bytes: usize,
    pub verified: bool,
}

/// Copies `message` into a fresh slot of every memory space, fences once and
/// checks every copy.
pub fn broadcast(ctx: &Context, message: &[u8]) -> Result<BroadcastReport> {
    let src = ctx.mem.allocate(&ctx.space, message.len() as u64)?;
    src.write(0, message)?;
    let mut dsts = Vec::new();
    for space in ctx.topology.memory_spaces() {
        let dst = ctx.mem.allocate(space, message.len() as u64)?;
        ctx.comm.memcpy(SlotRef::Local(&dst), 0, SlotRef::Local(&src), 0, message.len() as u64)?;
        dsts.push(dst);
    }
    ctx.comm.fence_local()?;
    let mut verified = true;
    for d in &dsts {
        verified &= d.to_vec()? == message;
        ctx.mem.free(d)?;
    }
    ctx.mem.free(&src)?;
    Ok(BroadcastReport {
        example: "broadcast".into(),
        instance: ctx.rank,
        memory_spaces: dsts.len(),
        message_bytes: message.len(),
        verified,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ParallelExecReport {
    pub example: String,
    pub instance: usize,
    pub compute: ComputeKind,
    pub compute_resources: usize,
    /// Resource ids that ran the unit, sorted.
    pub executed_on: Vec<u32>,
}

/// Runs one execution unit on every compute resource: create, initialize,
/// execute all, await all, finalize all.
pub fn parallel_exec(ctx: &Context, compute: ComputeKind) -> Result<ParallelExecReport> {
    let cm = compute.manager();
    let seen: Arc<Mutex<Vec<u32>>> = Arc::default();
    let unit = ExecutionUnit::new(
        cm.unit_kind(),
        Arc::new(|arg: &Argument, _: &dyn hicr_core::Suspender| {
            let (log, id) = arg.get::<(Arc<Mutex<Vec<u32>>>, u32)>().expect("resource argument");
            log.lock().push(*id);
        }),
    );
    let mut running = Vec::new();
    for r in ctx.topology.compute_resources() {
        let pu = cm.create_processing_unit(r)?;
        cm.initialize(&pu)?;
        let st = cm.create_execution_state(&unit, Argument::new((seen.clone(), r.resource_id)))?;
        running.push((pu, st));
    }
    for (pu, st) in &running {
        cm.execute(pu, st)?;
    }
    for (pu, st) in &running {
        cm.await_completion(pu)?;
        cm.finalize(pu)?;
        if !st.is_finished() {
            return Err(BenchError::InvalidConfig("execution state did not finish".into()));
        }
    }
    let mut executed_on = seen.lock().clone();
    executed_on.sort_unstable();
    Ok(ParallelExecReport {
        example: "parallelExec".into(),
        instance: ctx.rank,
        compute,
        compute_resources: running.len(),
        executed_on,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeployReport {
    pub example: String,
    pub desired: usize,
    pub before: usize,
    pub created: usize,
    pub after: usize,
}

/// The root tops the deployment up to `desired` instances. Other instances,
/// including the ones created here, return `None`.
pub fn deploy(ctx: &Context, desired: usize) -> Result<Option<DeployReport>> {
    if !ctx.instances.current_instance().is_root() {
        return Ok(None);
    }
    let before = ctx.instances.get_instances()?.len();
    let required = desired.saturating_sub(before);
    let created =
        if required > 0 { ctx.instances.create_instances(required, &InstanceTemplate::default())?.len() } else { 0 };
    let after = ctx.instances.get_instances()?.len();
    Ok(Some(DeployReport { example: "deploy".into(), desired, before, created, after }))
}
