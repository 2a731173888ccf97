//! Fibonacci by recursive task decomposition: every call F(k) is one task.
//!
//! With suspendable tasks a parent spawns its two children and suspends until
//! both have finished. Without suspension the parent returns after spawning
//! and the last finishing child completes it (continuation passing).

use std::collections::VecDeque;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use hicr_core::{Argument, ComputeManager, ExecutionUnit};
use hicr_frontends::tasking::{task_unit, PullFn, Task, TaskEvent, TaskRuntime, TraceEvent};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::context::{worker_resources, ComputeKind, Context};
use crate::error::{BenchError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FibReport {
    pub benchmark: String,
    pub backend: String,
    pub instances: usize,
    pub n: u64,
    pub workers: usize,
    pub variant: ComputeKind,
    pub result: u64,
    pub task_count: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FibConfig {
    pub n: u64,
    pub workers: usize,
    pub variant: ComputeKind,
}

/// Outcome of one local run.
pub struct FibRun {
    pub result: u64,
    pub task_count: u64,
    pub seconds: f64,
    pub trace: Vec<TraceEvent>,
}

/// Closed form of the number of calls made by the naive recursion.
pub fn expected_task_count(n: u64) -> u64 {
    let (mut a, mut b) = (0u64, 1u64);
    for _ in 0..n {
        (a, b) = (b, a + b);
    }
    2 * b - 1
}

struct Node {
    n: u64,
    result: AtomicU64,
    pending: AtomicU32,
    parent: Option<Arc<Node>>,
    /// Kept while the task may still be resumed.
    task: Mutex<Option<Task>>,
}

struct Shared {
    queue: Mutex<VecDeque<Task>>,
    unit: Mutex<Option<ExecutionUnit>>,
    suspending: bool,
    next_id: AtomicU64,
    done: AtomicBool,
    failure: Mutex<Option<String>>,
}

impl Shared {
    fn spawn(self: &Arc<Self>, n: u64, parent: Option<Arc<Node>>) -> Arc<Node> {
        // children plus, when suspending, the parent's own suspension
        let pending = if self.suspending { 3 } else { 2 };
        let node = Arc::new(Node {
            n,
            result: AtomicU64::new(0),
            pending: AtomicU32::new(pending),
            parent,
            task: Mutex::new(None),
        });
        let unit = self.unit.lock().clone().expect("unit is set before spawning");
        let task = Task::new(self.next_id.fetch_add(1, Ordering::Relaxed), unit, Argument::new(node.clone()));
        if self.suspending {
            let s = self.clone();
            task.set_callback(TaskEvent::Suspend, move |t| s.release(node_of(t)));
            *node.task.lock() = Some(task.clone());
        }
        let s = self.clone();
        task.set_callback(TaskEvent::Finish, move |t| {
            let node = node_of(t);
            node.task.lock().take();
            if let Some(f) = t.failure() {
                s.failure.lock().get_or_insert(format!("task {} failed: {f}", t.id()));
                s.done.store(true, Ordering::Release);
                return;
            }
            // without suspension an inner node completes with its last child
            if s.suspending || node.n < 2 {
                s.complete(node);
            }
        });
        self.queue.lock().push_back(task);
        node
    }

    /// A finished node hands its value up the tree.
    fn complete(&self, node: &Node) {
        match &node.parent {
            None => self.done.store(true, Ordering::Release),
            Some(p) if self.suspending => self.release(p),
            Some(p) => {
                p.result.fetch_add(node.result.load(Ordering::Acquire), Ordering::AcqRel);
                if p.pending.fetch_sub(1, Ordering::AcqRel) == 1 {
                    self.complete(p);
                }
            }
        }
    }

    fn release(&self, node: &Node) {
        if node.pending.fetch_sub(1, Ordering::AcqRel) == 1 {
            let t = node.task.lock().clone().expect("suspended node keeps its task");
            self.queue.lock().push_back(t);
        }
    }
}

fn node_of(t: &Task) -> &Arc<Node> {
    t.argument().get::<Arc<Node>>().expect("fibonacci task argument")
}

/// Computes F(n) on `workers` workers of a task runtime on this instance.
pub fn run_local(cfg: &FibConfig) -> Result<FibRun> {
    if cfg.workers == 0 {
        return Err(BenchError::InvalidConfig("fib needs at least one worker".into()));
    }
    let task_cm = cfg.variant.manager();
    let suspending = task_cm.supports_suspension();
    let shared = Arc::new(Shared {
        queue: Mutex::new(VecDeque::new()),
        unit: Mutex::new(None),
        suspending,
        next_id: AtomicU64::new(0),
        done: AtomicBool::new(false),
        failure: Mutex::new(None),
    });
    let weak = Arc::downgrade(&shared);
    *shared.unit.lock() = Some(task_unit(&*task_cm, move |arg, s| {
        let node = arg.get::<Arc<Node>>().expect("fibonacci task argument");
        if node.n < 2 {
            node.result.store(node.n, Ordering::Release);
            return;
        }
        let sh = weak.upgrade().expect("runtime outlives its tasks");
        if sh.suspending {
            let a = sh.spawn(node.n - 1, Some(node.clone()));
            let b = sh.spawn(node.n - 2, Some(node.clone()));
            s.suspend().expect("coroutine tasks can suspend");
            let v = a.result.load(Ordering::Acquire) + b.result.load(Ordering::Acquire);
            node.result.store(v, Ordering::Release);
        } else {
            sh.spawn(node.n - 1, Some(node.clone()));
            sh.spawn(node.n - 2, Some(node.clone()));
        }
    }));
    let q = shared.clone();
    // newest first: depth-first order keeps few suspended tasks alive
    let pull: PullFn = Arc::new(move |_| q.queue.lock().pop_back());
    let worker_cm: Arc<dyn ComputeManager> = ComputeKind::Threads.manager();
    let rt = TaskRuntime::new(worker_cm, task_cm, worker_resources(cfg.workers), pull)?;
    let start = Instant::now();
    let root = shared.spawn(cfg.n, None);
    rt.start()?;
    while !shared.done.load(Ordering::Acquire) {
        if let Some(e) = rt.errors().into_iter().next() {
            rt.stop(true)?;
            return Err(BenchError::TaskFailed(e));
        }
        std::thread::sleep(Duration::from_micros(200));
    }
    let seconds = start.elapsed().as_secs_f64();
    if let Some(f) = shared.failure.lock().take() {
        rt.stop(true)?;
        return Err(BenchError::TaskFailed(f));
    }
    rt.stop(false)?;
    shared.unit.lock().take();
    Ok(FibRun {
        result: root.result.load(Ordering::Acquire),
        task_count: rt.finished_count(),
        seconds,
        trace: rt.trace(),
    })
}

/// Every instance computes F(n) locally; the root checks that all instances
/// agree and reports. Traces go to `trace_out` on the root and
/// `trace_out.<rank>` elsewhere.
pub fn run(ctx: &Context, cfg: &FibConfig, trace_out: Option<&Path>) -> Result<Option<FibReport>> {
    let local = run_local(cfg)?;
    if let Some(path) = trace_out {
        crate::write_trace(&crate::rank_path(path, ctx.rank), &local.trace)?;
    }
    let mut mine = local.result.to_le_bytes().to_vec();
    mine.extend_from_slice(&local.task_count.to_le_bytes());
    let Some(all) = ctx.gather(&mine)? else {
        return Ok(None);
    };
    if let Some((r, _)) = all.iter().enumerate().find(|(_, b)| **b != mine) {
        return Err(BenchError::InconsistentResults(format!("instance {r} computed a different Fibonacci result")));
    }
    Ok(Some(FibReport {
        benchmark: "fib".into(),
        backend: ctx.backend_name().into(),
        instances: ctx.size,
        n: cfg.n,
        workers: cfg.workers,
        variant: cfg.variant,
        result: local.result,
        task_count: local.task_count,
        seconds: local.seconds,
    }))
}
