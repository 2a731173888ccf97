//! Building blocks for task-based runtimes.
//!
//! Workers are execution states of a worker compute manager. Each one loops
//! over a user pull function and runs the tasks it returns on its own
//! processing unit of the task compute manager, until the task finishes or
//! suspends. Suspended tasks are kept in a runtime-held set; the pull
//! function decides when to hand them out again. Scheduling policy and
//! dependencies are entirely the pull function's business.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use hicr_core::{
    Argument, ComputeManager, ComputeResource, ExecutionLifecycle, ExecutionState, ExecutionUnit, ProcessingUnit,
    Suspender,
};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_IDLE_SPINS: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskEvent {
    Start,
    Suspend,
    Resume,
    Finish,
}

pub type TaskCallback = Arc<dyn Fn(&Task) + Send + Sync>;

/// Returns the next task for the given worker, or `None`. Called
/// concurrently from all workers.
pub type PullFn = Arc<dyn Fn(usize) -> Option<Task> + Send + Sync>;

struct TaskInner {
    id: u64,
    unit: ExecutionUnit,
    argument: Argument,
    state: Mutex<Option<ExecutionState>>,
    callbacks: Mutex<HashMap<TaskEvent, TaskCallback>>,
}

/// A stateful unit of work with per-transition callbacks. Cheap to clone.
#[derive(Clone)]
pub struct Task(Arc<TaskInner>);

impl std::fmt::Debug for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Task").field("id", &self.0.id).field("lifecycle", &self.lifecycle()).finish()
    }
}

impl Task {
    pub fn new(id: u64, unit: ExecutionUnit, argument: Argument) -> Self {
        Task(Arc::new(TaskInner { id, unit, argument, state: Mutex::new(None), callbacks: Mutex::new(HashMap::new()) }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn argument(&self) -> &Argument {
        &self.0.argument
    }

    /// Replaces the callback for `event`. Callbacks run on the worker that
    /// observed the transition.
    pub fn set_callback<F>(&self, event: TaskEvent, f: F)
    where
        F: Fn(&Task) + Send + Sync + 'static,
    {
        self.0.callbacks.lock().insert(event, Arc::new(f));
    }

    pub fn lifecycle(&self) -> ExecutionLifecycle {
        self.0.state.lock().as_ref().map(|s| s.lifecycle()).unwrap_or(ExecutionLifecycle::Initialized)
    }

    pub fn failure(&self) -> Option<String> {
        self.0.state.lock().as_ref().and_then(|s| s.failure())
    }

    fn fire(&self, event: TaskEvent) {
        let cb = self.0.callbacks.lock().get(&event).cloned();
        if let Some(cb) = cb {
            cb(self);
        }
    }
}

/// Execution unit of `cm`'s kind running `body`.
pub fn task_unit<F>(cm: &dyn ComputeManager, body: F) -> ExecutionUnit
where
    F: Fn(&Argument, &dyn Suspender) + Send + Sync + 'static,
{
    ExecutionUnit::new(cm.unit_kind(), Arc::new(body))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TraceKind {
    TaskStart,
    TaskSuspend,
    TaskResume,
    TaskFinish,
    WorkerIdle,
    WorkerBusy,
}

/// One trace line: `{"ts":…,"worker":…,"task":…|null,"event":…}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Nanoseconds since the runtime was created.
    pub ts: u64,
    pub worker: u32,
    pub task: Option<u64>,
    pub event: TraceKind,
}

struct Shared {
    task_cm: Arc<dyn ComputeManager>,
    pull: PullFn,
    stop: AtomicBool,
    idle_spins: AtomicU32,
    suspended: Mutex<HashMap<u64, Task>>,
    traces: Vec<Mutex<Vec<TraceEvent>>>,
    epoch: Instant,
    finished: AtomicU64,
    errors: Mutex<Vec<String>>,
}

impl Shared {
    fn trace(&self, worker: usize, task: Option<u64>, event: TraceKind) {
        let ts = self.epoch.elapsed().as_nanos() as u64;
        self.traces[worker].lock().push(TraceEvent { ts, worker: worker as u32, task, event });
    }

    fn run_task(&self, worker: usize, pu: &ProcessingUnit, task: &Task) -> Result<()> {
        let state = {
            let mut s = task.0.state.lock();
            match &*s {
                Some(st) => st.clone(),
                None => {
                    let st = self.task_cm.create_execution_state(&task.0.unit, task.0.argument.clone())?;
                    *s = Some(st.clone());
                    st
                }
            }
        };
        match state.lifecycle() {
            ExecutionLifecycle::Initialized => {
                self.trace(worker, Some(task.id()), TraceKind::TaskStart);
                task.fire(TaskEvent::Start);
            }
            ExecutionLifecycle::Suspended => {
                if self.suspended.lock().remove(&task.id()).is_none() {
                    log::warn!("task {} pulled before its suspension was recorded", task.id());
                }
                self.trace(worker, Some(task.id()), TraceKind::TaskResume);
                task.fire(TaskEvent::Resume);
            }
            other => {
                return Err(Error::Core(hicr_core::HicrError::WrongLifecycle(format!(
                    "task {} pulled while {other:?}",
                    task.id()
                ))))
            }
        }
        self.task_cm.execute(pu, &state)?;
        self.task_cm.await_completion(pu)?;
        match state.lifecycle() {
            ExecutionLifecycle::Suspended => {
                self.suspended.lock().insert(task.id(), task.clone());
                self.trace(worker, Some(task.id()), TraceKind::TaskSuspend);
                task.fire(TaskEvent::Suspend);
            }
            ExecutionLifecycle::Finished => {
                if let Some(f) = state.failure() {
                    log::warn!("task {} failed: {f}", task.id());
                }
                self.finished.fetch_add(1, Ordering::Relaxed);
                self.trace(worker, Some(task.id()), TraceKind::TaskFinish);
                task.fire(TaskEvent::Finish);
            }
            other => unreachable!("awaited task left {other:?}"),
        }
        Ok(())
    }

    fn worker_loop(&self, worker: usize, pu: &ProcessingUnit) {
        self.trace(worker, None, TraceKind::WorkerIdle);
        let mut idle = true;
        let mut misses: u32 = 0;
        while !self.stop.load(Ordering::Acquire) {
            match (self.pull)(worker) {
                Some(task) => {
                    misses = 0;
                    if idle {
                        self.trace(worker, None, TraceKind::WorkerBusy);
                        idle = false;
                    }
                    if let Err(e) = self.run_task(worker, pu, &task) {
                        log::error!("worker {worker}: {e}");
                        self.errors.lock().push(e.to_string());
                    }
                }
                None => {
                    if !idle {
                        self.trace(worker, None, TraceKind::WorkerIdle);
                        idle = true;
                    }
                    if misses < self.idle_spins.load(Ordering::Relaxed) {
                        misses += 1;
                        std::hint::spin_loop();
                    } else {
                        std::thread::yield_now();
                    }
                }
            }
        }
        self.trace(worker, None, TraceKind::WorkerIdle);
    }
}

struct WorkerArg {
    shared: Arc<Shared>,
    index: usize,
    task_pu: ProcessingUnit,
}

struct Slot {
    worker_pu: ProcessingUnit,
    task_pu: ProcessingUnit,
}

pub struct TaskRuntime {
    shared: Arc<Shared>,
    worker_cm: Arc<dyn ComputeManager>,
    resources: Vec<ComputeResource>,
    slots: Mutex<Vec<Slot>>,
    running: AtomicBool,
}

impl TaskRuntime {
    /// One worker per resource. Workers run on `worker_cm`, tasks on `task_cm`.
    pub fn new(
        worker_cm: Arc<dyn ComputeManager>,
        task_cm: Arc<dyn ComputeManager>,
        resources: Vec<ComputeResource>,
        pull: PullFn,
    ) -> Result<Self> {
        if resources.is_empty() {
            return Err(Error::InvalidConfig("a task runtime needs at least one worker resource".into()));
        }
        let shared = Arc::new(Shared {
            task_cm,
            pull,
            stop: AtomicBool::new(false),
            idle_spins: AtomicU32::new(DEFAULT_IDLE_SPINS),
            suspended: Mutex::new(HashMap::new()),
            traces: resources.iter().map(|_| Mutex::new(Vec::new())).collect(),
            epoch: Instant::now(),
            finished: AtomicU64::new(0),
            errors: Mutex::new(Vec::new()),
        });
        let rt = Self { shared, worker_cm, resources, slots: Mutex::new(Vec::new()), running: AtomicBool::new(false) };
        *rt.slots.lock() = rt.create_slots()?;
        Ok(rt)
    }

    fn create_slots(&self) -> Result<Vec<Slot>> {
        self.resources
            .iter()
            .map(|r| {
                Ok(Slot {
                    worker_pu: self.worker_cm.create_processing_unit(r)?,
                    task_pu: self.shared.task_cm.create_processing_unit(r)?,
                })
            })
            .collect()
    }

    pub fn worker_count(&self) -> usize {
        self.resources.len()
    }

    /// Consecutive empty pulls before a worker starts yielding the CPU.
    pub fn set_idle_spins(&self, n: u32) {
        self.shared.idle_spins.store(n, Ordering::Relaxed);
    }

    pub fn start(&self) -> Result<()> {
        if self.running.swap(true, Ordering::AcqRel) {
            return Err(Error::AlreadyStarted);
        }
        self.shared.stop.store(false, Ordering::Release);
        let kind = self.worker_cm.unit_kind().to_string();
        let unit = ExecutionUnit::new(
            &kind,
            Arc::new(|arg: &Argument, _: &dyn Suspender| {
                let a = arg.get::<WorkerArg>().expect("worker argument");
                a.shared.worker_loop(a.index, &a.task_pu);
            }),
        );
        let slots = self.slots.lock();
        for (index, s) in slots.iter().enumerate() {
            let started = (|| -> Result<()> {
                self.worker_cm.initialize(&s.worker_pu)?;
                self.shared.task_cm.initialize(&s.task_pu)?;
                let arg = WorkerArg { shared: self.shared.clone(), index, task_pu: s.task_pu.clone() };
                let state = self.worker_cm.create_execution_state(&unit, Argument::new(arg))?;
                self.worker_cm.execute(&s.worker_pu, &state)?;
                Ok(())
            })();
            if let Err(e) = started {
                drop(slots);
                let _ = self.stop(true);
                return Err(e);
            }
        }
        Ok(())
    }

    /// Asks every worker to leave its loop at the next pull boundary and
    /// waits for them. Refused while tasks are suspended unless `force`.
    pub fn stop(&self, force: bool) -> Result<()> {
        if !self.running.load(Ordering::Acquire) {
            return Err(Error::NotStarted);
        }
        let pending = self.shared.suspended.lock().len();
        if pending > 0 && !force {
            return Err(Error::TasksPending(pending));
        }
        self.shared.stop.store(true, Ordering::Release);
        let mut slots = self.slots.lock();
        for s in slots.iter() {
            self.worker_cm.await_completion(&s.worker_pu)?;
        }
        for s in slots.iter() {
            let _ = self.worker_cm.finalize(&s.worker_pu);
            let _ = self.shared.task_cm.finalize(&s.task_pu);
        }
        *slots = self.create_slots()?;
        self.running.store(false, Ordering::Release);
        Ok(())
    }

    pub fn is_running(&self) -> bool {
        self.running.load(Ordering::Acquire)
    }

    /// Suspended tasks, by id.
    pub fn resumable(&self) -> Vec<Task> {
        let mut v: Vec<Task> = self.shared.suspended.lock().values().cloned().collect();
        v.sort_by_key(|t| t.id());
        v
    }

    /// Tasks that reached `Finished` under this runtime.
    pub fn finished_count(&self) -> u64 {
        self.shared.finished.load(Ordering::Relaxed)
    }

    /// Failures the workers hit while running pulled tasks.
    pub fn errors(&self) -> Vec<String> {
        self.shared.errors.lock().clone()
    }

    /// All events so far, ordered by timestamp then worker.
    pub fn trace(&self) -> Vec<TraceEvent> {
        let mut all: Vec<TraceEvent> = self.shared.traces.iter().flat_map(|t| t.lock().clone()).collect();
        all.sort_by_key(|e| (e.ts, e.worker));
        all
    }

    /// Writes the trace as JSON lines.
    pub fn emit_trace(&self, path: &Path) -> Result<()> {
        if self.is_running() {
            return Err(Error::StillRunning);
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in self.trace() {
            serde_json::to_writer(&mut out, &e).map_err(|e| Error::Io(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

impl Drop for TaskRuntime {
    fn drop(&mut self) {
        if self.is_running() {
            let _ = self.stop(true);
        }
    }
}

/// Checks the per-worker timestamp order of a trace.
pub fn trace_is_monotonic(events: &[TraceEvent]) -> bool {
    let mut last: HashMap<u32, u64> = HashMap::new();
    events.iter().all(|e| {
        let prev = last.insert(e.worker, e.ts).unwrap_or(0);
        prev <= e.ts
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_line_format() {
        let e = TraceEvent { ts: 5, worker: 1, task: None, event: TraceKind::WorkerIdle };
        assert_eq!(serde_json::to_string(&e).unwrap(), r#"{"ts":5,"worker":1,"task":null,"event":"workerIdle"}"#);
        let e = TraceEvent { ts: 6, worker: 0, task: Some(3), event: TraceKind::TaskFinish };
        assert_eq!(serde_json::to_string(&e).unwrap(), r#"{"ts":6,"worker":0,"task":3,"event":"taskFinish"}"#);
    }

    #[test]
    fn monotonic_check() {
        let ev = |ts, worker| TraceEvent { ts, worker, task: None, event: TraceKind::WorkerIdle };
        assert!(trace_is_monotonic(&[ev(1, 0), ev(0, 1), ev(2, 0)]));
        assert!(!trace_is_monotonic(&[ev(3, 0), ev(2, 0)]));
    }
}
