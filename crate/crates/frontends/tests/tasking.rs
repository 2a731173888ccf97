use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use hicr_core::{Argument, ComputeManager, ComputeResource, ExecutionLifecycle, ExecutionUnit};
use hicr_frontends::tasking::{
    task_unit, trace_is_monotonic, PullFn, Task, TaskEvent, TaskRuntime, TraceEvent, TraceKind,
};
use hicr_frontends::Error;
use hicr_host::{CoroutineComputeManager, ThreadComputeManager};
use parking_lot::Mutex;
use proptest::prelude::*;

type Queue = Arc<Mutex<VecDeque<Task>>>;

fn resources(n: usize) -> Vec<ComputeResource> {
    (0..n).map(|i| ComputeResource::new(i as u32, "core", None)).collect()
}

fn threads() -> Arc<dyn ComputeManager> {
    Arc::new(ThreadComputeManager::new().without_pinning())
}

fn coroutines() -> Arc<dyn ComputeManager> {
    Arc::new(CoroutineComputeManager::new().without_pinning())
}

fn queue_pull(q: &Queue) -> PullFn {
    let q = q.clone();
    Arc::new(move |_| q.lock().pop_front())
}

fn wait_until(mut done: impl FnMut() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(60);
    while !done() {
        assert!(Instant::now() < deadline, "timed out");
        thread::sleep(Duration::from_millis(1));
    }
}

/// Per-task event sequences must read Start (Suspend Resume)* Finish.
fn task_grammar_holds(trace: &[TraceEvent]) -> bool {
    let mut per: HashMap<u64, Vec<TraceKind>> = HashMap::new();
    for e in trace {
        if let Some(t) = e.task {
            per.entry(t).or_default().push(e.event);
        }
    }
    per.values().all(|seq| {
        let n = seq.len();
        n >= 2
            && seq[0] == TraceKind::TaskStart
            && seq[n - 1] == TraceKind::TaskFinish
            && seq[1..n - 1].chunks(2).all(|c| c == [TraceKind::TaskSuspend, TraceKind::TaskResume])
    })
}

/// Task intervals on a worker never overlap and lie inside busy periods.
fn workers_conserved(trace: &[TraceEvent], workers: usize) -> bool {
    let mut busy = vec![false; workers];
    let mut running: Vec<Option<u64>> = vec![None; workers];
    for e in trace {
        let w = e.worker as usize;
        match e.event {
            TraceKind::WorkerBusy => busy[w] = true,
            TraceKind::WorkerIdle => {
                if running[w].is_some() {
                    return false;
                }
                busy[w] = false;
            }
            TraceKind::TaskStart | TraceKind::TaskResume => {
                if !busy[w] || running[w].is_some() {
                    return false;
                }
                running[w] = e.task;
            }
            TraceKind::TaskSuspend | TraceKind::TaskFinish => {
                if running[w] != e.task {
                    return false;
                }
                running[w] = None;
            }
        }
        if busy.iter().filter(|b| **b).count() > workers {
            return false;
        }
    }
    true
}

#[test]
fn zero_workers_rejected() {
    let q: Queue = Arc::default();
    let r = TaskRuntime::new(threads(), threads(), Vec::new(), queue_pull(&q));
    assert!(matches!(r, Err(Error::InvalidConfig(_))));
}

#[test]
fn unsupported_resource_rejected() {
    let q: Queue = Arc::default();
    let picky: Arc<dyn ComputeManager> =
        Arc::new(ThreadComputeManager::new().without_pinning().with_accepted_resource_kinds(&["gpu"]));
    let r = TaskRuntime::new(picky, threads(), resources(1), queue_pull(&q));
    assert!(matches!(r, Err(Error::Core(hicr_core::HicrError::UnsupportedResource(0)))));
}

#[test]
fn start_stop_lifecycle_and_empty_trace() {
    let q: Queue = Arc::default();
    let rt = TaskRuntime::new(threads(), threads(), resources(3), queue_pull(&q)).unwrap();
    assert_eq!(rt.stop(false), Err(Error::NotStarted));
    rt.start().unwrap();
    assert_eq!(rt.start(), Err(Error::AlreadyStarted));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    assert_eq!(rt.emit_trace(&path), Err(Error::StillRunning));
    thread::sleep(Duration::from_millis(20));
    rt.stop(false).unwrap();
    rt.emit_trace(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let events: Vec<TraceEvent> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.len(), 6);
    assert!(events.iter().all(|e| e.event == TraceKind::WorkerIdle && e.task.is_none()));
    for w in 0..3 {
        assert_eq!(events.iter().filter(|e| e.worker == w).count(), 2);
    }
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let keys: Vec<&String> = first.as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 4);
    assert!(first["task"].is_null() && first["event"] == "workerIdle");
    // restart after stop
    rt.start().unwrap();
    rt.stop(false).unwrap();
    assert_eq!(rt.trace().len(), 12);
}

#[test]
fn independent_tasks_run_exactly_once() {
    let q: Queue = Arc::default();
    let tcm = threads();
    let counts: Arc<Vec<AtomicU32>> = Arc::new((0..100).map(|_| AtomicU32::new(0)).collect());
    let c = counts.clone();
    let unit = task_unit(&*tcm, move |arg, _| {
        c[*arg.get::<usize>().unwrap()].fetch_add(1, Ordering::SeqCst);
    });
    for i in 0..100usize {
        q.lock().push_back(Task::new(i as u64, unit.clone(), Argument::new(i)));
    }
    let rt = TaskRuntime::new(threads(), tcm, resources(4), queue_pull(&q)).unwrap();
    rt.start().unwrap();
    wait_until(|| rt.finished_count() == 100);
    rt.stop(false).unwrap();
    assert!(counts.iter().all(|c| c.load(Ordering::SeqCst) == 1));
    let trace = rt.trace();
    assert_eq!(trace.iter().filter(|e| e.event == TraceKind::TaskFinish).count(), 100);
    assert!(trace_is_monotonic(&trace));
    assert!(task_grammar_holds(&trace));
    assert!(workers_conserved(&trace, 4));
    assert!(rt.errors().is_empty());
}

#[test]
fn suspended_task_callbacks_fire_once_each() {
    let q: Queue = Arc::default();
    let tcm = coroutines();
    let unit = task_unit(&*tcm, |_, s| {
        s.suspend().unwrap();
    });
    let task = Task::new(1, unit, Argument::none());
    let log = Arc::new(Mutex::new(Vec::new()));
    for ev in [TaskEvent::Start, TaskEvent::Suspend, TaskEvent::Resume, TaskEvent::Finish] {
        let l = log.clone();
        task.set_callback(ev, move |_| l.lock().push(ev));
    }
    q.lock().push_back(task.clone());
    let rt = TaskRuntime::new(threads(), tcm, resources(2), queue_pull(&q)).unwrap();
    rt.start().unwrap();
    wait_until(|| task.lifecycle() == ExecutionLifecycle::Suspended);
    wait_until(|| log.lock().len() == 2);
    assert_eq!(rt.resumable().iter().map(|t| t.id()).collect::<Vec<_>>(), [1]);
    assert_eq!(rt.stop(false), Err(Error::TasksPending(1)));
    q.lock().push_back(rt.resumable().remove(0));
    wait_until(|| task.lifecycle() == ExecutionLifecycle::Finished);
    rt.stop(false).unwrap();
    assert_eq!(*log.lock(), [TaskEvent::Start, TaskEvent::Suspend, TaskEvent::Resume, TaskEvent::Finish]);
    assert!(rt.resumable().is_empty());
    assert!(task_grammar_holds(&rt.trace()));
}

#[test]
fn forced_stop_leaves_suspended_tasks() {
    let q: Queue = Arc::default();
    let tcm = coroutines();
    let unit = task_unit(&*tcm, |_, s| {
        s.suspend().unwrap();
    });
    let task = Task::new(9, unit, Argument::none());
    q.lock().push_back(task.clone());
    let rt = TaskRuntime::new(threads(), tcm, resources(1), queue_pull(&q)).unwrap();
    rt.start().unwrap();
    wait_until(|| !rt.resumable().is_empty());
    rt.stop(true).unwrap();
    assert_eq!(task.lifecycle(), ExecutionLifecycle::Suspended);
}

#[test]
fn wrong_task_kind_reported() {
    let q: Queue = Arc::default();
    q.lock().push_back(Task::new(1, ExecutionUnit::new("gpu-kernel", Arc::new(|_, _| {})), Argument::none()));
    let rt = TaskRuntime::new(threads(), threads(), resources(1), queue_pull(&q)).unwrap();
    rt.start().unwrap();
    wait_until(|| !rt.errors().is_empty());
    rt.stop(false).unwrap();
    assert!(rt.errors()[0].contains("gpu-kernel"));
}

/// Naive recursion counting calls.
fn fib_oracle(n: u64, calls: &mut u64) -> u64 {
    *calls += 1;
    if n < 2 {
        n
    } else {
        fib_oracle(n - 1, calls) + fib_oracle(n - 2, calls)
    }
}

struct FibNode {
    n: u64,
    result: AtomicU64,
    /// Two children plus the node's own suspension.
    pending: AtomicU32,
    parent: Option<Arc<FibNode>>,
    task: Mutex<Option<Task>>,
}

struct Fib {
    queue: Queue,
    unit: Mutex<Option<ExecutionUnit>>,
    next_id: AtomicU64,
    done: AtomicBool,
}

impl Fib {
    fn spawn(self: &Arc<Self>, n: u64, parent: Option<Arc<FibNode>>) -> Arc<FibNode> {
        let node = Arc::new(FibNode {
            n,
            result: AtomicU64::new(0),
            pending: AtomicU32::new(3),
            parent,
            task: Mutex::new(None),
        });
        let unit = self.unit.lock().clone().unwrap();
        let task = Task::new(self.next_id.fetch_add(1, Ordering::Relaxed), unit, Argument::new(node.clone()));
        let f = self.clone();
        task.set_callback(TaskEvent::Suspend, move |t| f.release(t.argument().get::<Arc<FibNode>>().unwrap()));
        let f = self.clone();
        task.set_callback(TaskEvent::Finish, move |t| {
            let node = t.argument().get::<Arc<FibNode>>().unwrap();
            node.task.lock().take();
            match &node.parent {
                Some(p) => f.release(p),
                None => f.done.store(true, Ordering::Release),
            }
        });
        *node.task.lock() = Some(task.clone());
        self.queue.lock().push_back(task);
        node
    }

    fn release(&self, node: &FibNode) {
        if node.pending.fetch_sub(1, Ordering::AcqRel) == 1 {
            let t = node.task.lock().clone().expect("suspended node has its task");
            self.queue.lock().push_back(t);
        }
    }
}

fn run_fib(n: u64, workers: usize, worker_cm: Arc<dyn ComputeManager>) -> (u64, Vec<TraceEvent>) {
    let tcm = coroutines();
    let fib = Arc::new(Fib {
        queue: Arc::default(),
        unit: Mutex::new(None),
        next_id: AtomicU64::new(0),
        done: AtomicBool::new(false),
    });
    let weak = Arc::downgrade(&fib);
    *fib.unit.lock() = Some(task_unit(&*tcm, move |arg, s| {
        let node = arg.get::<Arc<FibNode>>().unwrap();
        if node.n < 2 {
            node.result.store(node.n, Ordering::Release);
            return;
        }
        let f = weak.upgrade().unwrap();
        let a = f.spawn(node.n - 1, Some(node.clone()));
        let b = f.spawn(node.n - 2, Some(node.clone()));
        s.suspend().unwrap();
        let sum = a.result.load(Ordering::Acquire) + b.result.load(Ordering::Acquire);
        node.result.store(sum, Ordering::Release);
    }));
    let rt = TaskRuntime::new(worker_cm, tcm, resources(workers), queue_pull(&fib.queue)).unwrap();
    let root = fib.spawn(n, None);
    rt.start().unwrap();
    wait_until(|| fib.done.load(Ordering::Acquire));
    rt.stop(false).unwrap();
    fib.unit.lock().take();
    (root.result.load(Ordering::Acquire), rt.trace())
}

#[test]
fn task_count_formula_matches_recursive_oracle() {
    let mut f = vec![0u64, 1];
    for i in 2..=26 {
        f.push(f[i - 1] + f[i - 2]);
    }
    for n in 0..=20u64 {
        let mut calls = 0;
        assert_eq!(fib_oracle(n, &mut calls), f[n as usize]);
        assert_eq!(calls, 2 * f[n as usize + 1] - 1);
    }
}

#[test]
fn fibonacci_16_with_suspending_tasks() {
    let (result, trace) = run_fib(16, 4, threads());
    assert_eq!(result, 987);
    assert_eq!(trace.iter().filter(|e| e.event == TraceKind::TaskFinish).count(), 3193);
    assert_eq!(trace.iter().filter(|e| e.event == TraceKind::TaskSuspend).count(), 3193 - 1597);
    assert!(trace_is_monotonic(&trace));
    assert!(task_grammar_holds(&trace));
    assert!(workers_conserved(&trace, 4));
}

#[test]
fn fibonacci_with_identical_managers() {
    let (result, trace) = run_fib(12, 2, coroutines());
    assert_eq!(result, 144);
    assert_eq!(trace.iter().filter(|e| e.event == TraceKind::TaskFinish).count(), 465);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_workloads_run_exactly_once(tasks in 0usize..120, workers in 1usize..5, suspending in any::<bool>()) {
        let q: Queue = Arc::default();
        let tcm = if suspending { coroutines() } else { threads() };
        let counts: Arc<Vec<AtomicU32>> = Arc::new((0..tasks).map(|_| AtomicU32::new(0)).collect());
        let c = counts.clone();
        let unit = task_unit(&*tcm, move |arg, s| {
            let i = *arg.get::<usize>().unwrap();
            if s.can_suspend() && i % 3 == 0 {
                s.suspend().unwrap();
            }
            c[i].fetch_add(1, Ordering::SeqCst);
        });
        for i in 0..tasks {
            let t = Task::new(i as u64, unit.clone(), Argument::new(i));
            let qq = q.clone();
            t.set_callback(TaskEvent::Suspend, move |t| qq.lock().push_back(t.clone()));
            q.lock().push_back(t);
        }
        let rt = TaskRuntime::new(threads(), tcm, resources(workers), queue_pull(&q)).unwrap();
        rt.start().unwrap();
        wait_until(|| rt.finished_count() == tasks as u64);
        rt.stop(false).unwrap();
        prop_assert!(counts.iter().all(|c| c.load(Ordering::SeqCst) == 1));
        let trace = rt.trace();
        prop_assert!(trace_is_monotonic(&trace));
        prop_assert!(task_grammar_holds(&trace));
        prop_assert!(workers_conserved(&trace, workers));
    }
}
