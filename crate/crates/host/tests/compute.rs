use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Barrier, Mutex};

use hicr_core::{
    Argument, ComputeManager, ComputeResource, ExecutionLifecycle as L, HicrError, ProcessingLifecycle, TopologyManager,
};
use hicr_host::{
    allowed_cpus, coroutine_unit, thread_unit, yield_now, CoroutineComputeManager, HostTopologyManager, PinOutcome,
    ThreadComputeManager,
};

fn resource(id: u32, hint: Option<u32>) -> ComputeResource {
    ComputeResource::new(id, "cpu-core", hint)
}

/// Logical cores this process may run on, read straight from procfs.
fn procfs_allowed_cores() -> usize {
    let status = std::fs::read_to_string("/proc/self/status").unwrap();
    let line = status.lines().find(|l| l.starts_with("Cpus_allowed_list:")).unwrap();
    let list = line.split(':').nth(1).unwrap().trim();
    list.split(',')
        .map(|part| match part.split_once('-') {
            Some((a, b)) => b.parse::<usize>().unwrap() - a.parse::<usize>().unwrap() + 1,
            None => 1,
        })
        .sum()
}

#[test]
fn os_query_counts_allowed_cores() {
    let tm = HostTopologyManager::os_query();
    let t = tm.query_topology().unwrap();
    assert_eq!(t.compute_resources().count(), procfs_allowed_cores());
    assert_eq!(allowed_cpus().unwrap().len(), procfs_allowed_cores());
    assert_eq!(t.memory_spaces().count(), 1);
    assert_eq!(tm.query_topology().unwrap(), t);
}

#[test]
fn thread_states_run_concurrently() {
    let n = procfs_allowed_cores().min(8);
    let cm = ThreadComputeManager::new();
    let barrier = Arc::new(Barrier::new(n));
    let unit = thread_unit(|arg| {
        arg.get::<Arc<Barrier>>().unwrap().wait();
    });
    let pus: Vec<_> = (0..n).map(|i| cm.create_processing_unit(&resource(i as u32, Some(i as u32))).unwrap()).collect();
    let states: Vec<_> = pus
        .iter()
        .map(|pu| {
            cm.initialize(pu).unwrap();
            let s = cm.create_execution_state(&unit, Argument::new(barrier.clone())).unwrap();
            cm.execute(pu, &s).unwrap();
            s
        })
        .collect();
    for pu in &pus {
        cm.await_completion(pu).unwrap();
        cm.finalize(pu).unwrap();
        assert_eq!(pu.lifecycle(), ProcessingLifecycle::Terminated);
    }
    assert!(states.iter().all(|s| s.is_finished()));
}

#[test]
fn eight_hinted_units_issue_eight_pin_requests() {
    let cm = ThreadComputeManager::new();
    let pus: Vec<_> = (0..8).map(|i| cm.create_processing_unit(&resource(i, Some(i))).unwrap()).collect();
    for pu in &pus {
        cm.initialize(pu).unwrap();
    }
    let log = cm.affinity_log();
    let mut cores: Vec<_> = log.iter().map(|r| r.requested_core.unwrap()).collect();
    cores.sort();
    assert_eq!(cores, (0..8).collect::<Vec<_>>());
    let allowed = allowed_cpus().unwrap();
    for r in &log {
        let core = r.requested_core.unwrap();
        if allowed.contains(&core) {
            assert_eq!(r.outcome, PinOutcome::Pinned(core));
        }
    }
    for pu in &pus {
        cm.finalize(pu).unwrap();
    }
}

#[test]
fn no_hint_means_unpinned() {
    let cm = ThreadComputeManager::new();
    let pu = cm.create_processing_unit(&resource(0, None)).unwrap();
    cm.initialize(&pu).unwrap();
    assert_eq!(cm.affinity_log()[0].outcome, PinOutcome::Unpinned);
    cm.finalize(&pu).unwrap();
}

#[test]
fn thread_state_cannot_suspend() {
    let cm = ThreadComputeManager::new().without_pinning();
    let seen = Arc::new(Mutex::new(None));
    let s2 = seen.clone();
    let unit = hicr_core::ExecutionUnit::new(
        hicr_host::THREAD_UNIT_KIND,
        Arc::new(move |_, sus| {
            *s2.lock().unwrap() = Some(sus.suspend());
        }),
    );
    let pu = cm.create_processing_unit(&resource(0, None)).unwrap();
    cm.initialize(&pu).unwrap();
    let st = cm.create_execution_state(&unit, Argument::none()).unwrap();
    cm.execute(&pu, &st).unwrap();
    cm.await_completion(&pu).unwrap();
    assert!(matches!(seen.lock().unwrap().take(), Some(Err(HicrError::WrongLifecycle(_)))));
    assert_eq!(st.history(), vec![L::Initialized, L::Running, L::Finished]);
    cm.finalize(&pu).unwrap();
}

#[test]
fn unit_kind_mismatch_rejected() {
    let cm = ThreadComputeManager::new();
    let unit = coroutine_unit(|_, _| {});
    assert!(matches!(cm.create_execution_state(&unit, Argument::none()), Err(HicrError::UnsupportedUnitKind { .. })));
}

#[test]
fn coroutine_yield_once_trace() {
    let cm = CoroutineComputeManager::new().without_pinning();
    let pu = cm.create_processing_unit(&resource(0, None)).unwrap();
    cm.initialize(&pu).unwrap();
    let unit = coroutine_unit(|_, sus| {
        sus.suspend().unwrap();
    });
    let st = cm.create_execution_state(&unit, Argument::none()).unwrap();
    cm.execute(&pu, &st).unwrap();
    cm.await_completion(&pu).unwrap();
    assert_eq!(st.lifecycle(), L::Suspended);
    assert_eq!(pu.lifecycle(), ProcessingLifecycle::Ready);
    cm.execute(&pu, &st).unwrap();
    cm.await_completion(&pu).unwrap();
    assert_eq!(st.history(), vec![L::Initialized, L::Running, L::Suspended, L::Running, L::Finished]);
    assert!(matches!(cm.execute(&pu, &st), Err(HicrError::WrongLifecycle(_))));
    cm.finalize(&pu).unwrap();
}

#[test]
fn coroutine_without_yield_trace() {
    let cm = CoroutineComputeManager::new().without_pinning();
    let pu = cm.create_processing_unit(&resource(0, None)).unwrap();
    cm.initialize(&pu).unwrap();
    let st = cm.create_execution_state(&coroutine_unit(|_, _| {}), Argument::none()).unwrap();
    cm.execute(&pu, &st).unwrap();
    cm.await_completion(&pu).unwrap();
    assert_eq!(st.history(), vec![L::Initialized, L::Running, L::Finished]);
    cm.finalize(&pu).unwrap();
}

#[test]
fn coroutine_partial_sums_survive_yields() {
    const K: u64 = 1000;
    let cm = CoroutineComputeManager::new().without_pinning();
    let pu = cm.create_processing_unit(&resource(0, None)).unwrap();
    cm.initialize(&pu).unwrap();
    let observed = Arc::new(Mutex::new(Vec::new()));
    let obs = observed.clone();
    let unit = coroutine_unit(move |_, _| {
        let mut sum = 0u64;
        for i in 1..=K {
            sum += i;
            obs.lock().unwrap().push(sum);
            yield_now().unwrap();
        }
    });
    let st = cm.create_execution_state(&unit, Argument::none()).unwrap();
    let mut resumes = 0;
    loop {
        cm.execute(&pu, &st).unwrap();
        cm.await_completion(&pu).unwrap();
        if st.is_finished() {
            break;
        }
        resumes += 1;
    }
    assert_eq!(resumes, K);
    let sums = observed.lock().unwrap().clone();
    let expected: Vec<u64> = (1..=K).map(|k| k * (k + 1) / 2).collect();
    assert_eq!(sums, expected);
    cm.finalize(&pu).unwrap();
}

#[test]
fn yield_outside_coroutine_fails() {
    assert!(matches!(yield_now(), Err(HicrError::WrongLifecycle(_))));
}

#[test]
fn suspended_coroutine_migrates_between_units() {
    let cm = CoroutineComputeManager::new().without_pinning();
    let a = cm.create_processing_unit(&resource(0, None)).unwrap();
    let b = cm.create_processing_unit(&resource(1, None)).unwrap();
    cm.initialize(&a).unwrap();
    cm.initialize(&b).unwrap();
    let threads = Arc::new(Mutex::new(Vec::new()));
    let t2 = threads.clone();
    let unit = coroutine_unit(move |_, sus| {
        let local = 41u64;
        t2.lock().unwrap().push(std::thread::current().id());
        sus.suspend().unwrap();
        t2.lock().unwrap().push(std::thread::current().id());
        assert_eq!(local + 1, 42);
    });
    let st = cm.create_execution_state(&unit, Argument::none()).unwrap();
    cm.execute(&a, &st).unwrap();
    cm.await_completion(&a).unwrap();
    cm.execute(&b, &st).unwrap();
    cm.await_completion(&b).unwrap();
    assert!(st.is_finished() && st.failure().is_none());
    let t = threads.lock().unwrap().clone();
    assert_ne!(t[0], t[1]);
    cm.finalize(&a).unwrap();
    cm.finalize(&b).unwrap();
}

#[test]
fn panicking_body_is_recorded() {
    let cm = CoroutineComputeManager::new().without_pinning();
    let pu = cm.create_processing_unit(&resource(0, None)).unwrap();
    cm.initialize(&pu).unwrap();
    let st = cm.create_execution_state(&coroutine_unit(|_, _| panic!("boom")), Argument::none()).unwrap();
    cm.execute(&pu, &st).unwrap();
    cm.await_completion(&pu).unwrap();
    assert!(st.is_finished());
    assert_eq!(st.failure().as_deref(), Some("boom"));
    cm.finalize(&pu).unwrap();
}

#[test]
fn many_short_coroutines_reuse_stacks() {
    let cm = CoroutineComputeManager::with_stack_size(64 * 1024).without_pinning();
    let pu = cm.create_processing_unit(&resource(0, None)).unwrap();
    cm.initialize(&pu).unwrap();
    let counter = Arc::new(AtomicU64::new(0));
    let c = counter.clone();
    let unit = coroutine_unit(move |_, sus| {
        sus.suspend().unwrap();
        c.fetch_add(1, Ordering::Relaxed);
    });
    let states: Vec<_> = (0..2000).map(|_| cm.create_execution_state(&unit, Argument::none()).unwrap()).collect();
    for s in &states {
        cm.execute(&pu, s).unwrap();
        cm.await_completion(&pu).unwrap();
    }
    for s in &states {
        cm.execute(&pu, s).unwrap();
        cm.await_completion(&pu).unwrap();
    }
    assert_eq!(counter.load(Ordering::Relaxed), 2000);
    cm.finalize(&pu).unwrap();
}
