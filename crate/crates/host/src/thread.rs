//! Compute manager mapping each processing unit to an OS thread bound to its core.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use hicr_core::{
    Argument, ComputeManager, ComputeResource, ExecutionLifecycle, ExecutionState, ExecutionUnit, NoSuspend,
    ProcessingUnit, Result,
};
use parking_lot::Mutex;

use crate::compute::{HostCompute, PinRecord, StateRunner};
use crate::driver::panic_message;

pub const THREAD_UNIT_KIND: &str = "os-thread";

/// Execution unit whose body runs to completion on an OS thread.
pub fn thread_unit<F>(body: F) -> ExecutionUnit
where
    F: Fn(&Argument) + Send + Sync + 'static,
{
    ExecutionUnit::new(THREAD_UNIT_KIND, Arc::new(move |arg, _| body(arg)))
}

pub(crate) struct ThreadRunner;

impl StateRunner for ThreadRunner {
    fn run(&self, state: &ExecutionState) {
        let body = state.unit().body().clone();
        if let Err(p) = catch_unwind(AssertUnwindSafe(|| body(state.argument(), &NoSuspend))) {
            state.set_failure(panic_message(&*p));
        }
        state.transition(ExecutionLifecycle::Finished).expect("running state finishes");
    }
}

pub struct ThreadComputeManager {
    inner: HostCompute<ThreadRunner>,
}

impl Default for ThreadComputeManager {
    fn default() -> Self {
        Self::new()
    }
}

impl ThreadComputeManager {
    /// Processing units pin their threads to the resource's affinity hint.
    pub fn new() -> Self {
        Self {
            inner: HostCompute {
                kind: THREAD_UNIT_KIND,
                accepted_resource_kinds: None,
                pin: true,
                resumable: false,
                affinity_log: Mutex::new(Vec::new()),
                runner: Arc::new(ThreadRunner),
            },
        }
    }

    pub fn without_pinning(mut self) -> Self {
        self.inner.pin = false;
        self
    }

    pub fn with_accepted_resource_kinds(mut self, kinds: &[&str]) -> Self {
        self.inner.accepted_resource_kinds = Some(kinds.iter().map(|s| s.to_string()).collect());
        self
    }

    /// One record per initialized processing unit, in initialization order.
    pub fn affinity_log(&self) -> Vec<PinRecord> {
        self.inner.affinity_log.lock().clone()
    }
}

impl ComputeManager for ThreadComputeManager {
    fn unit_kind(&self) -> &str {
        THREAD_UNIT_KIND
    }

    fn supports_suspension(&self) -> bool {
        false
    }

    fn create_processing_unit(&self, resource: &ComputeResource) -> Result<ProcessingUnit> {
        self.inner.create_processing_unit(resource)
    }

    fn create_execution_state(&self, unit: &ExecutionUnit, argument: Argument) -> Result<ExecutionState> {
        self.inner.create_execution_state(unit, argument)
    }

    fn initialize(&self, pu: &ProcessingUnit) -> Result<()> {
        self.inner.initialize(pu)
    }

    fn execute(&self, pu: &ProcessingUnit, state: &ExecutionState) -> Result<()> {
        self.inner.execute(pu, state)
    }

    fn await_completion(&self, pu: &ProcessingUnit) -> Result<()> {
        self.inner.await_completion(pu)
    }

    fn finalize(&self, pu: &ProcessingUnit) -> Result<()> {
        self.inner.finalize(pu)
    }
}
