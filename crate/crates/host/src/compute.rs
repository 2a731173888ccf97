//! Processing-unit bookkeeping shared by the thread and coroutine compute managers.

use std::sync::Arc;

use hicr_core::{
    Argument, ComputeResource, ExecutionLifecycle, ExecutionState, ExecutionUnit, HicrError, ProcessingLifecycle,
    ProcessingUnit, Result,
};
use parking_lot::Mutex;

use crate::driver::{Driver, PinOutcome, PuDriver};

/// Drives one execution state on the current thread until it finishes or
/// suspends, updating its lifecycle accordingly.
pub(crate) trait StateRunner: Send + Sync + 'static {
    fn run(&self, state: &ExecutionState);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PinRecord {
    pub processing_unit: u64,
    pub requested_core: Option<u32>,
    pub outcome: PinOutcome,
}

pub(crate) struct HostCompute<R: StateRunner> {
    pub kind: &'static str,
    pub accepted_resource_kinds: Option<Vec<String>>,
    pub pin: bool,
    pub resumable: bool,
    pub affinity_log: Mutex<Vec<PinRecord>>,
    pub runner: Arc<R>,
}

impl<R: StateRunner> HostCompute<R> {
    pub fn create_processing_unit(&self, resource: &ComputeResource) -> Result<ProcessingUnit> {
        if let Some(kinds) = &self.accepted_resource_kinds {
            if !kinds.contains(&resource.kind) {
                return Err(HicrError::UnsupportedResource(resource.resource_id));
            }
        }
        Ok(ProcessingUnit::new(resource.clone(), Arc::new(PuDriver::default())))
    }

    pub fn create_execution_state(&self, unit: &ExecutionUnit, argument: Argument) -> Result<ExecutionState> {
        self.check_kind(unit)?;
        Ok(ExecutionState::new(unit.clone(), argument))
    }

    fn check_kind(&self, unit: &ExecutionUnit) -> Result<()> {
        if unit.kind() != self.kind {
            return Err(HicrError::UnsupportedUnitKind { expected: self.kind.into(), found: unit.kind().into() });
        }
        Ok(())
    }

    fn pu_driver(pu: &ProcessingUnit) -> Result<Arc<PuDriver>> {
        pu.driver::<PuDriver>()
            .ok_or_else(|| HicrError::WrongLifecycle("processing unit belongs to another compute manager".into()))
    }

    pub fn initialize(&self, pu: &ProcessingUnit) -> Result<()> {
        let holder = Self::pu_driver(pu)?;
        if pu.lifecycle() != ProcessingLifecycle::Created {
            return Err(HicrError::WrongLifecycle(format!("processing unit {} already initialized", pu.id())));
        }
        let core = if self.pin { pu.resource().affinity_hint } else { None };
        let (driver, outcome) = Driver::start(format!("{}-pu{}", self.kind, pu.id()), core)?;
        self.affinity_log.lock().push(PinRecord { processing_unit: pu.id(), requested_core: core, outcome });
        holder.install(driver);
        pu.transition_from(ProcessingLifecycle::Created, ProcessingLifecycle::Ready)
    }

    pub fn execute(&self, pu: &ProcessingUnit, state: &ExecutionState) -> Result<()> {
        self.check_kind(state.unit())?;
        let driver = Self::pu_driver(pu)?
            .get()
            .ok_or_else(|| HicrError::WrongLifecycle(format!("processing unit {} not initialized", pu.id())))?;
        match state.lifecycle() {
            ExecutionLifecycle::Initialized => {}
            ExecutionLifecycle::Suspended if self.resumable => {}
            other => {
                return Err(HicrError::WrongLifecycle(format!("execution state {} is {other:?}", state.id())));
            }
        }
        pu.transition_from(ProcessingLifecycle::Ready, ProcessingLifecycle::Executing)?;
        // claim the state before handing it over so no other unit can start it
        if let Err(e) = state.transition(ExecutionLifecycle::Running) {
            pu.transition(ProcessingLifecycle::Ready)?;
            return Err(HicrError::WrongLifecycle(e.to_string()));
        }
        let runner = self.runner.clone();
        let (st, p) = (state.clone(), pu.clone());
        driver.submit(Box::new(move || {
            runner.run(&st);
            let _ = p.transition_from(ProcessingLifecycle::Executing, ProcessingLifecycle::Ready);
        }))
    }

    pub fn await_completion(&self, pu: &ProcessingUnit) -> Result<()> {
        if let Some(d) = Self::pu_driver(pu)?.get() {
            d.wait_idle();
        }
        Ok(())
    }

    pub fn finalize(&self, pu: &ProcessingUnit) -> Result<()> {
        if let Some(d) = Self::pu_driver(pu)?.take() {
            d.shutdown();
        }
        pu.transition(ProcessingLifecycle::Terminated)
    }
}
