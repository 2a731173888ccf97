//! Execution units, execution states and processing units.

use std::any::Any;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::error::{HicrError, Result};
use crate::topology::ComputeResource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExecutionLifecycle {
    Initialized,
    Running,
    Suspended,
    Finished,
}

impl ExecutionLifecycle {
    pub const ALL: [ExecutionLifecycle; 4] = [
        ExecutionLifecycle::Initialized,
        ExecutionLifecycle::Running,
        ExecutionLifecycle::Suspended,
        ExecutionLifecycle::Finished,
    ];

    pub fn can_transition(self, to: ExecutionLifecycle) -> bool {
        use ExecutionLifecycle::*;
        matches!((self, to), (Initialized, Running) | (Running, Suspended) | (Suspended, Running) | (Running, Finished))
    }

    pub fn transition(self, to: ExecutionLifecycle) -> Result<ExecutionLifecycle> {
        if self.can_transition(to) {
            Ok(to)
        } else {
            Err(HicrError::IllegalTransition { from: self, to })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProcessingLifecycle {
    Created,
    Ready,
    Executing,
    Suspended,
    Terminated,
}

impl ProcessingLifecycle {
    pub const ALL: [ProcessingLifecycle; 5] = [
        ProcessingLifecycle::Created,
        ProcessingLifecycle::Ready,
        ProcessingLifecycle::Executing,
        ProcessingLifecycle::Suspended,
        ProcessingLifecycle::Terminated,
    ];

    pub fn can_transition(self, to: ProcessingLifecycle) -> bool {
        use ProcessingLifecycle::*;
        match (self, to) {
            (Terminated, _) => false,
            (_, Terminated) => true,
            (Created, Ready) | (Ready, Executing) | (Executing, Ready) => true,
            (Executing, Suspended) | (Suspended, Executing) => true,
            _ => false,
        }
    }

    pub fn transition(self, to: ProcessingLifecycle) -> Result<ProcessingLifecycle> {
        if self.can_transition(to) {
            Ok(to)
        } else {
            Err(HicrError::IllegalPuTransition { from: self, to })
        }
    }
}

/// Opaque argument handed to an execution unit body.
#[derive(Clone, Default)]
pub struct Argument(Option<Arc<dyn Any + Send + Sync>>);

impl Argument {
    pub fn none() -> Self {
        Self(None)
    }

    pub fn new<T: Any + Send + Sync>(value: T) -> Self {
        Self(Some(Arc::new(value)))
    }

    pub fn from_arc(value: Arc<dyn Any + Send + Sync>) -> Self {
        Self(Some(value))
    }

    pub fn get<T: Any>(&self) -> Option<&T> {
        self.0.as_deref().and_then(|a| a.downcast_ref::<T>())
    }

    pub fn is_none(&self) -> bool {
        self.0.is_none()
    }
}

impl fmt::Debug for Argument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.0.is_some() { "Argument(..)" } else { "Argument(none)" })
    }
}

/// Capability handed to a running body to yield back to its processing unit.
pub trait Suspender {
    /// Suspends the running state; returns once it has been resumed.
    fn suspend(&self) -> Result<()>;

    fn can_suspend(&self) -> bool;
}

/// Suspender for bodies driven by compute managers without suspension support.
pub struct NoSuspend;

impl Suspender for NoSuspend {
    fn suspend(&self) -> Result<()> {
        Err(HicrError::WrongLifecycle("this execution state cannot be suspended".into()))
    }

    fn can_suspend(&self) -> bool {
        false
    }
}

pub type UnitBody = Arc<dyn Fn(&Argument, &dyn Suspender) + Send + Sync>;

static NEXT_UNIT_ID: AtomicU64 = AtomicU64::new(1);
static NEXT_STATE_ID: AtomicU64 = AtomicU64::new(1);
static NEXT_PU_ID: AtomicU64 = AtomicU64::new(1);

/// Static, replicable description of a function.
#[derive(Clone)]
pub struct ExecutionUnit {
    id: u64,
    kind: Arc<str>,
    body: UnitBody,
}

impl ExecutionUnit {
    pub fn new(kind: &str, body: UnitBody) -> Self {
        Self { id: NEXT_UNIT_ID.fetch_add(1, Ordering::Relaxed), kind: kind.into(), body }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn body(&self) -> &UnitBody {
        &self.body
    }
}

impl fmt::Debug for ExecutionUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExecutionUnit").field("id", &self.id).field("kind", &self.kind).finish()
    }
}

struct StateRecord {
    current: ExecutionLifecycle,
    history: Vec<ExecutionLifecycle>,
}

struct StateInner {
    id: u64,
    unit: ExecutionUnit,
    argument: Argument,
    record: Mutex<StateRecord>,
    context: Mutex<Option<Box<dyn Any + Send>>>,
    failure: Mutex<Option<String>>,
}

/// One run of an execution unit. Single-use: once finished it cannot run again.
#[derive(Clone)]
pub struct ExecutionState(Arc<StateInner>);

impl ExecutionState {
    pub fn new(unit: ExecutionUnit, argument: Argument) -> Self {
        Self(Arc::new(StateInner {
            id: NEXT_STATE_ID.fetch_add(1, Ordering::Relaxed),
            unit,
            argument,
            record: Mutex::new(StateRecord {
                current: ExecutionLifecycle::Initialized,
                history: vec![ExecutionLifecycle::Initialized],
            }),
            context: Mutex::new(None),
            failure: Mutex::new(None),
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn unit(&self) -> &ExecutionUnit {
        &self.0.unit
    }

    pub fn argument(&self) -> &Argument {
        &self.0.argument
    }

    pub fn lifecycle(&self) -> ExecutionLifecycle {
        self.0.record.lock().current
    }

    pub fn is_finished(&self) -> bool {
        self.lifecycle() == ExecutionLifecycle::Finished
    }

    /// Every lifecycle the state has been in, in order.
    pub fn history(&self) -> Vec<ExecutionLifecycle> {
        self.0.record.lock().history.clone()
    }

    pub fn transition(&self, to: ExecutionLifecycle) -> Result<()> {
        let mut r = self.0.record.lock();
        r.current = r.current.transition(to)?;
        r.history.push(to);
        Ok(())
    }

    /// Backend-private run context (e.g. a suspended user-level context).
    pub fn context(&self) -> parking_lot::MutexGuard<'_, Option<Box<dyn Any + Send>>> {
        self.0.context.lock()
    }

    pub fn set_failure(&self, msg: String) {
        *self.0.failure.lock() = Some(msg);
    }

    /// Panic message if the body panicked.
    pub fn failure(&self) -> Option<String> {
        self.0.failure.lock().clone()
    }
}

impl fmt::Debug for ExecutionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExecutionState")
            .field("id", &self.0.id)
            .field("unit", &self.0.unit.id)
            .field("lifecycle", &self.lifecycle())
            .finish()
    }
}

struct PuInner {
    id: u64,
    resource: ComputeResource,
    lifecycle: Mutex<ProcessingLifecycle>,
    driver: Arc<dyn Any + Send + Sync>,
}

/// A compute resource made ready to execute by a compute manager.
#[derive(Clone)]
pub struct ProcessingUnit(Arc<PuInner>);

impl ProcessingUnit {
    pub fn new(resource: ComputeResource, driver: Arc<dyn Any + Send + Sync>) -> Self {
        Self(Arc::new(PuInner {
            id: NEXT_PU_ID.fetch_add(1, Ordering::Relaxed),
            resource,
            lifecycle: Mutex::new(ProcessingLifecycle::Created),
            driver,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn resource(&self) -> &ComputeResource {
        &self.0.resource
    }

    pub fn lifecycle(&self) -> ProcessingLifecycle {
        *self.0.lifecycle.lock()
    }

    pub fn transition(&self, to: ProcessingLifecycle) -> Result<()> {
        let mut l = self.0.lifecycle.lock();
        *l = l.transition(to)?;
        Ok(())
    }

    /// Transitions only if the current lifecycle is `from`.
    pub fn transition_from(&self, from: ProcessingLifecycle, to: ProcessingLifecycle) -> Result<()> {
        let mut l = self.0.lifecycle.lock();
        if *l != from {
            return Err(HicrError::WrongLifecycle(format!(
                "processing unit {} is {:?}, expected {:?}",
                self.0.id, *l, from
            )));
        }
        *l = l.transition(to)?;
        Ok(())
    }

    pub fn driver<T: Any + Send + Sync>(&self) -> Option<Arc<T>> {
        self.0.driver.clone().downcast::<T>().ok()
    }
}

impl fmt::Debug for ProcessingUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProcessingUnit")
            .field("id", &self.0.id)
            .field("resource", &self.0.resource.resource_id)
            .field("lifecycle", &self.lifecycle())
            .finish()
    }
}
