//! Compute manager running execution states as user-level contexts that can
//! suspend at arbitrary points and resume later, possibly on another
//! processing unit.
//!
//! Each processing unit owns one OS thread that switches into a state's
//! context and back out when the state yields or returns.

use std::cell::Cell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::atomic::{AtomicPtr, Ordering};
use std::sync::Arc;

use corosensei::stack::DefaultStack;
use corosensei::{Coroutine, CoroutineResult, Yielder};
use hicr_core::{
    Argument, ComputeManager, ComputeResource, ExecutionLifecycle, ExecutionState, ExecutionUnit, HicrError,
    ProcessingUnit, Result, Suspender,
};
use parking_lot::Mutex;

use crate::compute::{HostCompute, PinRecord, StateRunner};
use crate::driver::panic_message;

pub const COROUTINE_UNIT_KIND: &str = "coroutine";
pub const DEFAULT_STACK_SIZE: usize = 256 * 1024;
const STACK_POOL_LIMIT: usize = 1024;

type Co = Coroutine<(), (), std::result::Result<(), String>, DefaultStack>;
type CoYielder = Yielder<(), ()>;

thread_local! {
    static CURRENT: Cell<*const CoYielder> = const { Cell::new(ptr::null()) };
}

/// Execution unit whose body may suspend through the given [`Suspender`].
pub fn coroutine_unit<F>(body: F) -> ExecutionUnit
where
    F: Fn(&Argument, &dyn Suspender) + Send + Sync + 'static,
{
    ExecutionUnit::new(COROUTINE_UNIT_KIND, Arc::new(body))
}

/// Suspends the coroutine running on the calling thread.
///
/// Fails with `WrongLifecycle` when called outside a running coroutine.
#[inline(never)]
pub fn yield_now() -> Result<()> {
    let y = CURRENT.with(|c| c.get());
    if y.is_null() {
        return Err(HicrError::WrongLifecycle("yield outside of a running coroutine".into()));
    }
    // SAFETY: CURRENT is only non-null while the driver is inside `resume`
    // of the coroutine owning this yielder, i.e. we are on its stack.
    unsafe { (*y).suspend(()) };
    Ok(())
}

struct CoSuspender<'a>(&'a CoYielder);

impl Suspender for CoSuspender<'_> {
    fn suspend(&self) -> Result<()> {
        self.0.suspend(());
        Ok(())
    }

    fn can_suspend(&self) -> bool {
        true
    }
}

struct Context {
    co: Co,
    yielder: Arc<AtomicPtr<CoYielder>>,
}

// SAFETY: the coroutine is only moved between threads while suspended, never
// while one of its frames is executing, and the body it runs is Send + Sync.
unsafe impl Send for Context {}

pub(crate) struct CoroutineRunner {
    stack_size: usize,
    pool: Mutex<Vec<DefaultStack>>,
}

impl CoroutineRunner {
    fn new_context(&self, state: &ExecutionState) -> Result<Context> {
        let stack = match self.pool.lock().pop() {
            Some(s) => s,
            None => DefaultStack::new(self.stack_size)?,
        };
        let body = state.unit().body().clone();
        let argument = state.argument().clone();
        let yielder = Arc::new(AtomicPtr::new(ptr::null_mut()));
        let y2 = yielder.clone();
        let co = Coroutine::with_stack(stack, move |y: &CoYielder, ()| {
            y2.store(y as *const CoYielder as *mut CoYielder, Ordering::Release);
            CURRENT.with(|c| c.set(y));
            let suspender = CoSuspender(y);
            catch_unwind(AssertUnwindSafe(|| body(&argument, &suspender))).map_err(|p| panic_message(&*p))
        });
        Ok(Context { co, yielder })
    }
}

impl StateRunner for CoroutineRunner {
    fn run(&self, state: &ExecutionState) {
        let existing = state.context().take();
        let mut ctx = match existing.map(|b| b.downcast::<Context>()) {
            Some(Ok(c)) => *c,
            Some(Err(_)) => unreachable!("state context owned by another manager"),
            None => match self.new_context(state) {
                Ok(c) => c,
                Err(e) => {
                    state.set_failure(e.to_string());
                    let _ = state.transition(ExecutionLifecycle::Finished);
                    return;
                }
            },
        };
        CURRENT.with(|c| c.set(ctx.yielder.load(Ordering::Acquire)));
        let result = ctx.co.resume(());
        CURRENT.with(|c| c.set(ptr::null()));
        match result {
            CoroutineResult::Yield(()) => {
                // store before publishing the suspension so a resumer finds it
                *state.context() = Some(Box::new(ctx));
                state.transition(ExecutionLifecycle::Suspended).expect("running state suspends");
            }
            CoroutineResult::Return(r) => {
                if let Err(msg) = r {
                    state.set_failure(msg);
                }
                let stack = ctx.co.into_stack();
                let mut pool = self.pool.lock();
                if pool.len() < STACK_POOL_LIMIT {
                    pool.push(stack);
                }
                drop(pool);
                state.transition(ExecutionLifecycle::Finished).expect("running state finishes");
            }
        }
    }
}

pub struct CoroutineComputeManager {
    inner: HostCompute<CoroutineRunner>,
}

impl Default for CoroutineComputeManager {
    fn default() -> Self {
        Self::new()
    }
}

impl CoroutineComputeManager {
    pub fn new() -> Self {
        Self::with_stack_size(DEFAULT_STACK_SIZE)
    }

    pub fn with_stack_size(stack_size: usize) -> Self {
        Self {
            inner: HostCompute {
                kind: COROUTINE_UNIT_KIND,
                accepted_resource_kinds: None,
                pin: true,
                resumable: true,
                affinity_log: Mutex::new(Vec::new()),
                runner: Arc::new(CoroutineRunner { stack_size, pool: Mutex::new(Vec::new()) }),
            },
        }
    }

    pub fn without_pinning(mut self) -> Self {
        self.inner.pin = false;
        self
    }

    pub fn affinity_log(&self) -> Vec<PinRecord> {
        self.inner.affinity_log.lock().clone()
    }
}

impl ComputeManager for CoroutineComputeManager {
    fn unit_kind(&self) -> &str {
        COROUTINE_UNIT_KIND
    }

    fn supports_suspension(&self) -> bool {
        true
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
