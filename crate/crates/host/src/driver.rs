//! OS thread that backs one processing unit and runs submitted jobs one at a time.

use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;

use hicr_core::{HicrError, Result};
use parking_lot::{Condvar, Mutex};

type Job = Box<dyn FnOnce() + Send>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PinOutcome {
    Pinned(u32),
    /// The request for this core was issued but refused by the OS.
    Failed(u32),
    /// No affinity hint, or the platform has no affinity support.
    Unpinned,
}

#[derive(Default)]
struct Slot {
    job: Option<Job>,
    busy: bool,
    shutdown: bool,
}

#[derive(Default)]
struct Shared {
    slot: Mutex<Slot>,
    cv: Condvar,
}

pub(crate) struct Driver {
    shared: Arc<Shared>,
    handle: Mutex<Option<JoinHandle<()>>>,
}

impl Driver {
    pub fn start(name: String, core: Option<u32>) -> Result<(Self, PinOutcome)> {
        let shared = Arc::new(Shared::default());
        let (tx, rx) = mpsc::channel();
        let s = shared.clone();
        let handle = std::thread::Builder::new()
            .name(name)
            .spawn(move || {
                let outcome = match core {
                    Some(c) => pin_current_thread(c),
                    None => PinOutcome::Unpinned,
                };
                let _ = tx.send(outcome);
                run(&s);
            })
            .map_err(|e| HicrError::Io(e.to_string()))?;
        let outcome = rx.recv().unwrap_or(PinOutcome::Unpinned);
        Ok((Self { shared, handle: Mutex::new(Some(handle)) }, outcome))
    }

    pub fn submit(&self, job: Job) -> Result<()> {
        let mut slot = self.shared.slot.lock();
        if slot.busy || slot.shutdown {
            return Err(HicrError::WrongLifecycle("processing unit is busy".into()));
        }
        slot.job = Some(job);
        slot.busy = true;
        self.shared.cv.notify_all();
        Ok(())
    }

    pub fn wait_idle(&self) {
        let mut slot = self.shared.slot.lock();
        while slot.busy {
            self.shared.cv.wait(&mut slot);
        }
    }

    pub fn shutdown(&self) {
        self.wait_idle();
        self.shared.slot.lock().shutdown = true;
        self.shared.cv.notify_all();
        let handle = self.handle.lock().take();
        if let Some(h) = handle {
            let _ = h.join();
        }
    }
}

impl Drop for Driver {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn run(shared: &Shared) {
    loop {
        let job = {
            let mut slot = shared.slot.lock();
            loop {
                if let Some(j) = slot.job.take() {
                    break j;
                }
                if slot.shutdown {
                    return;
                }
                shared.cv.wait(&mut slot);
            }
        };
        job();
        let mut slot = shared.slot.lock();
        slot.busy = false;
        shared.cv.notify_all();
    }
}

/// Best-effort request to bind the calling thread to one logical core.
#[cfg(target_os = "linux")]
pub fn pin_current_thread(core: u32) -> PinOutcome {
    if core as usize >= libc::CPU_SETSIZE as usize {
        return PinOutcome::Failed(core);
    }
    // SAFETY: cpu_set_t is plain data; the call only affects this thread.
    let rc = unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(core as usize, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set)
    };
    if rc == 0 {
        PinOutcome::Pinned(core)
    } else {
        PinOutcome::Failed(core)
    }
}

#[cfg(not(target_os = "linux"))]
pub fn pin_current_thread(_core: u32) -> PinOutcome {
    PinOutcome::Unpinned
}

/// Holds the driver of one processing unit; installed as the unit's driver.
#[derive(Default)]
pub(crate) struct PuDriver {
    driver: Mutex<Option<Arc<Driver>>>,
}

impl PuDriver {
    pub fn install(&self, d: Driver) {
        *self.driver.lock() = Some(Arc::new(d));
    }

    pub fn get(&self) -> Option<Arc<Driver>> {
        self.driver.lock().clone()
    }

    pub fn take(&self) -> Option<Arc<Driver>> {
        self.driver.lock().take()
    }
}

pub(crate) fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_owned()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "execution unit panicked".to_owned()
    }
}
