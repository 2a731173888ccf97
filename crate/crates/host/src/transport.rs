//! Request transport for a single instance: requests can only target itself.

use std::collections::{HashMap, VecDeque};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use hicr_core::{HicrError, IncomingRequest, InlineHandler, InstanceId, Reply, RequestTransport, Result};
use parking_lot::{Condvar, Mutex};

pub struct LoopbackTransport {
    instance: InstanceId,
    timeout: Duration,
    queue: Mutex<VecDeque<IncomingRequest>>,
    cv: Condvar,
    handlers: Mutex<HashMap<u64, InlineHandler>>,
}

impl Default for LoopbackTransport {
    fn default() -> Self {
        Self::new(InstanceId(0))
    }
}

impl LoopbackTransport {
    pub fn new(instance: InstanceId) -> Self {
        Self {
            instance,
            timeout: Duration::from_secs(10),
            queue: Mutex::new(VecDeque::new()),
            cv: Condvar::new(),
            handlers: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl RequestTransport for LoopbackTransport {
    fn current_instance(&self) -> InstanceId {
        self.instance
    }

    fn request(&self, target: InstanceId, name_hash: u64, argument: &[u8]) -> Result<Reply> {
        if target != self.instance {
            return Err(HicrError::PeerUnreachable(format!("instance {target} is not part of this deployment")));
        }
        let inline = self.handlers.lock().get(&name_hash).cloned();
        if let Some(h) = inline {
            return Ok(h(self.instance, argument));
        }
        let (tx, rx) = mpsc::channel();
        let responder = Box::new(move |r: Reply| tx.send(r).map_err(|_| HicrError::Protocol("requester gone".into())));
        self.queue.lock().push_back(IncomingRequest::new(self.instance, name_hash, argument.to_vec(), responder));
        self.cv.notify_all();
        rx.recv_timeout(self.timeout).map_err(|_| HicrError::Timeout("no reply to loopback request".into()))
    }

    fn next_request(&self, timeout: Option<Duration>) -> Result<IncomingRequest> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut q = self.queue.lock();
        loop {
            if let Some(r) = q.pop_front() {
                return Ok(r);
            }
            match deadline {
                None => self.cv.wait(&mut q),
                Some(d) => {
                    if self.cv.wait_until(&mut q, d).timed_out() && q.is_empty() {
                        return Err(HicrError::Timeout("no incoming request".into()));
                    }
                }
            }
        }
    }

    fn set_inline_handler(&self, name_hash: u64, handler: InlineHandler) {
        self.handlers.lock().insert(name_hash, handler);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn queued_request_round_trip() {
        let t = Arc::new(LoopbackTransport::default());
        let server = t.clone();
        let h = std::thread::spawn(move || {
            let req = server.next_request(Some(Duration::from_secs(5))).unwrap();
            let mut out = req.argument.clone();
            out.reverse();
            req.respond(Reply::ok(out)).unwrap();
        });
        let r = t.request(InstanceId(0), 1, b"abc").unwrap();
        assert_eq!(r.payload, b"cba");
        h.join().unwrap();
    }

    #[test]
    fn inline_handler_and_unknown_peer() {
        let t = LoopbackTransport::default();
        t.set_inline_handler(9, Arc::new(|_, a| Reply::ok(a.to_vec())));
        assert_eq!(t.request(InstanceId(0), 9, b"x").unwrap().payload, b"x");
        assert!(matches!(t.request(InstanceId(3), 9, b"x"), Err(HicrError::PeerUnreachable(_))));
        assert!(matches!(t.next_request(Some(Duration::from_millis(10))), Err(HicrError::Timeout(_))));
    }
}
