//! Completion events: awaitable markers for stream operations.

use crate::error::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};

static NEXT_EVENT_ID: AtomicU64 = AtomicU64::new(1);

/// Observable lifecycle of an event. Transitions are one-way:
/// pending -> done or pending -> failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventState {
    Pending,
    Done,
    Failed(Error),
}

struct EventInner {
    id: u64,
    state: Mutex<EventState>,
    cond: Condvar,
}

/// An awaitable marker signaling that an enqueued operation finished or
/// failed. Cloning shares the marker; awaiting is idempotent and awaiting
/// an already-done event returns immediately.
#[derive(Clone)]
pub struct CompletionEvent {
    inner: Arc<EventInner>,
}

impl CompletionEvent {
    pub(crate) fn pending() -> Self {
        CompletionEvent {
            inner: Arc::new(EventInner {
                id: NEXT_EVENT_ID.fetch_add(1, Ordering::Relaxed),
                state: Mutex::new(EventState::Pending),
                cond: Condvar::new(),
            }),
        }
    }

    /// An event that is already complete (synchronous operations).
    pub fn done() -> Self {
        let e = Self::pending();
        e.complete(Ok(()));
        e
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn state(&self) -> EventState {
        self.inner.state.lock().unwrap().clone()
    }

    /// Mark the event done or failed. Completing twice is a logic error
    /// guarded by a panic: events have exactly one producer.
    pub(crate) fn complete(&self, result: Result<()>) {
        let mut st = self.inner.state.lock().unwrap();
        assert!(
            matches!(*st, EventState::Pending),
            "completion event signalled twice"
        );
        *st = match result {
            Ok(()) => EventState::Done,
            Err(e) => EventState::Failed(e),
        };
        self.inner.cond.notify_all();
    }

    /// Block until the event leaves the pending state. Returns the original
    /// operation error on failure; safe to call from any number of threads.
    pub fn wait(&self) -> Result<()> {
        let mut st = self.inner.state.lock().unwrap();
        while matches!(*st, EventState::Pending) {
            st = self.inner.cond.wait(st).unwrap();
        }
        match &*st {
            EventState::Done => Ok(()),
            EventState::Failed(e) => Err(e.clone()),
            EventState::Pending => unreachable!(),
        }
    }
}

impl std::fmt::Debug for CompletionEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompletionEvent")
            .field("id", &self.inner.id)
            .field("state", &self.state())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;
    use std::time::Duration;

    #[test]
    fn await_on_done_event_is_immediate_and_idempotent() {
        let e = CompletionEvent::done();
        assert!(e.wait().is_ok());
        assert!(e.wait().is_ok());
        assert_eq!(e.state(), EventState::Done);
    }

    #[test]
    fn waiters_observe_failure() {
        let e = CompletionEvent::pending();
        let e2 = e.clone();
        let h = thread::spawn(move || e2.wait());
        thread::sleep(Duration::from_millis(10));
        e.complete(Err(Error::Shape("boom".into())));
        let got = h.join().unwrap();
        assert_eq!(got, Err(Error::Shape("boom".into())));
        // idempotent on failure too
        assert_eq!(e.wait(), Err(Error::Shape("boom".into())));
    }

    #[test]
    fn ids_are_unique() {
        let a = CompletionEvent::pending();
        let b = CompletionEvent::pending();
        assert_ne!(a.id(), b.id());
    }
}
