//! Reusable host-side transfer slots for uploads.
//!
//! Transfers pass through fixed-size slots; a transfer larger than one slot
//! is split into sequential stream-ordered chunks. Slot vectors travel with
//! the copy task and come back through a reclaim channel, so the cache never
//! holds more than `capacity_bytes` of slot memory at once.

use crate::backend::{CompletionEvent, DeviceBuffer, EngineBase, StreamQueue};
use crate::error::Result;
use parking_lot::Mutex;
use std::sync::mpsc::{channel, Receiver, Sender};

pub const DEFAULT_CAPACITY: usize = 16 << 20;
pub const DEFAULT_SLOT: usize = 1 << 20;

pub struct StagingCache {
    slot_bytes: usize,
    max_slots: usize,
    state: Mutex<SlotState>,
    reclaim_tx: Sender<Vec<u8>>,
}

struct SlotState {
    idle: Vec<Vec<u8>>,
    created: usize,
    reclaim_rx: Receiver<Vec<u8>>,
}

impl StagingCache {
    pub fn new(capacity_bytes: usize, slot_bytes: usize) -> Self {
        let (reclaim_tx, reclaim_rx) = channel();
        StagingCache {
            slot_bytes,
            max_slots: (capacity_bytes / slot_bytes).max(1),
            state: Mutex::new(SlotState {
                idle: Vec::new(),
                created: 0,
                reclaim_rx,
            }),
            reclaim_tx,
        }
    }

    pub fn slot_bytes(&self) -> usize {
        self.slot_bytes
    }

    /// Grab an idle slot, or block until an in-flight one is reclaimed when
    /// the budget is exhausted. Blocking is what sequences oversized
    /// transfers into chunks.
    fn acquire_slot(&self) -> Vec<u8> {
        let mut st = self.state.lock();
        while let Ok(slot) = st.reclaim_rx.try_recv() {
            st.idle.push(slot);
        }
        if let Some(slot) = st.idle.pop() {
            return slot;
        }
        if st.created < self.max_slots {
            st.created += 1;
            return Vec::with_capacity(self.slot_bytes);
        }
        st.reclaim_rx.recv().expect("staging reclaim channel closed")
    }

    /// Upload `data` into `dst` through staging slots. Equivalent to a
    /// direct copy; returns the event of the final chunk (FIFO order makes
    /// it cover the whole transfer).
    pub fn upload(
        &self,
        backend: &dyn EngineBase,
        data: &[u8],
        dst: &DeviceBuffer,
        stream: &StreamQueue,
    ) -> Result<CompletionEvent> {
        if data.is_empty() {
            return Ok(CompletionEvent::done());
        }
        let mut last = None;
        for (i, chunk) in data.chunks(self.slot_bytes).enumerate() {
            let mut slot = self.acquire_slot();
            slot.clear();
            slot.extend_from_slice(chunk);
            let ev = backend.write_from_host(
                slot,
                dst,
                i * self.slot_bytes,
                Some(self.reclaim_tx.clone()),
                stream,
            )?;
            last = Some(ev);
        }
        Ok(last.expect("nonempty transfer"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::cpu::CpuEngineBase;
    use crate::backend::EngineBase;

    #[test]
    fn upload_equals_direct_copy() {
        let backend = CpuEngineBase::new();
        let s = backend.create_stream().unwrap();
        let cache = StagingCache::new(4096, 1024);
        let data: Vec<u8> = (0..2000u32).map(|i| (i * 7 % 251) as u8).collect();
        let dst = backend.alloc(2000).unwrap();
        cache.upload(&backend, &data, &dst, &s).unwrap().wait().unwrap();
        let back = backend.read_to_host(&dst, 0, 2000, &s).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn transfer_larger_than_whole_cache_is_chunked() {
        let backend = CpuEngineBase::new();
        let s = backend.create_stream().unwrap();
        // 2 slots of 64 bytes; transfer 1000 bytes through them.
        let cache = StagingCache::new(128, 64);
        let data: Vec<u8> = (0..1000u32).map(|i| (i % 256) as u8).collect();
        let dst = backend.alloc(1000).unwrap();
        cache.upload(&backend, &data, &dst, &s).unwrap().wait().unwrap();
        assert_eq!(backend.read_to_host(&dst, 0, 1000, &s).unwrap(), data);
    }

    #[test]
    fn zero_byte_upload_is_immediately_done() {
        let backend = CpuEngineBase::new();
        let s = backend.create_stream().unwrap();
        let cache = StagingCache::new(128, 64);
        let dst = backend.alloc(16).unwrap();
        let ev = cache.upload(&backend, &[], &dst, &s).unwrap();
        assert_eq!(ev.state(), crate::backend::EventState::Done);
    }
}
