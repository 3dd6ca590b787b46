//! Size-class memory pool over the backend's malloc/free primitives.
//!
//! Classes are powers of two from a 256-byte granularity, so internal
//! fragmentation stays under 2x and class lookup is O(1). Freed buffers
//! park on per-class free lists and are recycled (and re-zeroed) instead
//! of going back to the host; `trim` returns the idle classes.

use crate::backend::{DeviceBuffer, EngineBase};
use crate::error::{Error, Result};
use parking_lot::Mutex;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

const CLASS_GRANULARITY: usize = 256;

/// Snapshot of pool accounting.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub reserved_bytes: usize,
    pub in_use_bytes: usize,
    pub peak_in_use_bytes: usize,
    pub acquire_hits: u64,
    pub acquire_misses: u64,
    pub device_allocs: u64,
    pub device_frees: u64,
}

struct PoolState {
    free_lists: BTreeMap<usize, Vec<DeviceBuffer>>,
    in_use: HashMap<u64, usize>,
    free_bytes: usize,
    stats: PoolStats,
}

pub struct MemoryPool {
    backend: Arc<dyn EngineBase>,
    state: Mutex<PoolState>,
}

/// Smallest size class holding `bytes`: 0 stays 0, otherwise the next
/// power of two at or above the 256-byte granularity.
pub fn size_class(bytes: usize) -> usize {
    if bytes == 0 {
        0
    } else {
        bytes.next_power_of_two().max(CLASS_GRANULARITY)
    }
}

impl MemoryPool {
    pub fn new(backend: Arc<dyn EngineBase>) -> Self {
        MemoryPool {
            backend,
            state: Mutex::new(PoolState {
                free_lists: BTreeMap::new(),
                in_use: HashMap::new(),
                free_bytes: 0,
                stats: PoolStats::default(),
            }),
        }
    }

    /// Hand out a zeroed buffer of the smallest size class >= `bytes`,
    /// recycling a free-listed buffer when one exists.
    pub fn acquire(&self, bytes: usize) -> Result<DeviceBuffer> {
        let class = size_class(bytes);
        let recycled = {
            let mut st = self.state.lock();
            st.free_lists.get_mut(&class).and_then(|l| l.pop()).map(|buf| {
                st.free_bytes -= class;
                buf
            })
        };
        let (buf, hit) = match recycled {
            Some(buf) => {
                self.backend.zero_now(&buf)?;
                (buf, true)
            }
            None => (self.backend.alloc(class)?, false),
        };
        let mut st = self.state.lock();
        st.in_use.insert(buf.handle, class);
        if hit {
            st.stats.acquire_hits += 1;
        } else {
            st.stats.acquire_misses += 1;
            st.stats.device_allocs += 1;
            st.stats.reserved_bytes += class;
        }
        st.stats.in_use_bytes += class;
        st.stats.peak_in_use_bytes = st.stats.peak_in_use_bytes.max(st.stats.in_use_bytes);
        Ok(buf)
    }

    /// Return a buffer to its class's free list.
    pub fn release(&self, buf: &DeviceBuffer) -> Result<()> {
        let mut st = self.state.lock();
        let class = st.in_use.remove(&buf.handle).ok_or_else(|| {
            Error::PoolIntegrity(format!(
                "release of buffer {} that is not in use by this pool",
                buf.handle
            ))
        })?;
        st.stats.in_use_bytes -= class;
        st.free_bytes += class;
        st.free_lists.entry(class).or_default().push(*buf);
        Ok(())
    }

    /// Free every idle buffer back to the host; in-use buffers are untouched.
    pub fn trim(&self) -> Result<usize> {
        let drained: Vec<DeviceBuffer> = {
            let mut st = self.state.lock();
            st.free_lists.values_mut().flat_map(|l| l.drain(..)).collect()
        };
        let mut freed = 0;
        for buf in drained {
            let class = size_class(buf.capacity_bytes);
            self.backend.free(&buf)?;
            let mut st = self.state.lock();
            st.free_bytes -= class;
            st.stats.reserved_bytes -= class;
            st.stats.device_frees += 1;
            freed += class;
        }
        Ok(freed)
    }

    pub fn stats(&self) -> PoolStats {
        self.state.lock().stats.clone()
    }

    pub fn free_bytes(&self) -> usize {
        self.state.lock().free_bytes
    }

    pub fn in_use_count(&self) -> usize {
        self.state.lock().in_use.len()
    }

    fn free_count(&self) -> usize {
        self.state.lock().free_lists.values().map(Vec::len).sum()
    }
}

impl Drop for MemoryPool {
    fn drop(&mut self) {
        // Leaked in-use buffers are a caller bug; idle ones go home.
        let _ = self.trim();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::cpu::CpuEngineBase;
    use proptest::prelude::*;

    fn pool() -> MemoryPool {
        MemoryPool::new(Arc::new(CpuEngineBase::new()))
    }

    #[test]
    fn class_round_up() {
        assert_eq!(size_class(0), 0);
        assert_eq!(size_class(1), 256);
        assert_eq!(size_class(256), 256);
        assert_eq!(size_class(257), 512);
        assert_eq!(size_class(1000), 1024);
    }

    #[test]
    fn first_acquire_misses_into_class_1024() {
        let p = pool();
        assert_eq!(p.stats(), PoolStats::default());
        let b = p.acquire(1000).unwrap();
        assert_eq!(b.capacity_bytes, 1024);
        let s = p.stats();
        assert_eq!(s.acquire_misses, 1);
        assert_eq!(s.device_allocs, 1);
        assert!(s.reserved_bytes >= 1024);
        assert_eq!(s.in_use_bytes, 1024);
    }

    #[test]
    fn release_then_smaller_acquire_hits_same_class() {
        let p = pool();
        let b = p.acquire(1000).unwrap();
        p.release(&b).unwrap();
        assert_eq!(p.in_use_count(), 0);
        assert_eq!(p.free_count(), 1);
        let b2 = p.acquire(900).unwrap();
        // same class, recycled handle, no new device alloc
        assert_eq!(b2.handle, b.handle);
        let s = p.stats();
        assert_eq!(s.device_allocs, 1);
        assert_eq!(s.acquire_hits, 1);
    }

    #[test]
    fn zero_byte_acquire_has_zero_capacity() {
        let p = pool();
        let b = p.acquire(0).unwrap();
        assert_eq!(b.capacity_bytes, 0);
        p.release(&b).unwrap();
    }

    #[test]
    fn double_release_is_pool_integrity_error() {
        let p = pool();
        let b = p.acquire(64).unwrap();
        p.release(&b).unwrap();
        assert!(matches!(p.release(&b), Err(Error::PoolIntegrity(_))));
    }

    #[test]
    fn foreign_buffer_release_is_rejected() {
        let p = pool();
        let backend = CpuEngineBase::new();
        let foreign = backend.alloc(64).unwrap();
        assert!(matches!(p.release(&foreign), Err(Error::PoolIntegrity(_))));
    }

    #[test]
    fn trim_returns_idle_classes_only() {
        let p = pool();
        let a = p.acquire(512).unwrap();
        let b = p.acquire(2048).unwrap();
        p.release(&b).unwrap();
        let freed = p.trim().unwrap();
        assert_eq!(freed, 2048);
        let s = p.stats();
        assert_eq!(s.reserved_bytes, s.in_use_bytes);
        assert_eq!(s.device_frees, 1);
        // in-use buffer still works
        p.release(&a).unwrap();
        let freed2 = p.trim().unwrap();
        assert_eq!(freed2, 512);
        assert_eq!(p.trim().unwrap(), 0);
        assert_eq!(p.stats().reserved_bytes, 0);
    }

    #[test]
    fn peak_is_monotone() {
        let p = pool();
        let a = p.acquire(512).unwrap();
        let peak1 = p.stats().peak_in_use_bytes;
        p.release(&a).unwrap();
        assert_eq!(p.stats().peak_in_use_bytes, peak1);
        let _b = p.acquire(256).unwrap();
        assert!(p.stats().peak_in_use_bytes >= peak1);
    }

    #[test]
    fn steady_state_pattern_stops_allocating() {
        let p = pool();
        let pattern = [300usize, 1000, 64, 4096, 300];
        let mut allocs_after_first = 0;
        for iter in 0..5 {
            let bufs: Vec<_> = pattern.iter().map(|&b| p.acquire(b).unwrap()).collect();
            for b in &bufs {
                p.release(b).unwrap();
            }
            if iter == 0 {
                allocs_after_first = p.stats().device_allocs;
            }
        }
        assert_eq!(p.stats().device_allocs, allocs_after_first);
    }

    #[test]
    fn recycled_buffers_are_zeroed() {
        let backend = Arc::new(CpuEngineBase::new());
        let p = MemoryPool::new(backend.clone());
        let s = backend.create_stream().unwrap();
        let b = p.acquire(64).unwrap();
        backend
            .write_from_host(vec![0xAB; 64], &b, 0, None, &s)
            .unwrap()
            .wait()
            .unwrap();
        p.release(&b).unwrap();
        let b2 = p.acquire(64).unwrap();
        assert_eq!(b2.handle, b.handle);
        let data = backend.read_to_host(&b2, 0, 64, &s).unwrap();
        assert!(data.iter().all(|&x| x == 0));
    }

    proptest! {
        /// Conservation: reserved == in_use + free after every operation,
        /// under arbitrary acquire/release interleavings.
        #[test]
        fn conservation_invariant(ops in proptest::collection::vec(0usize..6000, 1..60)) {
            let p = pool();
            let mut live: Vec<DeviceBuffer> = Vec::new();
            for (i, sz) in ops.iter().enumerate() {
                if i % 3 == 2 && !live.is_empty() {
                    let b = live.remove(sz % live.len());
                    p.release(&b).unwrap();
                } else {
                    live.push(p.acquire(*sz).unwrap());
                }
                let s = p.stats();
                prop_assert_eq!(s.reserved_bytes, s.in_use_bytes + p.free_bytes());
                prop_assert_eq!(s.device_allocs, s.acquire_misses);
                prop_assert!(s.peak_in_use_bytes >= s.in_use_bytes);
            }
        }
    }
}
