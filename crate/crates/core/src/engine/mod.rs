//! Engine core: the pooled, validated wrapper around a device backend.
//!
//! Adds memory pooling, a staging cache for uploads and parameter
//! validation on top of the raw primitive set. Device details stay behind
//! the [`EngineBase`] object.

pub mod pool;
pub mod staging;
pub mod validate;

pub use pool::{MemoryPool, PoolStats};
pub use staging::StagingCache;

use crate::backend::{CompletionEvent, DeviceBuffer, EngineBase, KernelOp, StreamQueue};
use crate::error::Result;
use std::sync::Arc;

pub struct EngineCore {
    backend: Arc<dyn EngineBase>,
    pool: MemoryPool,
    staging: StagingCache,
}

impl EngineCore {
    pub fn new(backend: Arc<dyn EngineBase>) -> Self {
        EngineCore {
            pool: MemoryPool::new(backend.clone()),
            staging: StagingCache::new(staging::DEFAULT_CAPACITY, staging::DEFAULT_SLOT),
            backend,
        }
    }

    pub fn backend(&self) -> &Arc<dyn EngineBase> {
        &self.backend
    }

    pub fn pool(&self) -> &MemoryPool {
        &self.pool
    }

    pub fn pool_acquire(&self, bytes: usize) -> Result<DeviceBuffer> {
        self.pool.acquire(bytes)
    }

    pub fn pool_release(&self, buf: &DeviceBuffer) -> Result<()> {
        self.pool.release(buf)
    }

    pub fn pool_stats(&self) -> PoolStats {
        self.pool.stats()
    }

    pub fn pool_trim(&self) -> Result<usize> {
        self.pool.trim()
    }

    /// Upload through the staging cache (chunked, stream-ordered).
    pub fn staged_upload(
        &self,
        data: &[u8],
        dst: &DeviceBuffer,
        stream: &StreamQueue,
    ) -> Result<CompletionEvent> {
        self.staging.upload(self.backend.as_ref(), data, dst, stream)
    }

    pub fn enqueue(&self, op: KernelOp, stream: &StreamQueue) -> Result<CompletionEvent> {
        self.backend.enqueue(op, stream)
    }

    pub fn read_to_host(
        &self,
        src: &DeviceBuffer,
        offset: usize,
        len: usize,
        stream: &StreamQueue,
    ) -> Result<Vec<u8>> {
        self.backend.read_to_host(src, offset, len, stream)
    }

    pub fn create_stream(&self) -> Result<StreamQueue> {
        self.backend.create_stream()
    }
}
