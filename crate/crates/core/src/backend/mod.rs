//! Device abstraction layer.
//!
//! [`EngineBase`] defines the abstract primitive set every device backend
//! must provide: buffer allocation, stream-ordered copies and kernel
//! submission. Buffers are opaque handles; streams are FIFO queues with no
//! implicit cross-stream ordering; completion events are the only
//! synchronization primitive. [`cpu::CpuEngineBase`] is the reference
//! implementation.

pub mod cpu;
mod event;
mod kernels;
mod ops;

pub use event::{CompletionEvent, EventState};
pub use ops::{BinaryOp, ConvAlgorithm, ConvShape, KernelOp, NormShape, PoolShape, UnaryOp};

use crate::error::{Error, Result};
use std::sync::mpsc::Sender;

/// Static description of a backend implementation.
#[derive(Debug, Clone)]
pub struct BackendDescriptor {
    pub name: String,
    /// Minimum buffer alignment in bytes. Power of two, at least 16
    /// (one 128-bit access unit).
    pub alignment_bytes: usize,
    pub max_streams: usize,
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.alignment_bytes < 16 || !self.alignment_bytes.is_power_of_two() {
            return Err(Error::Argument(format!(
                "backend descriptor: alignment_bytes must be a power of two >= 16, got {}",
                self.alignment_bytes
            )));
        }
        if self.max_streams == 0 {
            return Err(Error::Argument(
                "backend descriptor: max_streams must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Opaque handle to one device allocation.
///
/// The handle is unique among live buffers; capacity is always a multiple
/// of the backend alignment. A freed handle is never valid again.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DeviceBuffer {
    pub handle: u64,
    pub capacity_bytes: usize,
    pub device_id: u32,
}

/// Handle to a FIFO operation queue.
///
/// Operations submitted to one stream complete in submission order.
/// Distinct streams have no implicit ordering; callers must not enqueue a
/// reader of a buffer whose writer on a different stream has not been
/// awaited or chained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamQueue {
    pub stream_id: u64,
}

/// Convolution operator descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDescriptor {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub algorithm: ConvAlgorithm,
}

impl ConvDescriptor {
    /// Square-kernel constructor matching the layer facade's argument order.
    pub fn square(in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvDescriptor {
            in_channels: in_c,
            out_channels: out_c,
            kernel_h: kernel,
            kernel_w: kernel,
            stride_h: stride,
            stride_w: stride,
            pad_h: pad,
            pad_w: pad,
            algorithm: ConvAlgorithm::Auto,
        }
    }

    /// Output extent for one spatial axis: (in + 2*pad - kernel)/stride + 1.
    /// Errors unless the formula yields a positive integer.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Argument(format!(
                "conv: kernel and stride must be positive, got kernel={kernel} stride={stride}"
            )));
        }
        let padded = input + 2 * pad;
        if padded < kernel {
            return Err(Error::Shape(format!(
                "conv: kernel {kernel} exceeds padded input extent {padded}"
            )));
        }
        let span = padded - kernel;
        if span % stride != 0 {
            return Err(Error::Shape(format!(
                "conv: (in + 2*pad - kernel) = {span} is not divisible by stride {stride}"
            )));
        }
        Ok(span / stride + 1)
    }

    pub fn out_hw(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        let oh = Self::out_extent(in_h, self.kernel_h, self.stride_h, self.pad_h)?;
        let ow = Self::out_extent(in_w, self.kernel_w, self.stride_w, self.pad_w)?;
        Ok((oh, ow))
    }
}

/// The abstract device primitive set (the framework's layer 2).
///
/// Implementations execute kernels against opaque buffers, honoring FIFO
/// order per stream. All entry points may be called from multiple control
/// threads; internal state is synchronized by the implementation.
pub trait EngineBase: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    /// Allocate a zero-initialized buffer of at least `bytes` capacity,
    /// rounded up to the backend alignment.
    fn alloc(&self, bytes: usize) -> Result<DeviceBuffer>;

    /// Release a live buffer. Freeing twice is an invalid-handle error.
    fn free(&self, buf: &DeviceBuffer) -> Result<()>;

    fn create_stream(&self) -> Result<StreamQueue>;

    fn destroy_stream(&self, stream: &StreamQueue) -> Result<()>;

    /// Submit a kernel to a stream. Returns immediately; the kernel runs
    /// after every earlier operation on the same stream.
    fn enqueue(&self, op: KernelOp, stream: &StreamQueue) -> Result<CompletionEvent>;

    /// Stream-ordered device-to-device copy of `bytes` bytes.
    fn copy(
        &self,
        src: &DeviceBuffer,
        dst: &DeviceBuffer,
        bytes: usize,
        stream: &StreamQueue,
    ) -> Result<CompletionEvent>;

    /// Stream-ordered upload. The task owns `data`; when `reclaim` is given
    /// the spent vector is handed back through it after the copy completes,
    /// so staging slots can be recycled.
    fn write_from_host(
        &self,
        data: Vec<u8>,
        dst: &DeviceBuffer,
        dst_offset: usize,
        reclaim: Option<Sender<Vec<u8>>>,
        stream: &StreamQueue,
    ) -> Result<CompletionEvent>;

    /// Stream-ordered download: waits for every earlier operation on the
    /// stream, then returns the requested bytes.
    fn read_to_host(
        &self,
        src: &DeviceBuffer,
        offset: usize,
        len: usize,
        stream: &StreamQueue,
    ) -> Result<Vec<u8>>;

    /// Immediately zero a quiescent buffer (no pending operations may
    /// reference it). Used by the memory pool at hand-off.
    fn zero_now(&self, buf: &DeviceBuffer) -> Result<()>;

    /// Number of currently live allocations.
    fn live_buffers(&self) -> usize;

    /// Total allocations performed since construction.
    fn alloc_count(&self) -> u64;

    /// Total frees performed since construction.
    fn free_count(&self) -> u64;
}
