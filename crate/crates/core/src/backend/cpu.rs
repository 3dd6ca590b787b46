//! Reference CPU implementation of the abstract primitive set.
//!
//! Buffers are word-aligned host vectors behind per-buffer reader/writer
//! locks; each stream is a worker thread draining a FIFO channel. A kernel
//! task locks every operand in ascending handle order (writers exclusive),
//! so concurrent streams never deadlock and never observe torn data.

use super::event::CompletionEvent;
use super::kernels;
use super::ops::{KernelOp, UnaryOp};
use super::{BackendDescriptor, DeviceBuffer, EngineBase, StreamQueue};
use crate::error::{Error, Result};
use parking_lot::lock_api::{ArcRwLockReadGuard, ArcRwLockWriteGuard};
use parking_lot::{Mutex, RawRwLock, RwLock};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;

const ALIGNMENT: usize = 16;

type BufData = Arc<RwLock<Vec<u32>>>;
type ReadGuard = ArcRwLockReadGuard<RawRwLock, Vec<u32>>;
type WriteGuard = ArcRwLockWriteGuard<RawRwLock, Vec<u32>>;

// Buffer storage is Vec<u32> so four-byte views are always aligned.
// The reinterpreting casts below are sound: f32 and u32 share size and
// alignment, and every u32 bit pattern is a valid f32/u8 value.
fn as_f32(words: &[u32]) -> &[f32] {
    unsafe { std::slice::from_raw_parts(words.as_ptr() as *const f32, words.len()) }
}

fn as_f32_mut(words: &mut [u32]) -> &mut [f32] {
    unsafe { std::slice::from_raw_parts_mut(words.as_mut_ptr() as *mut f32, words.len()) }
}

fn as_u8(words: &[u32]) -> &[u8] {
    unsafe { std::slice::from_raw_parts(words.as_ptr() as *const u8, words.len() * 4) }
}

fn as_u8_mut(words: &mut [u32]) -> &mut [u8] {
    unsafe { std::slice::from_raw_parts_mut(words.as_mut_ptr() as *mut u8, words.len() * 4) }
}

enum Task {
    Kernel(KernelOp, CompletionEvent),
    Copy {
        src: DeviceBuffer,
        dst: DeviceBuffer,
        bytes: usize,
        event: CompletionEvent,
    },
    Write {
        data: Vec<u8>,
        dst: DeviceBuffer,
        offset: usize,
        reclaim: Option<Sender<Vec<u8>>>,
        event: CompletionEvent,
    },
    Read {
        src: DeviceBuffer,
        offset: usize,
        len: usize,
        out: Sender<Result<Vec<u8>>>,
    },
}

struct Inner {
    registry: Mutex<HashMap<u64, BufData>>,
    next_handle: AtomicU64,
    next_stream: AtomicU64,
    allocs: AtomicU64,
    frees: AtomicU64,
}

impl Inner {
    fn resolve(&self, buf: &DeviceBuffer) -> Result<BufData> {
        self.registry
            .lock()
            .get(&buf.handle)
            .cloned()
            .ok_or_else(|| {
                Error::InvalidHandle(format!("buffer handle {} is not live", buf.handle))
            })
    }
}

/// Sorted lock set of one kernel execution. Reads and writes live in
/// separate fields so read views and write views can be borrowed together.
struct Locked {
    reads: HashMap<u64, ReadGuard>,
    writes: HashMap<u64, WriteGuard>,
}

impl Locked {
    fn acquire(inner: &Inner, op: &KernelOp) -> Result<Locked> {
        let (reads, writes) = op.buffers();
        let mut plan: HashMap<u64, (DeviceBuffer, bool)> = HashMap::new();
        for b in reads {
            plan.entry(b.handle).or_insert((b, false));
        }
        for b in writes {
            plan.insert(b.handle, (b, true)); // write classification wins
        }
        // Ascending handle order prevents lock cycles across streams.
        let mut order: Vec<u64> = plan.keys().copied().collect();
        order.sort_unstable();
        let mut locked = Locked {
            reads: HashMap::new(),
            writes: HashMap::new(),
        };
        for h in order {
            let (buf, write) = plan[&h];
            let data = inner.resolve(&buf)?;
            if write {
                locked.writes.insert(h, data.write_arc());
            } else {
                locked.reads.insert(h, data.read_arc());
            }
        }
        Ok(locked)
    }
}

fn read_view<'a>(reads: &'a HashMap<u64, ReadGuard>, buf: &DeviceBuffer) -> Result<&'a [u32]> {
    reads.get(&buf.handle).map(|g| &g[..]).ok_or_else(|| {
        Error::InvalidHandle(format!("buffer {} was not locked for reading", buf.handle))
    })
}

/// Distinct mutable views of N written buffers at once.
fn write_views<'a, const N: usize>(
    writes: &'a mut HashMap<u64, WriteGuard>,
    bufs: [&DeviceBuffer; N],
) -> Result<[&'a mut Vec<u32>; N]> {
    let keys: [u64; N] = bufs.map(|b| b.handle);
    for i in 0..N {
        for j in i + 1..N {
            if keys[i] == keys[j] {
                return Err(Error::InvalidHandle(format!(
                    "kernel lists buffer {} as two distinct outputs",
                    keys[i]
                )));
            }
        }
    }
    let got = writes.get_disjoint_mut(keys.each_ref());
    let mut out: Vec<&'a mut Vec<u32>> = Vec::with_capacity(N);
    for (i, g) in got.into_iter().enumerate() {
        match g {
            Some(g) => out.push(&mut **g),
            None => {
                return Err(Error::InvalidHandle(format!(
                    "buffer {} was not locked for writing",
                    keys[i]
                )))
            }
        }
    }
    out.try_into()
        .map_err(|_| Error::InvalidHandle("lock view arity mismatch".into()))
}

fn execute(inner: &Inner, op: &KernelOp) -> Result<()> {
    let mut l = Locked::acquire(inner, op)?;
    let reads = &l.reads;
    let writes = &mut l.writes;
    match op {
        KernelOp::Gemm {
            a,
            b,
            c,
            m,
            k,
            n,
            lda,
            ldb,
            ldc,
            transpose_a,
            transpose_b,
            bias,
        } => {
            let bias_view = match bias {
                Some(bb) => Some(as_f32(read_view(reads, bb)?)),
                None => None,
            };
            let av = as_f32(read_view(reads, a)?);
            let bv = as_f32(read_view(reads, b)?);
            let [cv] = write_views(writes, [c])?;
            kernels::gemm(
                av,
                bv,
                as_f32_mut(cv),
                *m,
                *k,
                *n,
                *lda,
                *ldb,
                *ldc,
                *transpose_a,
                *transpose_b,
                bias_view,
            )
        }
        KernelOp::Conv2dForward {
            x,
            w,
            y,
            bias,
            shape,
            algorithm,
            small_feature_threshold,
        } => {
            let bias_view = match bias {
                Some(bb) => Some(as_f32(read_view(reads, bb)?)),
                None => None,
            };
            let xv = as_f32(read_view(reads, x)?);
            let wv = as_f32(read_view(reads, w)?);
            let [yv] = write_views(writes, [y])?;
            kernels::conv2d_forward(
                xv,
                wv,
                as_f32_mut(yv),
                bias_view,
                shape,
                *algorithm,
                *small_feature_threshold,
            )
        }
        KernelOp::Conv2dBackwardData { dy, w, dx, shape } => {
            let dyv = as_f32(read_view(reads, dy)?);
            let wv = as_f32(read_view(reads, w)?);
            let [dxv] = write_views(writes, [dx])?;
            kernels::conv2d_backward_data(dyv, wv, as_f32_mut(dxv), shape)
        }
        KernelOp::Conv2dBackwardFilter { x, dy, dw, shape } => {
            let xv = as_f32(read_view(reads, x)?);
            let dyv = as_f32(read_view(reads, dy)?);
            let [dwv] = write_views(writes, [dw])?;
            kernels::conv2d_backward_filter(xv, dyv, as_f32_mut(dwv), shape)
        }
        KernelOp::BatchNormForward {
            x,
            gamma,
            beta,
            running_mean,
            running_var,
            y,
            saved_mean,
            saved_inv_std,
            shape,
            training,
            eps,
            momentum,
        } => {
            let gv = match gamma {
                Some(g) => Some(as_f32(read_view(reads, g)?).to_vec()),
                None => None,
            };
            let bv = match beta {
                Some(b) => Some(as_f32(read_view(reads, b)?).to_vec()),
                None => None,
            };
            // In-place normalization shares the x and y handles; snapshot
            // the input before the write views alias it.
            let xv: Vec<f32> = if x.handle == y.handle {
                let [yv] = write_views(writes, [y])?;
                as_f32(yv).to_vec()
            } else {
                as_f32(read_view(reads, x)?).to_vec()
            };
            if *training {
                let [yv, rm, rv, sm, si] = write_views(
                    writes,
                    [y, running_mean, running_var, saved_mean, saved_inv_std],
                )?;
                kernels::batchnorm_forward(
                    &xv,
                    gv.as_deref(),
                    bv.as_deref(),
                    as_f32_mut(rm),
                    as_f32_mut(rv),
                    as_f32_mut(yv),
                    as_f32_mut(sm),
                    as_f32_mut(si),
                    shape,
                    true,
                    *eps,
                    *momentum,
                )
            } else {
                // Inference reads the running statistics without mutating them.
                let mut rm = as_f32(read_view(reads, running_mean)?).to_vec();
                let mut rv = as_f32(read_view(reads, running_var)?).to_vec();
                let [yv, sm, si] = write_views(writes, [y, saved_mean, saved_inv_std])?;
                kernels::batchnorm_forward(
                    &xv,
                    gv.as_deref(),
                    bv.as_deref(),
                    &mut rm,
                    &mut rv,
                    as_f32_mut(yv),
                    as_f32_mut(sm),
                    as_f32_mut(si),
                    shape,
                    false,
                    *eps,
                    *momentum,
                )
            }
        }
        KernelOp::BatchNormBackward {
            dy,
            x,
            gamma,
            saved_mean,
            saved_inv_std,
            dx,
            dgamma,
            dbeta,
            shape,
            x_is_normalized,
        } => {
            let gv = match gamma {
                Some(g) => Some(as_f32(read_view(reads, g)?)),
                None => None,
            };
            let dyv = as_f32(read_view(reads, dy)?);
            let smv = as_f32(read_view(reads, saved_mean)?);
            let siv = as_f32(read_view(reads, saved_inv_std)?);
            let xv = as_f32(read_view(reads, x)?);
            match (dgamma, dbeta) {
                (Some(dg), Some(db)) => {
                    let [dxv, dgv, dbv] = write_views(writes, [dx, dg, db])?;
                    kernels::batchnorm_backward(
                        dyv,
                        xv,
                        gv,
                        smv,
                        siv,
                        as_f32_mut(dxv),
                        Some(as_f32_mut(dgv)),
                        Some(as_f32_mut(dbv)),
                        shape,
                        *x_is_normalized,
                    )
                }
                _ => {
                    let [dxv] = write_views(writes, [dx])?;
                    kernels::batchnorm_backward(
                        dyv,
                        xv,
                        gv,
                        smv,
                        siv,
                        as_f32_mut(dxv),
                        None,
                        None,
                        shape,
                        *x_is_normalized,
                    )
                }
            }
        }
        KernelOp::MaxPool2dForward { x, y, argmax, shape } => {
            let xv = as_f32(read_view(reads, x)?);
            let [yv, amv] = write_views(writes, [y, argmax])?;
            kernels::maxpool2d_forward(xv, as_f32_mut(yv), amv, shape)
        }
        KernelOp::MaxPool2dBackward { dy, argmax, dx, shape } => {
            let dyv = as_f32(read_view(reads, dy)?);
            let amv = &read_view(reads, argmax)?[..];
            let [dxv] = write_views(writes, [dx])?;
            kernels::maxpool2d_backward(dyv, amv, as_f32_mut(dxv), shape)
        }
        KernelOp::Unary {
            op: code,
            x,
            aux,
            y,
            rows,
            last,
            last_phys,
        } => {
            let auxv = match aux {
                Some(a) => Some(as_f32(read_view(reads, a)?)),
                None => None,
            };
            if *code == UnaryOp::Pix2Float {
                let xv = read_view(reads, x)?;
                let [yv] = write_views(writes, [y])?;
                return kernels::pix2float(as_u8(xv), as_f32_mut(yv), *rows, *last, *last_phys);
            }
            let xv = if x.handle == y.handle {
                None
            } else {
                Some(as_f32(read_view(reads, x)?))
            };
            let [yv] = write_views(writes, [y])?;
            kernels::unary(*code, xv, auxv, as_f32_mut(yv), *rows, *last, *last_phys)
        }
        KernelOp::Binary {
            op: code,
            x1,
            x2,
            y,
            rows,
            last,
            last_phys,
        } => {
            if x2.handle == y.handle && x1.handle != y.handle {
                return Err(Error::Argument(
                    "elementwise_binary: in-place is supported on the first operand only".into(),
                ));
            }
            let x2v = as_f32(read_view(reads, x2)?);
            let x1v = if x1.handle == y.handle {
                None
            } else {
                Some(as_f32(read_view(reads, x1)?))
            };
            let [yv] = write_views(writes, [y])?;
            kernels::binary(*code, x1v, x2v, as_f32_mut(yv), *rows, *last, *last_phys)
        }
        KernelOp::ReduceFieldSum { x, out, shape } => {
            let xv = as_f32(read_view(reads, x)?);
            let [ov] = write_views(writes, [out])?;
            kernels::reduce_field_sum(xv, as_f32_mut(ov), shape)
        }
        KernelOp::SoftmaxCrossEntropy {
            logits,
            onehot,
            loss,
            dlogits,
            shape,
            check_labels,
        } => {
            let zv = as_f32(read_view(reads, logits)?);
            let yv = as_f32(read_view(reads, onehot)?);
            let [lv, dv] = write_views(writes, [loss, dlogits])?;
            kernels::softmax_crossentropy(
                zv,
                yv,
                as_f32_mut(lv),
                as_f32_mut(dv),
                shape,
                *check_labels,
            )
        }
        KernelOp::AdamStep {
            param,
            grad,
            m,
            v,
            len_phys,
            step,
            lr,
            beta1,
            beta2,
            eps,
        } => {
            let gv = as_f32(read_view(reads, grad)?);
            let [pv, mv, vv] = write_views(writes, [param, m, v])?;
            kernels::adam_step(
                as_f32_mut(pv),
                gv,
                as_f32_mut(mv),
                as_f32_mut(vv),
                *len_phys,
                *step,
                *lr,
                *beta1,
                *beta2,
                *eps,
            )
        }
        KernelOp::SgdStep {
            param,
            grad,
            len_phys,
            lr,
        } => {
            let gv = as_f32(read_view(reads, grad)?);
            let [pv] = write_views(writes, [param])?;
            kernels::sgd_step(as_f32_mut(pv), gv, *len_phys, *lr)
        }
        KernelOp::UniformFill {
            buf,
            low,
            high,
            seed,
            rows,
            last,
            last_phys,
        } => {
            let [bv] = write_views(writes, [buf])?;
            kernels::uniform_fill(as_f32_mut(bv), *low, *high, *seed, *rows, *last, *last_phys)
        }
        KernelOp::FillZero { buf, len_phys } => {
            let [bv] = write_views(writes, [buf])?;
            kernels::fill_zero(as_f32_mut(bv), *len_phys)
        }
        KernelOp::Repack {
            x,
            y,
            x_rows,
            x_last,
            x_last_phys,
            y_rows,
            y_last,
            y_last_phys,
        } => {
            let xv = as_f32(read_view(reads, x)?);
            let [yv] = write_views(writes, [y])?;
            kernels::repack(
                xv,
                as_f32_mut(yv),
                *x_rows,
                *x_last,
                *x_last_phys,
                *y_rows,
                *y_last,
                *y_last_phys,
            )
        }
    }
}

fn run_task(inner: &Inner, task: Task) {
    match task {
        Task::Kernel(op, event) => {
            let result = execute(inner, &op);
            event.complete(result.map_err(|e| match e {
                Error::Shape(m) => Error::Shape(format!("{}: {m}", op.name())),
                other => other,
            }));
        }
        Task::Copy {
            src,
            dst,
            bytes,
            event,
        } => {
            let result = (|| -> Result<()> {
                if src.handle == dst.handle {
                    return Ok(());
                }
                let sd = inner.resolve(&src)?;
                let dd = inner.resolve(&dst)?;
                // Lock in handle order.
                if src.handle < dst.handle {
                    let sg = sd.read_arc();
                    let mut dg = dd.write_arc();
                    as_u8_mut(&mut dg)[..bytes].copy_from_slice(&as_u8(&sg)[..bytes]);
                } else {
                    let mut dg = dd.write_arc();
                    let sg = sd.read_arc();
                    as_u8_mut(&mut dg)[..bytes].copy_from_slice(&as_u8(&sg)[..bytes]);
                }
                Ok(())
            })();
            event.complete(result);
        }
        Task::Write {
            data,
            dst,
            offset,
            reclaim,
            event,
        } => {
            let result = (|| -> Result<()> {
                let dd = inner.resolve(&dst)?;
                let mut dg = dd.write_arc();
                as_u8_mut(&mut dg)[offset..offset + data.len()].copy_from_slice(&data);
                Ok(())
            })();
            if let Some(tx) = reclaim {
                let _ = tx.send(data);
            }
            event.complete(result);
        }
        Task::Read {
            src,
            offset,
            len,
            out,
        } => {
            let result = (|| -> Result<Vec<u8>> {
                let sd = inner.resolve(&src)?;
                let sg = sd.read_arc();
                Ok(as_u8(&sg)[offset..offset + len].to_vec())
            })();
            let _ = out.send(result);
        }
    }
}

/// The reference CPU backend.
pub struct CpuEngineBase {
    inner: Arc<Inner>,
    streams: Mutex<HashMap<u64, Sender<Task>>>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl Default for CpuEngineBase {
    fn default() -> Self {
        Self::new()
    }
}

impl CpuEngineBase {
    pub fn new() -> Self {
        CpuEngineBase {
            inner: Arc::new(Inner {
                registry: Mutex::new(HashMap::new()),
                next_handle: AtomicU64::new(1),
                next_stream: AtomicU64::new(1),
                allocs: AtomicU64::new(0),
                frees: AtomicU64::new(0),
            }),
            streams: Mutex::new(HashMap::new()),
            workers: Mutex::new(Vec::new()),
        }
    }

    fn sender(&self, stream: &StreamQueue) -> Result<Sender<Task>> {
        self.streams
            .lock()
            .get(&stream.stream_id)
            .cloned()
            .ok_or_else(|| {
                Error::InvalidHandle(format!("stream {} is not live", stream.stream_id))
            })
    }

    fn check_span(buf: &DeviceBuffer, offset: usize, len: usize, role: &str) -> Result<()> {
        if offset + len > buf.capacity_bytes {
            return Err(Error::Shape(format!(
                "copy: {role} span {}..{} exceeds capacity {}",
                offset,
                offset + len,
                buf.capacity_bytes
            )));
        }
        Ok(())
    }
}

impl EngineBase for CpuEngineBase {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: "cpu-f32".into(),
            alignment_bytes: ALIGNMENT,
            max_streams: 64,
        }
    }

    fn alloc(&self, bytes: usize) -> Result<DeviceBuffer> {
        let capacity = bytes.div_ceil(ALIGNMENT) * ALIGNMENT;
        let words = capacity / 4;
        let mut data = Vec::new();
        data.try_reserve_exact(words).map_err(|_| {
            Error::AllocationFailure(format!("host refused {capacity} byte allocation"))
        })?;
        data.resize(words, 0u32);
        let handle = self.inner.next_handle.fetch_add(1, Ordering::Relaxed);
        self.inner
            .registry
            .lock()
            .insert(handle, Arc::new(RwLock::new(data)));
        self.inner.allocs.fetch_add(1, Ordering::Relaxed);
        Ok(DeviceBuffer {
            handle,
            capacity_bytes: capacity,
            device_id: 0,
        })
    }

    fn free(&self, buf: &DeviceBuffer) -> Result<()> {
        match self.inner.registry.lock().remove(&buf.handle) {
            Some(_) => {
                self.inner.frees.fetch_add(1, Ordering::Relaxed);
                Ok(())
            }
            None => Err(Error::InvalidHandle(format!(
                "free of dead buffer handle {}",
                buf.handle
            ))),
        }
    }

    fn create_stream(&self) -> Result<StreamQueue> {
        let id = self.inner.next_stream.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel::<Task>();
        let inner = Arc::clone(&self.inner);
        let worker = std::thread::Builder::new()
            .name(format!("tf-stream-{id}"))
            .spawn(move || {
                while let Ok(task) = rx.recv() {
                    run_task(&inner, task);
                }
            })
            .map_err(|e| Error::AllocationFailure(format!("stream worker spawn: {e}")))?;
        self.streams.lock().insert(id, tx);
        self.workers.lock().push(worker);
        Ok(StreamQueue { stream_id: id })
    }

    fn destroy_stream(&self, stream: &StreamQueue) -> Result<()> {
        match self.streams.lock().remove(&stream.stream_id) {
            Some(_) => Ok(()),
            None => Err(Error::InvalidHandle(format!(
                "destroy of dead stream {}",
                stream.stream_id
            ))),
        }
    }

    fn enqueue(&self, op: KernelOp, stream: &StreamQueue) -> Result<CompletionEvent> {
        let tx = self.sender(stream)?;
        let event = CompletionEvent::pending();
        tx.send(Task::Kernel(op, event.clone()))
            .map_err(|_| Error::InvalidHandle("stream worker is gone".into()))?;
        Ok(event)
    }

    fn copy(
        &self,
        src: &DeviceBuffer,
        dst: &DeviceBuffer,
        bytes: usize,
        stream: &StreamQueue,
    ) -> Result<CompletionEvent> {
        Self::check_span(src, 0, bytes, "source")?;
        Self::check_span(dst, 0, bytes, "destination")?;
        if bytes == 0 {
            return Ok(CompletionEvent::done());
        }
        let tx = self.sender(stream)?;
        let event = CompletionEvent::pending();
        tx.send(Task::Copy {
            src: *src,
            dst: *dst,
            bytes,
            event: event.clone(),
        })
        .map_err(|_| Error::InvalidHandle("stream worker is gone".into()))?;
        Ok(event)
    }

    fn write_from_host(
        &self,
        data: Vec<u8>,
        dst: &DeviceBuffer,
        dst_offset: usize,
        reclaim: Option<Sender<Vec<u8>>>,
        stream: &StreamQueue,
    ) -> Result<CompletionEvent> {
        Self::check_span(dst, dst_offset, data.len(), "destination")?;
        if data.is_empty() {
            if let Some(tx) = reclaim {
                let _ = tx.send(data);
            }
            return Ok(CompletionEvent::done());
        }
        let tx = self.sender(stream)?;
        let event = CompletionEvent::pending();
        tx.send(Task::Write {
            data,
            dst: *dst,
            offset: dst_offset,
            reclaim,
            event: event.clone(),
        })
        .map_err(|_| Error::InvalidHandle("stream worker is gone".into()))?;
        Ok(event)
    }

    fn read_to_host(
        &self,
        src: &DeviceBuffer,
        offset: usize,
        len: usize,
        stream: &StreamQueue,
    ) -> Result<Vec<u8>> {
        Self::check_span(src, offset, len, "source")?;
        if len == 0 {
            return Ok(Vec::new());
        }
        let tx = self.sender(stream)?;
        let (out_tx, out_rx) = mpsc::channel();
        tx.send(Task::Read {
            src: *src,
            offset,
            len,
            out: out_tx,
        })
        .map_err(|_| Error::InvalidHandle("stream worker is gone".into()))?;
        out_rx
            .recv()
            .map_err(|_| Error::InvalidHandle("stream worker dropped a read".into()))?
    }

    fn zero_now(&self, buf: &DeviceBuffer) -> Result<()> {
        let data = self.inner.resolve(buf)?;
        data.write_arc().fill(0);
        Ok(())
    }

    fn live_buffers(&self) -> usize {
        self.inner.registry.lock().len()
    }

    fn alloc_count(&self) -> u64 {
        self.inner.allocs.load(Ordering::Relaxed)
    }

    fn free_count(&self) -> u64 {
        self.inner.frees.load(Ordering::Relaxed)
    }
}

impl Drop for CpuEngineBase {
    fn drop(&mut self) {
        self.streams.lock().clear();
        for worker in self.workers.lock().drain(..) {
            let _ = worker.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ops::BinaryOp;

    fn write_f32(eng: &CpuEngineBase, buf: &DeviceBuffer, vals: &[f32], stream: &StreamQueue) {
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        eng.write_from_host(bytes, buf, 0, None, stream)
            .unwrap()
            .wait()
            .unwrap();
    }

    fn read_f32(eng: &CpuEngineBase, buf: &DeviceBuffer, n: usize, stream: &StreamQueue) -> Vec<f32> {
        let bytes = eng.read_to_host(buf, 0, n * 4, stream).unwrap();
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    #[test]
    fn alloc_rounds_up_to_alignment() {
        let eng = CpuEngineBase::new();
        let b = eng.alloc(1000).unwrap();
        assert_eq!(b.capacity_bytes, 1008);
        let z = eng.alloc(0).unwrap();
        assert_eq!(z.capacity_bytes, 0);
        assert_ne!(b.handle, z.handle);
    }

    #[test]
    fn alloc_free_counters_return_to_baseline() {
        let eng = CpuEngineBase::new();
        let base = eng.live_buffers();
        let a = eng.alloc(64).unwrap();
        let b = eng.alloc(64).unwrap();
        eng.free(&a).unwrap();
        eng.free(&b).unwrap();
        assert_eq!(eng.live_buffers(), base);
        assert_eq!(eng.alloc_count(), 2);
        assert_eq!(eng.free_count(), 2);
    }

    #[test]
    fn double_free_is_invalid_handle() {
        let eng = CpuEngineBase::new();
        let a = eng.alloc(64).unwrap();
        eng.free(&a).unwrap();
        assert!(matches!(eng.free(&a), Err(Error::InvalidHandle(_))));
    }

    #[test]
    fn host_roundtrip_preserves_bytes() {
        let eng = CpuEngineBase::new();
        let s = eng.create_stream().unwrap();
        let buf = eng.alloc(64).unwrap();
        let data: Vec<u8> = (0..64u8).map(|i| i.wrapping_mul(37)).collect();
        eng.write_from_host(data.clone(), &buf, 0, None, &s)
            .unwrap()
            .wait()
            .unwrap();
        let back = eng.read_to_host(&buf, 0, 64, &s).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn zero_byte_copy_completes_without_touching_dst() {
        let eng = CpuEngineBase::new();
        let s = eng.create_stream().unwrap();
        let a = eng.alloc(16).unwrap();
        let b = eng.alloc(16).unwrap();
        write_f32(&eng, &b, &[1.0, 2.0, 3.0, 4.0], &s);
        let ev = eng.copy(&a, &b, 0, &s).unwrap();
        ev.wait().unwrap();
        assert_eq!(read_f32(&eng, &b, 4, &s), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn copy_beyond_capacity_is_bounds_error() {
        let eng = CpuEngineBase::new();
        let s = eng.create_stream().unwrap();
        let a = eng.alloc(16).unwrap();
        let b = eng.alloc(32).unwrap();
        assert!(matches!(
            eng.copy(&a, &b, 32, &s),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn device_copy_roundtrip() {
        let eng = CpuEngineBase::new();
        let s = eng.create_stream().unwrap();
        let a = eng.alloc(32).unwrap();
        let b = eng.alloc(32).unwrap();
        let data: Vec<u8> = (0..32u8).collect();
        eng.write_from_host(data.clone(), &a, 0, None, &s)
            .unwrap()
            .wait()
            .unwrap();
        eng.copy(&a, &b, 32, &s).unwrap().wait().unwrap();
        assert_eq!(eng.read_to_host(&b, 0, 32, &s).unwrap(), data);
    }

    #[test]
    fn fifo_second_kernel_observes_first() {
        let eng = CpuEngineBase::new();
        let s = eng.create_stream().unwrap();
        let x = eng.alloc(16).unwrap();
        let ones = eng.alloc(16).unwrap();
        write_f32(&eng, &ones, &[1.0; 4], &s);
        // k1: x += 1 (five times), no awaits in between; FIFO must order them.
        for _ in 0..5 {
            eng.enqueue(
                KernelOp::Binary {
                    op: BinaryOp::Add,
                    x1: x,
                    x2: ones,
                    y: x,
                    rows: 1,
                    last: 4,
                    last_phys: 4,
                },
                &s,
            )
            .unwrap();
        }
        assert_eq!(read_f32(&eng, &x, 4, &s), vec![5.0; 4]);
    }

    #[test]
    fn enqueue_then_await_reaches_done() {
        let eng = CpuEngineBase::new();
        let s = eng.create_stream().unwrap();
        let buf = eng.alloc(16).unwrap();
        let ev = eng
            .enqueue(KernelOp::FillZero { buf, len_phys: 4 }, &s)
            .unwrap();
        ev.wait().unwrap();
        assert_eq!(ev.state(), crate::backend::EventState::Done);
    }

    #[test]
    fn enqueue_on_destroyed_stream_fails() {
        let eng = CpuEngineBase::new();
        let s = eng.create_stream().unwrap();
        eng.destroy_stream(&s).unwrap();
        let buf = eng.alloc(16).unwrap();
        let got = eng.enqueue(KernelOp::FillZero { buf, len_phys: 4 }, &s);
        assert!(matches!(got, Err(Error::InvalidHandle(_))));
        assert!(matches!(
            eng.destroy_stream(&s),
            Err(Error::InvalidHandle(_))
        ));
    }

    #[test]
    fn failed_kernel_reports_through_event() {
        let eng = CpuEngineBase::new();
        let s = eng.create_stream().unwrap();
        let tiny = eng.alloc(8).unwrap();
        let ev = eng
            .enqueue(
                KernelOp::FillZero {
                    buf: tiny,
                    len_phys: 100,
                },
                &s,
            )
            .unwrap();
        assert!(matches!(ev.wait(), Err(Error::Shape(_))));
    }

    #[test]
    fn three_streams_with_awaits_match_serial_execution() {
        // Independent ops on three streams, awaited before a consumer:
        // same result as running everything on one stream.
        let run = |parallel: bool| -> Vec<f32> {
            let eng = CpuEngineBase::new();
            let s1 = eng.create_stream().unwrap();
            let (s2, s3) = if parallel {
                (eng.create_stream().unwrap(), eng.create_stream().unwrap())
            } else {
                (s1, s1)
            };
            let a = eng.alloc(16).unwrap();
            let b = eng.alloc(16).unwrap();
            let c = eng.alloc(16).unwrap();
            write_f32(&eng, &a, &[1.0, 2.0, 3.0, 4.0], &s1);
            write_f32(&eng, &b, &[0.5, 0.5, 0.5, 0.5], &s2);
            write_f32(&eng, &c, &[2.0, 2.0, 2.0, 2.0], &s3);
            let e1 = eng
                .enqueue(
                    KernelOp::Unary {
                        op: UnaryOp::Scale(3.0),
                        x: a,
                        aux: None,
                        y: a,
                        rows: 1,
                        last: 4,
                        last_phys: 4,
                    },
                    &s1,
                )
                .unwrap();
            let e2 = eng
                .enqueue(
                    KernelOp::Unary {
                        op: UnaryOp::SigmoidFwd,
                        x: b,
                        aux: None,
                        y: b,
                        rows: 1,
                        last: 4,
                        last_phys: 4,
                    },
                    &s2,
                )
                .unwrap();
            let e3 = eng
                .enqueue(
                    KernelOp::Unary {
                        op: UnaryOp::LeakyReluFwd(0.01),
                        x: c,
                        aux: None,
                        y: c,
                        rows: 1,
                        last: 4,
                        last_phys: 4,
                    },
                    &s3,
                )
                .unwrap();
            for e in [e1, e2, e3] {
                e.wait().unwrap();
            }
            eng.enqueue(
                KernelOp::Binary {
                    op: BinaryOp::Add,
                    x1: a,
                    x2: b,
                    y: a,
                    rows: 1,
                    last: 4,
                    last_phys: 4,
                },
                &s1,
            )
            .unwrap();
            eng.enqueue(
                KernelOp::Binary {
                    op: BinaryOp::Mul,
                    x1: a,
                    x2: c,
                    y: a,
                    rows: 1,
                    last: 4,
                    last_phys: 4,
                },
                &s1,
            )
            .unwrap();
            read_f32(&eng, &a, 4, &s1)
        };
        let async_run = run(true);
        let serial_run = run(false);
        assert_eq!(async_run, serial_run);
        // bitwise identical
        for (x, y) in async_run.iter().zip(&serial_run) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
