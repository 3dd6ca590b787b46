//! Kernel operation descriptors submitted to streams.
//!
//! Every descriptor carries buffer handles plus the logical and physical
//! extents the kernel needs. Physical row strides account for the 4x
//! last-dimension padding; kernels read and write logical lanes only and
//! leave pad lanes zero.

use super::DeviceBuffer;

/// Convolution algorithm selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvAlgorithm {
    /// Dispatch on output spatial extent: direct when oh*ow is at or below
    /// the small-feature threshold, im2col otherwise.
    Auto,
    GeneralIm2col,
    SmallFeatureDirect,
}

/// Fully resolved convolution geometry shared by forward and backward.
#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub oh: usize,
    pub ow: usize,
    /// Physical (padded) channel counts.
    pub c_in_phys: usize,
    pub c_out_phys: usize,
}

impl ConvShape {
    pub fn x_len(&self) -> usize {
        self.n * self.h * self.w * self.c_in_phys
    }
    pub fn y_len(&self) -> usize {
        self.n * self.oh * self.ow * self.c_out_phys
    }
    pub fn w_len(&self) -> usize {
        self.c_out * self.kh * self.kw * self.c_in_phys
    }
}

/// Geometry for per-channel normalization over [rows, channels].
/// 4D NHWC collapses to rows = n*h*w.
#[derive(Debug, Clone, Copy)]
pub struct NormShape {
    pub rows: usize,
    pub channels: usize,
    pub channels_phys: usize,
}

/// Max-pool geometry with explicit per-axis windows.
///
/// `h_windows[i]` / `w_windows[j]` are half-open valid input ranges for
/// output position (i, j). Regular pooling clamps `i*stride - pad ..
/// i*stride - pad + window` to the input; adaptive pooling uses the
/// floor/ceil partition rule.
#[derive(Debug, Clone)]
pub struct PoolShape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub c_phys: usize,
    pub h_windows: Vec<(usize, usize)>,
    pub w_windows: Vec<(usize, usize)>,
}

impl PoolShape {
    pub fn oh(&self) -> usize {
        self.h_windows.len()
    }
    pub fn ow(&self) -> usize {
        self.w_windows.len()
    }
}

/// Elementwise unary operator codes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    /// y = x if x > 0 else k*x
    LeakyReluFwd(f32),
    /// dx = dy * (1 if y > 0 else k); aux carries the forward output.
    LeakyReluBwd(f32),
    /// y = 1/(1 + exp(-x))
    SigmoidFwd,
    /// dx = dy * y * (1 - y); aux carries the forward output.
    SigmoidBwd,
    /// y = a * x
    Scale(f32),
    /// y = byte / 255.0 exactly; input is an int8 buffer.
    Pix2Float,
}

/// Elementwise binary operator codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

/// One kernel submission. Buffers named `out`/`y`/`dx`/... are the
/// operation's declared outputs; kernels are pure with respect to
/// everything else.
#[derive(Debug, Clone)]
pub enum KernelOp {
    /// c[m,n] = a' * b' (+ bias per column), a' = a^T if transpose_a.
    /// Leading dimensions are physical row strides in elements.
    Gemm {
        a: DeviceBuffer,
        b: DeviceBuffer,
        c: DeviceBuffer,
        m: usize,
        k: usize,
        n: usize,
        lda: usize,
        ldb: usize,
        ldc: usize,
        transpose_a: bool,
        transpose_b: bool,
        bias: Option<DeviceBuffer>,
    },
    Conv2dForward {
        x: DeviceBuffer,
        w: DeviceBuffer,
        y: DeviceBuffer,
        bias: Option<DeviceBuffer>,
        shape: ConvShape,
        algorithm: ConvAlgorithm,
        /// Auto dispatches to the direct kernel when oh*ow <= threshold.
        small_feature_threshold: usize,
    },
    Conv2dBackwardData {
        dy: DeviceBuffer,
        w: DeviceBuffer,
        dx: DeviceBuffer,
        shape: ConvShape,
    },
    Conv2dBackwardFilter {
        x: DeviceBuffer,
        dy: DeviceBuffer,
        dw: DeviceBuffer,
        shape: ConvShape,
    },
    BatchNormForward {
        x: DeviceBuffer,
        gamma: Option<DeviceBuffer>,
        beta: Option<DeviceBuffer>,
        running_mean: DeviceBuffer,
        running_var: DeviceBuffer,
        y: DeviceBuffer,
        saved_mean: DeviceBuffer,
        saved_inv_std: DeviceBuffer,
        shape: NormShape,
        training: bool,
        eps: f32,
        momentum: f32,
    },
    BatchNormBackward {
        dy: DeviceBuffer,
        /// Forward input, or the normalized output when the forward ran in
        /// place (then x_is_normalized is set).
        x: DeviceBuffer,
        gamma: Option<DeviceBuffer>,
        saved_mean: DeviceBuffer,
        saved_inv_std: DeviceBuffer,
        dx: DeviceBuffer,
        dgamma: Option<DeviceBuffer>,
        dbeta: Option<DeviceBuffer>,
        shape: NormShape,
        x_is_normalized: bool,
    },
    MaxPool2dForward {
        x: DeviceBuffer,
        y: DeviceBuffer,
        /// u32 flat logical input index of each window winner.
        argmax: DeviceBuffer,
        shape: PoolShape,
    },
    MaxPool2dBackward {
        dy: DeviceBuffer,
        argmax: DeviceBuffer,
        dx: DeviceBuffer,
        shape: PoolShape,
    },
    Unary {
        op: UnaryOp,
        x: DeviceBuffer,
        /// Forward output for the *Bwd variants.
        aux: Option<DeviceBuffer>,
        y: DeviceBuffer,
        rows: usize,
        last: usize,
        last_phys: usize,
    },
    Binary {
        op: BinaryOp,
        x1: DeviceBuffer,
        x2: DeviceBuffer,
        y: DeviceBuffer,
        rows: usize,
        last: usize,
        last_phys: usize,
    },
    /// out[c] = sum over all non-channel indices of x[..., c].
    ReduceFieldSum {
        x: DeviceBuffer,
        out: DeviceBuffer,
        shape: NormShape,
    },
    /// Numerically stable fused softmax + cross-entropy over one-hot labels.
    /// loss is a single f32 (mean over rows); dlogits = (softmax - onehot)/rows.
    SoftmaxCrossEntropy {
        logits: DeviceBuffer,
        onehot: DeviceBuffer,
        loss: DeviceBuffer,
        dlogits: DeviceBuffer,
        shape: NormShape,
        check_labels: bool,
    },
    AdamStep {
        param: DeviceBuffer,
        grad: DeviceBuffer,
        m: DeviceBuffer,
        v: DeviceBuffer,
        len_phys: usize,
        step: u64,
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
    },
    SgdStep {
        param: DeviceBuffer,
        grad: DeviceBuffer,
        len_phys: usize,
        lr: f32,
    },
    /// Fill logical lanes with uniform draws on [low, high); pads stay zero.
    UniformFill {
        buf: DeviceBuffer,
        low: f32,
        high: f32,
        seed: u64,
        rows: usize,
        last: usize,
        last_phys: usize,
    },
    /// Zero the whole physical extent (stream-ordered, unlike zero_now).
    FillZero {
        buf: DeviceBuffer,
        len_phys: usize,
    },
    /// Repack a row-major logical element stream between padded layouts.
    Repack {
        x: DeviceBuffer,
        y: DeviceBuffer,
        x_rows: usize,
        x_last: usize,
        x_last_phys: usize,
        y_rows: usize,
        y_last: usize,
        y_last_phys: usize,
    },
}

impl KernelOp {
    /// Kernel name for error messages.
    pub fn name(&self) -> &'static str {
        match self {
            KernelOp::Gemm { .. } => "gemm",
            KernelOp::Conv2dForward { .. } => "conv2d_forward",
            KernelOp::Conv2dBackwardData { .. } => "conv2d_backward_data",
            KernelOp::Conv2dBackwardFilter { .. } => "conv2d_backward_filter",
            KernelOp::BatchNormForward { .. } => "batchnorm_forward",
            KernelOp::BatchNormBackward { .. } => "batchnorm_backward",
            KernelOp::MaxPool2dForward { .. } => "maxpool2d_forward",
            KernelOp::MaxPool2dBackward { .. } => "maxpool2d_backward",
            KernelOp::Unary { .. } => "elementwise_unary",
            KernelOp::Binary { .. } => "elementwise_binary",
            KernelOp::ReduceFieldSum { .. } => "reduce_field_sum",
            KernelOp::SoftmaxCrossEntropy { .. } => "softmax_crossentropy",
            KernelOp::AdamStep { .. } => "adam_step",
            KernelOp::SgdStep { .. } => "sgd_step",
            KernelOp::UniformFill { .. } => "uniform_fill",
            KernelOp::FillZero { .. } => "fill_zero",
            KernelOp::Repack { .. } => "repack",
        }
    }

    /// Buffers the kernel reads (pure inputs) and writes (outputs).
    /// A handle listed in both is an in-place operand.
    pub fn buffers(&self) -> (Vec<DeviceBuffer>, Vec<DeviceBuffer>) {
        match self {
            KernelOp::Gemm { a, b, c, bias, .. } => {
                let mut reads = vec![*a, *b];
                if let Some(bb) = bias {
                    reads.push(*bb);
                }
                (reads, vec![*c])
            }
            KernelOp::Conv2dForward { x, w, y, bias, .. } => {
                let mut reads = vec![*x, *w];
                if let Some(bb) = bias {
                    reads.push(*bb);
                }
                (reads, vec![*y])
            }
            KernelOp::Conv2dBackwardData { dy, w, dx, .. } => (vec![*dy, *w], vec![*dx]),
            KernelOp::Conv2dBackwardFilter { x, dy, dw, .. } => (vec![*x, *dy], vec![*dw]),
            KernelOp::BatchNormForward {
                x,
                gamma,
                beta,
                running_mean,
                running_var,
                y,
                saved_mean,
                saved_inv_std,
                training,
                ..
            } => {
                let mut reads = vec![*x];
                reads.extend(gamma.iter().copied());
                reads.extend(beta.iter().copied());
                let mut writes = vec![*y, *saved_mean, *saved_inv_std];
                if *training {
                    writes.push(*running_mean);
                    writes.push(*running_var);
                } else {
                    reads.push(*running_mean);
                    reads.push(*running_var);
                }
                (reads, writes)
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
                ..
            } => {
                let mut reads = vec![*dy, *x, *saved_mean, *saved_inv_std];
                reads.extend(gamma.iter().copied());
                let mut writes = vec![*dx];
                writes.extend(dgamma.iter().copied());
                writes.extend(dbeta.iter().copied());
                (reads, writes)
            }
            KernelOp::MaxPool2dForward { x, y, argmax, .. } => (vec![*x], vec![*y, *argmax]),
            KernelOp::MaxPool2dBackward { dy, argmax, dx, .. } => (vec![*dy, *argmax], vec![*dx]),
            KernelOp::Unary { x, aux, y, .. } => {
                let mut reads = vec![*x];
                reads.extend(aux.iter().copied());
                (reads, vec![*y])
            }
            KernelOp::Binary { x1, x2, y, .. } => (vec![*x1, *x2], vec![*y]),
            KernelOp::ReduceFieldSum { x, out, .. } => (vec![*x], vec![*out]),
            KernelOp::SoftmaxCrossEntropy {
                logits,
                onehot,
                loss,
                dlogits,
                ..
            } => (vec![*logits, *onehot], vec![*loss, *dlogits]),
            KernelOp::AdamStep { param, grad, m, v, .. } => {
                (vec![*grad], vec![*param, *m, *v])
            }
            KernelOp::SgdStep { param, grad, .. } => (vec![*grad], vec![*param]),
            KernelOp::UniformFill { buf, .. } => (vec![], vec![*buf]),
            KernelOp::FillZero { buf, .. } => (vec![], vec![*buf]),
            KernelOp::Repack { x, y, .. } => (vec![*x], vec![*y]),
        }
    }
}
