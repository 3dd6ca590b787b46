//! Parameter validation for operator calls (the `check` regime).
//!
//! Each check names the operator, the offending argument and the violated
//! constraint. The engine skips these when `check` is off; kernels still
//! bounds-check their buffers either way.

use crate::backend::ConvDescriptor;
use crate::error::{Error, Result};

pub fn check_positive(op: &str, name: &str, value: usize) -> Result<()> {
    if value == 0 {
        return Err(Error::Argument(format!(
            "{op}: argument `{name}` must be positive"
        )));
    }
    Ok(())
}

pub fn check_rank(op: &str, name: &str, shape: &[usize], ranks: &[usize]) -> Result<()> {
    if !ranks.contains(&shape.len()) {
        return Err(Error::Shape(format!(
            "{op}: `{name}` has rank {}, expected one of {ranks:?}",
            shape.len()
        )));
    }
    Ok(())
}

pub fn check_same_shape(op: &str, a_name: &str, a: &[usize], b_name: &str, b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "{op}: `{a_name}` shape {a:?} differs from `{b_name}` shape {b:?}"
        )));
    }
    Ok(())
}

/// Validate a convolution call on NHWC input; returns (oh, ow).
pub fn check_conv(op: &str, x_shape: &[usize], desc: &ConvDescriptor) -> Result<(usize, usize)> {
    check_rank(op, "x", x_shape, &[4])?;
    check_positive(op, "kernel_h", desc.kernel_h)?;
    check_positive(op, "kernel_w", desc.kernel_w)?;
    check_positive(op, "stride_h", desc.stride_h)?;
    check_positive(op, "stride_w", desc.stride_w)?;
    check_positive(op, "in_channels", desc.in_channels)?;
    check_positive(op, "out_channels", desc.out_channels)?;
    if x_shape[3] != desc.in_channels {
        return Err(Error::Shape(format!(
            "{op}: x has {} channels, descriptor expects in_channels={}",
            x_shape[3], desc.in_channels
        )));
    }
    if desc.pad_h >= desc.kernel_h || desc.pad_w >= desc.kernel_w {
        return Err(Error::Argument(format!(
            "{op}: padding ({}, {}) must be smaller than the kernel ({}, {})",
            desc.pad_h, desc.pad_w, desc.kernel_h, desc.kernel_w
        )));
    }
    desc.out_hw(x_shape[1], x_shape[2])
}

/// Validate a matrix product; returns (m, k, n) of the logical product.
pub fn check_gemm(
    op: &str,
    a_shape: &[usize],
    b_shape: &[usize],
    transpose_a: bool,
    transpose_b: bool,
) -> Result<(usize, usize, usize)> {
    check_rank(op, "a", a_shape, &[2])?;
    check_rank(op, "b", b_shape, &[2])?;
    let (m, ka) = if transpose_a {
        (a_shape[1], a_shape[0])
    } else {
        (a_shape[0], a_shape[1])
    };
    let (kb, n) = if transpose_b {
        (b_shape[1], b_shape[0])
    } else {
        (b_shape[0], b_shape[1])
    };
    if ka != kb {
        return Err(Error::Shape(format!(
            "{op}: inner dimensions disagree ({ka} vs {kb}) for a {a_shape:?} (t={transpose_a}) and b {b_shape:?} (t={transpose_b})"
        )));
    }
    Ok((m, ka, n))
}

/// Validate per-channel normalization arguments; returns the row count.
pub fn check_norm(op: &str, x_shape: &[usize], channels: usize) -> Result<usize> {
    check_rank(op, "x", x_shape, &[2, 4])?;
    let last = *x_shape.last().unwrap();
    if last != channels {
        return Err(Error::Shape(format!(
            "{op}: x has {last} channels, layer expects {channels}"
        )));
    }
    Ok(x_shape[..x_shape.len() - 1].iter().product())
}

/// Validate pooling windows; returns (oh, ow).
pub fn check_pool(
    op: &str,
    x_shape: &[usize],
    window: (usize, usize),
    stride: (usize, usize),
    pad: usize,
) -> Result<(usize, usize)> {
    check_rank(op, "x", x_shape, &[4])?;
    check_positive(op, "window_h", window.0)?;
    check_positive(op, "window_w", window.1)?;
    check_positive(op, "stride_h", stride.0)?;
    check_positive(op, "stride_w", stride.1)?;
    if pad >= window.0 || pad >= window.1 {
        return Err(Error::Argument(format!(
            "{op}: padding {pad} must be smaller than the window {window:?}"
        )));
    }
    let oh = ConvDescriptor::out_extent(x_shape[1], window.0, stride.0, pad)?;
    let ow = ConvDescriptor::out_extent(x_shape[2], window.1, stride.1, pad)?;
    Ok((oh, ow))
}

pub fn check_adaptive_pool(op: &str, x_shape: &[usize], target: usize) -> Result<()> {
    check_rank(op, "x", x_shape, &[4])?;
    check_positive(op, "target", target)?;
    if target > x_shape[1] || target > x_shape[2] {
        return Err(Error::Shape(format!(
            "{op}: adaptive target {target} exceeds input extent {}x{}",
            x_shape[1], x_shape[2]
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_channel_mismatch_is_named() {
        let desc = ConvDescriptor::square(3, 64, 3, 1, 1);
        let err = check_conv("conv2d_forward", &[8, 32, 32, 4], &desc).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv2d_forward"), "{msg}");
        assert!(msg.contains("channels"), "{msg}");
    }

    #[test]
    fn conv_zero_stride_is_positivity_error() {
        let mut desc = ConvDescriptor::square(3, 64, 3, 1, 1);
        desc.stride_h = 0;
        let err = check_conv("conv2d_forward", &[8, 32, 32, 3], &desc).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
        assert!(err.to_string().contains("stride_h"));
    }

    #[test]
    fn reference_conv_signature_passes() {
        // 3 -> 64 channels, k3 s1 p1 on [N, 32, 32, 3]
        let desc = ConvDescriptor::square(3, 64, 3, 1, 1);
        let (oh, ow) = check_conv("conv2d_forward", &[512, 32, 32, 3], &desc).unwrap();
        assert_eq!((oh, ow), (32, 32));
    }

    #[test]
    fn gemm_inner_dimension_check() {
        assert!(check_gemm("gemm", &[2, 3], &[3, 4], false, false).is_ok());
        assert!(check_gemm("gemm", &[2, 3], &[4, 4], false, false).is_err());
        // transpose_a: a stored [k, m]
        assert_eq!(
            check_gemm("gemm", &[3, 2], &[3, 4], true, false).unwrap(),
            (2, 3, 4)
        );
    }

    #[test]
    fn norm_rank_and_channel_checks() {
        assert_eq!(check_norm("batchnorm_forward", &[4, 2, 2, 3], 3).unwrap(), 16);
        assert!(check_norm("batchnorm_forward", &[4, 3], 4).is_err());
        assert!(check_norm("batchnorm_forward", &[4], 4).is_err());
    }
}
