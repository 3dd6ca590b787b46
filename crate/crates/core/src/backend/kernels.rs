//! Reference CPU compute kernels.
//!
//! Kernels operate on plain f32/u8 slices with explicit logical extents and
//! physical (padded) row strides. Parallel loops are structured so results
//! never depend on worker count or scheduling: every output element is
//! produced by exactly one task and every floating-point reduction runs in
//! a fixed order. That keeps fixed-seed runs bit-identical.

use super::ops::{BinaryOp, ConvAlgorithm, ConvShape, NormShape, PoolShape, UnaryOp};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use rayon::prelude::*;

fn require(kernel: &str, role: &str, got: usize, need: usize) -> Result<()> {
    if got < need {
        return Err(Error::Shape(format!(
            "{kernel}: buffer `{role}` holds {got} elements, shape requires {need}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gemm
// ---------------------------------------------------------------------------

/// c[m,n] = a' * b' + bias, where a' = a^T when transpose_a (and likewise b).
/// Leading dimensions are physical row strides of the stored matrices.
/// Pad columns of c (n..ldc) are zeroed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    m: usize,
    k: usize,
    n: usize,
    lda: usize,
    ldb: usize,
    ldc: usize,
    transpose_a: bool,
    transpose_b: bool,
    bias: Option<&[f32]>,
) -> Result<()> {
    let (a_rows, a_cols) = if transpose_a { (k, m) } else { (m, k) };
    let (b_rows, b_cols) = if transpose_b { (n, k) } else { (k, n) };
    require("gemm", "a", a.len(), a_rows.saturating_sub(1) * lda + a_cols)?;
    require("gemm", "b", b.len(), b_rows.saturating_sub(1) * ldb + b_cols)?;
    require("gemm", "c", c.len(), m.saturating_sub(1) * ldc + n)?;
    if a_cols > lda || b_cols > ldb || n > ldc {
        return Err(Error::Shape(format!(
            "gemm: leading dimension smaller than row extent (lda={lda} ldb={ldb} ldc={ldc})"
        )));
    }
    if let Some(bias) = bias {
        require("gemm", "bias", bias.len(), n)?;
        for row in c.chunks_mut(ldc).take(m) {
            row[..n].copy_from_slice(&bias[..n]);
        }
    }
    let (rsa, csa) = if transpose_a {
        (1isize, lda as isize)
    } else {
        (lda as isize, 1isize)
    };
    let (rsb, csb) = if transpose_b {
        (1isize, ldb as isize)
    } else {
        (ldb as isize, 1isize)
    };
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if m > 0 && n > 0 {
        if k == 0 {
            // Empty contraction: c = beta * c over the logical region.
            for row in c.chunks_mut(ldc).take(m) {
                if beta == 0.0 {
                    row[..n].fill(0.0);
                }
            }
        } else {
            // Extents validated above; matrixmultiply reads a[i*rsa + j*csa]
            // for i < m, j < k (resp. b, c), all within the slices.
            unsafe {
                matrixmultiply::sgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    rsa,
                    csa,
                    b.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    c.as_mut_ptr(),
                    ldc as isize,
                    1,
                )
            };
        }
    }
    for row in c.chunks_mut(ldc).take(m) {
        row[n..].fill(0.0);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

/// Gather the padded input patch matrix for one image:
/// col[(oh*ow) x (kh*kw*icp)], zeros where the window leaves the input.
fn im2col_image(x_n: &[f32], s: &ConvShape, col: &mut [f32]) {
    let icp = s.c_in_phys;
    let patch = s.kh * s.kw * icp;
    for oh in 0..s.oh {
        for ow in 0..s.ow {
            let row = &mut col[(oh * s.ow + ow) * patch..][..patch];
            for kh in 0..s.kh {
                let ih = (oh * s.stride_h + kh) as isize - s.pad_h as isize;
                for kw in 0..s.kw {
                    let iw = (ow * s.stride_w + kw) as isize - s.pad_w as isize;
                    let dst = &mut row[(kh * s.kw + kw) * icp..][..icp];
                    if ih >= 0 && (ih as usize) < s.h && iw >= 0 && (iw as usize) < s.w {
                        let src = (ih as usize * s.w + iw as usize) * icp;
                        dst.copy_from_slice(&x_n[src..src + icp]);
                    } else {
                        dst.fill(0.0);
                    }
                }
            }
        }
    }
}

fn conv_forward_im2col(x: &[f32], w: &[f32], y: &mut [f32], bias: Option<&[f32]>, s: &ConvShape) {
    let img_in = s.h * s.w * s.c_in_phys;
    let img_out = s.oh * s.ow * s.c_out_phys;
    let patch = s.kh * s.kw * s.c_in_phys;
    let m = s.oh * s.ow;
    y.par_chunks_mut(img_out)
        .take(s.n)
        .enumerate()
        .for_each_init(Vec::new, |col: &mut Vec<f32>, (n, y_n)| {
            col.resize(m * patch, 0.0);
            im2col_image(&x[n * img_in..][..img_in], s, col);
            if let Some(bias) = bias {
                for row in y_n.chunks_mut(s.c_out_phys) {
                    row[..s.c_out].copy_from_slice(&bias[..s.c_out]);
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            // y_n[m x oc] = col[m x patch] * w^T (w stored [oc x patch]).
            unsafe {
                matrixmultiply::sgemm(
                    m,
                    patch,
                    s.c_out,
                    1.0,
                    col.as_ptr(),
                    patch as isize,
                    1,
                    w.as_ptr(),
                    1,
                    patch as isize,
                    beta,
                    y_n.as_mut_ptr(),
                    s.c_out_phys as isize,
                    1,
                )
            };
            for row in y_n.chunks_mut(s.c_out_phys) {
                row[s.c_out..].fill(0.0);
            }
        });
}

/// Lane-parallel dot product with a fixed accumulation order.
#[inline]
fn dot_lanes(acc: &mut [f32; 8], a: &[f32], b: &[f32]) {
    let chunks = a.len() / 8 * 8;
    let (a8, a_rem) = a.split_at(chunks);
    let (b8, b_rem) = b.split_at(chunks);
    for (ca, cb) in a8.chunks_exact(8).zip(b8.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    for l in 0..a_rem.len() {
        acc[l] += a_rem[l] * b_rem[l];
    }
}

#[inline]
fn fold_lanes(acc: &[f32; 8]) -> f32 {
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

/// Register-blocked direct convolution for small feature maps: four output
/// channels per block, channel loop innermost over the padded extent.
fn conv_forward_direct(x: &[f32], w: &[f32], y: &mut [f32], bias: Option<&[f32]>, s: &ConvShape) {
    let icp = s.c_in_phys;
    let img_in = s.h * s.w * icp;
    let img_out = s.oh * s.ow * s.c_out_phys;
    let wrow = s.kh * s.kw * icp;
    y.par_chunks_mut(img_out)
        .take(s.n)
        .enumerate()
        .for_each(|(n, y_n)| {
            let x_n = &x[n * img_in..][..img_in];
            for oh in 0..s.oh {
                for ow in 0..s.ow {
                    let out = &mut y_n[(oh * s.ow + ow) * s.c_out_phys..][..s.c_out_phys];
                    let mut oc = 0;
                    while oc < s.c_out {
                        let blk = (s.c_out - oc).min(4);
                        let mut acc = [[0f32; 8]; 4];
                        for kh in 0..s.kh {
                            let ih = (oh * s.stride_h + kh) as isize - s.pad_h as isize;
                            if ih < 0 || ih as usize >= s.h {
                                continue;
                            }
                            for kw in 0..s.kw {
                                let iw = (ow * s.stride_w + kw) as isize - s.pad_w as isize;
                                if iw < 0 || iw as usize >= s.w {
                                    continue;
                                }
                                let xr = &x_n[(ih as usize * s.w + iw as usize) * icp..][..icp];
                                let koff = (kh * s.kw + kw) * icp;
                                for j in 0..blk {
                                    let wr = &w[(oc + j) * wrow + koff..][..icp];
                                    dot_lanes(&mut acc[j], xr, wr);
                                }
                            }
                        }
                        for j in 0..blk {
                            let mut v = fold_lanes(&acc[j]);
                            if let Some(bias) = bias {
                                v += bias[oc + j];
                            }
                            out[oc + j] = v;
                        }
                        oc += blk;
                    }
                    out[s.c_out..].fill(0.0);
                }
            }
        });
}

pub fn conv2d_forward(
    x: &[f32],
    w: &[f32],
    y: &mut [f32],
    bias: Option<&[f32]>,
    s: &ConvShape,
    algorithm: ConvAlgorithm,
    threshold: usize,
) -> Result<()> {
    require("conv2d_forward", "x", x.len(), s.x_len())?;
    require("conv2d_forward", "w", w.len(), s.w_len())?;
    require("conv2d_forward", "y", y.len(), s.y_len())?;
    if let Some(bias) = bias {
        require("conv2d_forward", "bias", bias.len(), s.c_out)?;
    }
    let algo = match algorithm {
        ConvAlgorithm::Auto => {
            if s.oh * s.ow <= threshold {
                ConvAlgorithm::SmallFeatureDirect
            } else {
                ConvAlgorithm::GeneralIm2col
            }
        }
        other => other,
    };
    match algo {
        ConvAlgorithm::SmallFeatureDirect => conv_forward_direct(x, w, y, bias, s),
        _ => conv_forward_im2col(x, w, y, bias, s),
    }
    Ok(())
}

/// dx = transposed convolution of dy with w: per image, colgrad = dy * w,
/// then scatter-add back through the im2col map.
pub fn conv2d_backward_data(dy: &[f32], w: &[f32], dx: &mut [f32], s: &ConvShape) -> Result<()> {
    require("conv2d_backward_data", "dy", dy.len(), s.y_len())?;
    require("conv2d_backward_data", "w", w.len(), s.w_len())?;
    require("conv2d_backward_data", "dx", dx.len(), s.x_len())?;
    let icp = s.c_in_phys;
    let img_in = s.h * s.w * icp;
    let img_out = s.oh * s.ow * s.c_out_phys;
    let patch = s.kh * s.kw * icp;
    let m = s.oh * s.ow;
    dx.par_chunks_mut(img_in)
        .take(s.n)
        .enumerate()
        .for_each_init(Vec::new, |col: &mut Vec<f32>, (n, dx_n)| {
            col.resize(m * patch, 0.0);
            let dy_n = &dy[n * img_out..][..img_out];
            // colgrad[m x patch] = dy_n[m x oc] * w[oc x patch]
            unsafe {
                matrixmultiply::sgemm(
                    m,
                    s.c_out,
                    patch,
                    1.0,
                    dy_n.as_ptr(),
                    s.c_out_phys as isize,
                    1,
                    w.as_ptr(),
                    patch as isize,
                    1,
                    0.0,
                    col.as_mut_ptr(),
                    patch as isize,
                    1,
                )
            };
            dx_n.fill(0.0);
            for oh in 0..s.oh {
                for ow in 0..s.ow {
                    let row = &col[(oh * s.ow + ow) * patch..][..patch];
                    for kh in 0..s.kh {
                        let ih = (oh * s.stride_h + kh) as isize - s.pad_h as isize;
                        if ih < 0 || ih as usize >= s.h {
                            continue;
                        }
                        for kw in 0..s.kw {
                            let iw = (ow * s.stride_w + kw) as isize - s.pad_w as isize;
                            if iw < 0 || iw as usize >= s.w {
                                continue;
                            }
                            let dst = &mut dx_n[(ih as usize * s.w + iw as usize) * icp..][..icp];
                            let src = &row[(kh * s.kw + kw) * icp..][..icp];
                            for (d, v) in dst.iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        });
    Ok(())
}

/// dw[oc,kh,kw,ic] = sum over images and output positions of dy * patch.
/// Images are processed in fixed chunks whose partials are summed in order.
pub fn conv2d_backward_filter(x: &[f32], dy: &[f32], dw: &mut [f32], s: &ConvShape) -> Result<()> {
    require("conv2d_backward_filter", "x", x.len(), s.x_len())?;
    require("conv2d_backward_filter", "dy", dy.len(), s.y_len())?;
    require("conv2d_backward_filter", "dw", dw.len(), s.w_len())?;
    let icp = s.c_in_phys;
    let img_in = s.h * s.w * icp;
    let img_out = s.oh * s.ow * s.c_out_phys;
    let patch = s.kh * s.kw * icp;
    let m = s.oh * s.ow;
    let wlen = s.c_out * patch;
    if s.n == 0 {
        dw[..wlen].fill(0.0);
        return Ok(());
    }
    let chunk = s.n.div_ceil(8);
    let partials: Vec<Vec<f32>> = (0..s.n)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|ns| {
            let mut part = vec![0f32; wlen];
            let mut col = vec![0f32; m * patch];
            for &n in ns {
                im2col_image(&x[n * img_in..][..img_in], s, &mut col);
                let dy_n = &dy[n * img_out..][..img_out];
                // part[oc x patch] += dy_n^T[oc x m] * col[m x patch]
                unsafe {
                    matrixmultiply::sgemm(
                        s.c_out,
                        m,
                        patch,
                        1.0,
                        dy_n.as_ptr(),
                        1,
                        s.c_out_phys as isize,
                        col.as_ptr(),
                        patch as isize,
                        1,
                        1.0,
                        part.as_mut_ptr(),
                        patch as isize,
                        1,
                    )
                };
            }
            part
        })
        .collect();
    let (first, rest) = partials.split_first().expect("n > 0");
    dw[..wlen].copy_from_slice(first);
    for part in rest {
        for (d, v) in dw[..wlen].iter_mut().zip(part) {
            *d += v;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward(
    x: &[f32],
    gamma: Option<&[f32]>,
    beta: Option<&[f32]>,
    running_mean: &mut [f32],
    running_var: &mut [f32],
    y: &mut [f32],
    saved_mean: &mut [f32],
    saved_inv_std: &mut [f32],
    s: &NormShape,
    training: bool,
    eps: f32,
    momentum: f32,
) -> Result<()> {
    let total = s.rows * s.channels_phys;
    require("batchnorm_forward", "x", x.len(), total)?;
    require("batchnorm_forward", "y", y.len(), total)?;
    for (role, buf) in [
        ("running_mean", &running_mean[..]),
        ("running_var", &running_var[..]),
        ("saved_mean", &saved_mean[..]),
        ("saved_inv_std", &saved_inv_std[..]),
    ] {
        require("batchnorm_forward", role, buf.len(), s.channels)?;
    }
    if let Some(g) = gamma {
        require("batchnorm_forward", "gamma", g.len(), s.channels)?;
    }
    if let Some(b) = beta {
        require("batchnorm_forward", "beta", b.len(), s.channels)?;
    }
    if s.rows == 0 {
        return Err(Error::Shape("batchnorm_forward: empty batch".into()));
    }
    let cp = s.channels_phys;
    let inv_m = 1.0 / s.rows as f32;
    if training {
        // Per-channel batch statistics, biased variance.
        let stats: Vec<(f32, f32)> = (0..s.channels)
            .into_par_iter()
            .map(|c| {
                let mut sum = 0f32;
                for r in 0..s.rows {
                    sum += x[r * cp + c];
                }
                let mean = sum * inv_m;
                let mut sq = 0f32;
                for r in 0..s.rows {
                    let d = x[r * cp + c] - mean;
                    sq += d * d;
                }
                (mean, sq * inv_m)
            })
            .collect();
        for (c, (mean, var)) in stats.iter().enumerate() {
            saved_mean[c] = *mean;
            saved_inv_std[c] = 1.0 / (var + eps).sqrt();
            running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean;
            running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var;
        }
    } else {
        for c in 0..s.channels {
            saved_mean[c] = running_mean[c];
            saved_inv_std[c] = 1.0 / (running_var[c] + eps).sqrt();
        }
    }
    let saved_mean = &saved_mean[..s.channels];
    let saved_inv_std = &saved_inv_std[..s.channels];
    y.par_chunks_mut(cp)
        .take(s.rows)
        .enumerate()
        .with_min_len(64)
        .for_each(|(r, yr)| {
            let xr = &x[r * cp..][..cp];
            for c in 0..s.channels {
                let mut v = (xr[c] - saved_mean[c]) * saved_inv_std[c];
                if let Some(g) = gamma {
                    v *= g[c];
                }
                if let Some(b) = beta {
                    v += b[c];
                }
                yr[c] = v;
            }
            yr[s.channels..].fill(0.0);
        });
    Ok(())
}

/// Standard batchnorm gradient. `x` holds the forward input, or the already
/// normalized values when the forward ran in place (x_is_normalized).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward(
    dy: &[f32],
    x: &[f32],
    gamma: Option<&[f32]>,
    saved_mean: &[f32],
    saved_inv_std: &[f32],
    dx: &mut [f32],
    mut dgamma: Option<&mut [f32]>,
    mut dbeta: Option<&mut [f32]>,
    s: &NormShape,
    x_is_normalized: bool,
) -> Result<()> {
    let total = s.rows * s.channels_phys;
    require("batchnorm_backward", "dy", dy.len(), total)?;
    require("batchnorm_backward", "x", x.len(), total)?;
    require("batchnorm_backward", "dx", dx.len(), total)?;
    require("batchnorm_backward", "saved_mean", saved_mean.len(), s.channels)?;
    require(
        "batchnorm_backward",
        "saved_inv_std",
        saved_inv_std.len(),
        s.channels,
    )?;
    let cp = s.channels_phys;
    let m = s.rows as f32;
    let xhat_at = |r: usize, c: usize| -> f32 {
        if x_is_normalized {
            x[r * cp + c]
        } else {
            (x[r * cp + c] - saved_mean[c]) * saved_inv_std[c]
        }
    };
    // Per-channel reductions: sum dy and sum dy*xhat.
    let sums: Vec<(f32, f32)> = (0..s.channels)
        .into_par_iter()
        .map(|c| {
            let mut sdy = 0f32;
            let mut sdyx = 0f32;
            for r in 0..s.rows {
                let g = dy[r * cp + c];
                sdy += g;
                sdyx += g * xhat_at(r, c);
            }
            (sdy, sdyx)
        })
        .collect();
    for (c, (sdy, sdyx)) in sums.iter().enumerate() {
        if let Some(db) = dbeta.as_deref_mut() {
            db[c] = *sdy;
        }
        if let Some(dg) = dgamma.as_deref_mut() {
            dg[c] = *sdyx;
        }
    }
    dx.par_chunks_mut(cp)
        .take(s.rows)
        .enumerate()
        .with_min_len(64)
        .for_each(|(r, dxr)| {
            for c in 0..s.channels {
                let g = match gamma {
                    Some(g) => g[c],
                    None => 1.0,
                };
                let (sdy, sdyx) = sums[c];
                let coef = g * saved_inv_std[c] / m;
                dxr[c] = coef * (m * dy[r * cp + c] - sdy - xhat_at(r, c) * sdyx);
            }
            dxr[s.channels..].fill(0.0);
        });
    Ok(())
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

pub fn maxpool2d_forward(
    x: &[f32],
    y: &mut [f32],
    argmax: &mut [u32],
    s: &PoolShape,
) -> Result<()> {
    let (oh, ow) = (s.oh(), s.ow());
    let img_in = s.h * s.w * s.c_phys;
    let img_out = oh * ow * s.c_phys;
    require("maxpool2d_forward", "x", x.len(), s.n * img_in)?;
    require("maxpool2d_forward", "y", y.len(), s.n * img_out)?;
    require("maxpool2d_forward", "argmax", argmax.len(), s.n * oh * ow * s.c)?;
    for (lo, hi) in s.h_windows.iter().chain(s.w_windows.iter()) {
        if lo >= hi {
            return Err(Error::Shape(format!(
                "maxpool2d_forward: empty window [{lo}, {hi})"
            )));
        }
    }
    let am_img = oh * ow * s.c;
    y.par_chunks_mut(img_out)
        .zip(argmax.par_chunks_mut(am_img))
        .take(s.n)
        .enumerate()
        .for_each(|(n, (y_n, am_n))| {
            let x_n = &x[n * img_in..][..img_in];
            for (i, &(h_lo, h_hi)) in s.h_windows.iter().enumerate() {
                for (j, &(w_lo, w_hi)) in s.w_windows.iter().enumerate() {
                    let out = &mut y_n[(i * ow + j) * s.c_phys..][..s.c_phys];
                    let am = &mut am_n[(i * ow + j) * s.c..][..s.c];
                    for c in 0..s.c {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_at = 0u32;
                        for ih in h_lo..h_hi.min(s.h) {
                            for iw in w_lo..w_hi.min(s.w) {
                                let v = x_n[(ih * s.w + iw) * s.c_phys + c];
                                // First occurrence wins on ties.
                                if v > best {
                                    best = v;
                                    best_at = (((n * s.h + ih) * s.w + iw) * s.c + c) as u32;
                                }
                            }
                        }
                        out[c] = best;
                        am[c] = best_at;
                    }
                    out[s.c..].fill(0.0);
                }
            }
        });
    Ok(())
}

pub fn maxpool2d_backward(
    dy: &[f32],
    argmax: &[u32],
    dx: &mut [f32],
    s: &PoolShape,
) -> Result<()> {
    let (oh, ow) = (s.oh(), s.ow());
    let img_in = s.h * s.w * s.c_phys;
    let img_out = oh * ow * s.c_phys;
    require("maxpool2d_backward", "dy", dy.len(), s.n * img_out)?;
    require("maxpool2d_backward", "argmax", argmax.len(), s.n * oh * ow * s.c)?;
    require("maxpool2d_backward", "dx", dx.len(), s.n * img_in)?;
    let am_img = oh * ow * s.c;
    let img_elems = s.h * s.w * s.c;
    dx.par_chunks_mut(img_in)
        .take(s.n)
        .enumerate()
        .try_for_each(|(n, dx_n)| {
            dx_n.fill(0.0);
            let dy_n = &dy[n * img_out..][..img_out];
            let am_n = &argmax[n * am_img..][..am_img];
            for (w_idx, &flat) in am_n.iter().enumerate() {
                let flat = flat as usize;
                let local = flat.checked_sub(n * img_elems).ok_or_else(|| {
                    Error::Shape("maxpool2d_backward: argmax index outside image".into())
                })?;
                if local >= img_elems {
                    return Err(Error::Shape(
                        "maxpool2d_backward: argmax index outside image".into(),
                    ));
                }
                let c = local % s.c;
                let pos = local / s.c;
                let (i, j, ch) = (w_idx / (ow * s.c), (w_idx / s.c) % ow, w_idx % s.c);
                // Overlapping windows may hit the same input: contributions sum.
                dx_n[pos * s.c_phys + c] += dy_n[(i * ow + j) * s.c_phys + ch];
            }
            Ok(())
        })
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

#[inline]
fn leaky_fwd(x: f32, k: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        k * x
    }
}

/// Unary elementwise over logical lanes. `x` is None for in-place execution
/// on `y`. Pix2Float is handled separately (different input type).
pub fn unary(
    op: UnaryOp,
    x: Option<&[f32]>,
    aux: Option<&[f32]>,
    y: &mut [f32],
    rows: usize,
    last: usize,
    last_phys: usize,
) -> Result<()> {
    let total = rows * last_phys;
    require("elementwise_unary", "y", y.len(), total)?;
    if let Some(x) = x {
        require("elementwise_unary", "x", x.len(), total)?;
    }
    if let Some(a) = aux {
        require("elementwise_unary", "aux", a.len(), total)?;
    }
    let needs_aux = matches!(op, UnaryOp::LeakyReluBwd(_) | UnaryOp::SigmoidBwd);
    if needs_aux && aux.is_none() {
        return Err(Error::Argument(
            "elementwise_unary: backward variant requires the forward output as aux".into(),
        ));
    }
    y.par_chunks_mut(last_phys)
        .take(rows)
        .enumerate()
        .with_min_len(256)
        .for_each(|(r, yr)| {
            let xr = x.map(|x| &x[r * last_phys..][..last_phys]);
            let ar = aux.map(|a| &a[r * last_phys..][..last_phys]);
            for c in 0..last {
                let v = xr.map_or(yr[c], |x| x[c]);
                yr[c] = match op {
                    UnaryOp::LeakyReluFwd(k) => leaky_fwd(v, k),
                    UnaryOp::LeakyReluBwd(k) => {
                        let out = ar.unwrap()[c];
                        v * if out > 0.0 { 1.0 } else { k }
                    }
                    UnaryOp::SigmoidFwd => 1.0 / (1.0 + (-v).exp()),
                    UnaryOp::SigmoidBwd => {
                        let out = ar.unwrap()[c];
                        v * out * (1.0 - out)
                    }
                    UnaryOp::Scale(a) => a * v,
                    UnaryOp::Pix2Float => unreachable!("pix2float has its own entry point"),
                };
            }
            yr[last..].fill(0.0);
        });
    Ok(())
}

/// y = byte / 255.0, exact: f32 division is correctly rounded, so each output
/// is the nearest single-precision value of b/255.
pub fn pix2float(
    x: &[u8],
    y: &mut [f32],
    rows: usize,
    last: usize,
    last_phys: usize,
) -> Result<()> {
    require("pix2float", "x", x.len(), rows * last_phys)?;
    require("pix2float", "y", y.len(), rows * last_phys)?;
    y.par_chunks_mut(last_phys)
        .take(rows)
        .enumerate()
        .with_min_len(256)
        .for_each(|(r, yr)| {
            let xr = &x[r * last_phys..][..last_phys];
            for c in 0..last {
                yr[c] = xr[c] as f32 / 255.0;
            }
            yr[last..].fill(0.0);
        });
    Ok(())
}

/// Binary elementwise over logical lanes. `x1` is None when y aliases the
/// first operand (in-place).
pub fn binary(
    op: BinaryOp,
    x1: Option<&[f32]>,
    x2: &[f32],
    y: &mut [f32],
    rows: usize,
    last: usize,
    last_phys: usize,
) -> Result<()> {
    let total = rows * last_phys;
    require("elementwise_binary", "x2", x2.len(), total)?;
    require("elementwise_binary", "y", y.len(), total)?;
    if let Some(x1) = x1 {
        require("elementwise_binary", "x1", x1.len(), total)?;
    }
    y.par_chunks_mut(last_phys)
        .take(rows)
        .enumerate()
        .with_min_len(256)
        .for_each(|(r, yr)| {
            let x1r = x1.map(|x| &x[r * last_phys..][..last_phys]);
            let x2r = &x2[r * last_phys..][..last_phys];
            for c in 0..last {
                let a = x1r.map_or(yr[c], |x| x[c]);
                yr[c] = match op {
                    BinaryOp::Add => a + x2r[c],
                    BinaryOp::Mul => a * x2r[c],
                };
            }
            yr[last..].fill(0.0);
        });
    Ok(())
}

pub fn reduce_field_sum(x: &[f32], out: &mut [f32], s: &NormShape) -> Result<()> {
    require("reduce_field_sum", "x", x.len(), s.rows * s.channels_phys)?;
    require("reduce_field_sum", "out", out.len(), s.channels)?;
    let cp = s.channels_phys;
    let sums: Vec<f32> = (0..s.channels)
        .into_par_iter()
        .map(|c| {
            let mut acc = 0f32;
            for r in 0..s.rows {
                acc += x[r * cp + c];
            }
            acc
        })
        .collect();
    out[..s.channels].copy_from_slice(&sums);
    for v in out[s.channels..].iter_mut() {
        *v = 0.0;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

pub fn softmax_crossentropy(
    logits: &[f32],
    onehot: &[f32],
    loss: &mut [f32],
    dlogits: &mut [f32],
    s: &NormShape,
    check_labels: bool,
) -> Result<()> {
    let total = s.rows * s.channels_phys;
    require("softmax_crossentropy", "logits", logits.len(), total)?;
    require("softmax_crossentropy", "onehot", onehot.len(), total)?;
    require("softmax_crossentropy", "dlogits", dlogits.len(), total)?;
    require("softmax_crossentropy", "loss", loss.len(), 1)?;
    if s.rows == 0 {
        return Err(Error::Shape("softmax_crossentropy: empty batch".into()));
    }
    let cp = s.channels_phys;
    if check_labels {
        for r in 0..s.rows {
            let row = &onehot[r * cp..][..s.channels];
            let hot = row.iter().filter(|&&v| v == 1.0).count();
            let rest_zero = row.iter().all(|&v| v == 0.0 || v == 1.0);
            if hot != 1 || !rest_zero {
                return Err(Error::Label(format!(
                    "softmax_crossentropy: row {r} is not one-hot"
                )));
            }
        }
    }
    let inv_rows = 1.0 / s.rows as f32;
    let row_losses: Vec<f32> = dlogits
        .par_chunks_mut(cp)
        .take(s.rows)
        .enumerate()
        .with_min_len(16)
        .map(|(r, dr)| {
            let z = &logits[r * cp..][..s.channels];
            let yh = &onehot[r * cp..][..s.channels];
            let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0f32;
            for &v in z {
                sum += (v - max).exp();
            }
            let log_sum = sum.ln();
            let mut row_loss = 0f32;
            for c in 0..s.channels {
                let p = (z[c] - max).exp() / sum;
                dr[c] = (p - yh[c]) * inv_rows;
                if yh[c] != 0.0 {
                    row_loss += yh[c] * (log_sum - (z[c] - max));
                }
            }
            dr[s.channels..].fill(0.0);
            row_loss
        })
        .collect();
    let mut total_loss = 0f32;
    for l in row_losses {
        total_loss += l;
    }
    loss[0] = total_loss * inv_rows;
    Ok(())
}

// ---------------------------------------------------------------------------
// optimizer steps
// ---------------------------------------------------------------------------

/// One Adam update. Pad lanes hold zero in grad/m/v, so updating the full
/// physical span leaves them zero.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    len: usize,
    step: u64,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
) -> Result<()> {
    require("adam_step", "param", param.len(), len)?;
    require("adam_step", "grad", grad.len(), len)?;
    require("adam_step", "m", m.len(), len)?;
    require("adam_step", "v", v.len(), len)?;
    if step == 0 {
        return Err(Error::Argument("adam_step: step count must be >= 1".into()));
    }
    let c1 = 1.0 - (beta1 as f64).powi(step as i32) as f32;
    let c2 = 1.0 - (beta2 as f64).powi(step as i32) as f32;
    param[..len]
        .par_chunks_mut(4096)
        .zip(grad[..len].par_chunks(4096))
        .zip(m[..len].par_chunks_mut(4096))
        .zip(v[..len].par_chunks_mut(4096))
        .for_each(|(((p, g), m), v)| {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        });
    Ok(())
}

pub fn sgd_step(param: &mut [f32], grad: &[f32], len: usize, lr: f32) -> Result<()> {
    require("sgd_step", "param", param.len(), len)?;
    require("sgd_step", "grad", grad.len(), len)?;
    param[..len]
        .par_chunks_mut(4096)
        .zip(grad[..len].par_chunks(4096))
        .for_each(|(p, g)| {
            for i in 0..p.len() {
                p[i] -= lr * g[i];
            }
        });
    Ok(())
}

// ---------------------------------------------------------------------------
// fills and repacking
// ---------------------------------------------------------------------------

/// Draws follow logical row-major order, so a given (seed, logical shape)
/// yields the same values regardless of padding.
pub fn uniform_fill(
    buf: &mut [f32],
    low: f32,
    high: f32,
    seed: u64,
    rows: usize,
    last: usize,
    last_phys: usize,
) -> Result<()> {
    if low > high {
        return Err(Error::Argument(format!(
            "uniform_fill: low {low} exceeds high {high}"
        )));
    }
    require("uniform_fill", "buf", buf.len(), rows * last_phys)?;
    let mut rng = SeedRng::new(seed);
    for r in 0..rows {
        let row = &mut buf[r * last_phys..][..last_phys];
        for c in 0..last {
            row[c] = rng.uniform(low, high);
        }
        row[last..].fill(0.0);
    }
    Ok(())
}

pub fn fill_zero(buf: &mut [f32], len: usize) -> Result<()> {
    require("fill_zero", "buf", buf.len(), len)?;
    buf[..len].fill(0.0);
    Ok(())
}

/// Copy the logical row-major element stream between two padded layouts.
#[allow(clippy::too_many_arguments)]
pub fn repack(
    x: &[f32],
    y: &mut [f32],
    x_rows: usize,
    x_last: usize,
    x_last_phys: usize,
    y_rows: usize,
    y_last: usize,
    y_last_phys: usize,
) -> Result<()> {
    if x_rows * x_last != y_rows * y_last {
        return Err(Error::Shape(format!(
            "repack: element counts differ ({} vs {})",
            x_rows * x_last,
            y_rows * y_last
        )));
    }
    require("repack", "x", x.len(), x_rows * x_last_phys)?;
    require("repack", "y", y.len(), y_rows * y_last_phys)?;
    let mut src_row = 0;
    let mut src_col = 0;
    for r in 0..y_rows {
        let row = &mut y[r * y_last_phys..][..y_last_phys];
        for c in row.iter_mut().take(y_last) {
            *c = x[src_row * x_last_phys + src_col];
            src_col += 1;
            if src_col == x_last {
                src_col = 0;
                src_row += 1;
            }
        }
        row[y_last..].fill(0.0);
    }
    Ok(())
}
