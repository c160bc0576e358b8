//! Forward and backward kernels for every network operation.
//!
//! All kernels are deterministic regardless of thread count: parallel work
//! is split by output region (gather form), and every accumulator is summed
//! in a fixed sequential order within its owning task. Work below
//! [`PAR_THRESHOLD`] multiply-accumulates runs single-threaded to avoid
//! thread-pool overhead on tiny shapes.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::tensor::{Element, Shape, Tensor};

/// Minimum MAC count before a kernel fans out to the thread pool.
const PAR_THRESHOLD: usize = 262_144;

#[inline]
fn spatial(shape: Shape) -> usize {
    shape[2] * shape[3] * shape[4]
}

/// Fused 3x3x3, stride-1, pad-1 stencil: accumulates one input plane into an
/// output plane of identical spatial dims. Interior rows take a 9-row fused
/// path (27 multiply-accumulates per element, all rows L1-resident); border
/// rows fall back to per-tap shifted accumulation. `w27` is the kernel in
/// (kz, ky, kx) order.
fn stencil3_accumulate_plane<E: Element>(
    x_plane: &[E],
    out_plane: &mut [E],
    d: usize,
    h: usize,
    w: usize,
    w27: &[E],
) {
    debug_assert_eq!(w27.len(), 27);
    let row_tap = |out_row: &mut [E], x_row: &[E], w0: E, w1: E, w2: E| {
        // out[x] += w0*in[x-1] + w1*in[x] + w2*in[x+1], zero-padded.
        let n = out_row.len();
        if n == 1 {
            out_row[0] = out_row[0] + w1 * x_row[0];
            return;
        }
        out_row[0] = out_row[0] + w1 * x_row[0] + w2 * x_row[1];
        for x in 1..n - 1 {
            out_row[x] = out_row[x] + w0 * x_row[x - 1] + w1 * x_row[x] + w2 * x_row[x + 1];
        }
        out_row[n - 1] = out_row[n - 1] + w0 * x_row[n - 2] + w1 * x_row[n - 1];
    };

    for zo in 0..d {
        for yo in 0..h {
            let out_row = &mut out_plane[(zo * h + yo) * w..][..w];
            let interior = zo >= 1 && zo + 1 < d && yo >= 1 && yo + 1 < h && w >= 2;
            if interior {
                let mut rows: [&[E]; 9] = [&[]; 9];
                for dz in 0..3 {
                    for dy in 0..3 {
                        rows[dz * 3 + dy] =
                            &x_plane[((zo + dz - 1) * h + (yo + dy - 1)) * w..][..w];
                    }
                }
                out_row[0] = out_row[0]
                    + (0..9).fold(E::zero(), |acc, r| {
                        acc + w27[r * 3 + 1] * rows[r][0] + w27[r * 3 + 2] * rows[r][1]
                    });
                for x in 1..w - 1 {
                    let mut acc = E::zero();
                    for r in 0..9 {
                        let wr = &w27[r * 3..r * 3 + 3];
                        let row = rows[r];
                        acc = acc + wr[0] * row[x - 1] + wr[1] * row[x] + wr[2] * row[x + 1];
                    }
                    out_row[x] = out_row[x] + acc;
                }
                out_row[w - 1] = out_row[w - 1]
                    + (0..9).fold(E::zero(), |acc, r| {
                        acc + w27[r * 3] * rows[r][w - 2] + w27[r * 3 + 1] * rows[r][w - 1]
                    });
            } else {
                for dz in 0..3usize {
                    let zi = zo + dz;
                    if zi < 1 || zi > d {
                        continue;
                    }
                    let zi = zi - 1;
                    for dy in 0..3usize {
                        let yi = yo + dy;
                        if yi < 1 || yi > h {
                            continue;
                        }
                        let yi = yi - 1;
                        let x_row = &x_plane[(zi * h + yi) * w..][..w];
                        let base = (dz * 3 + dy) * 3;
                        row_tap(out_row, x_row, w27[base], w27[base + 1], w27[base + 2]);
                    }
                }
            }
        }
    }
}

/// Reverses a 27-tap kernel in place-order (the input gradient of a stride-1
/// pad-1 conv is the same stencil with the kernel flipped in all three axes).
fn flip27<E: Element>(w27: &[E]) -> [E; 27] {
    let mut out = [E::zero(); 27];
    for i in 0..27 {
        out[i] = w27[26 - i];
    }
    out
}

/// Output shape of a conv with odd kernel, zero padding `pad`, and `stride`.
pub fn conv3d_out_shape(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<Shape> {
    let [n, ci, d, h, wd] = x;
    let [co, wci, kd, kh, kw] = w;
    if ci != wci {
        return Err(Error::ShapeMismatch(format!(
            "conv3d: input channels {ci} != weight channels {wci}"
        )));
    }
    if kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::ShapeMismatch(format!(
            "conv3d: kernel extents must be odd, got {kd}x{kh}x{kw}"
        )));
    }
    if stride == 0 {
        return Err(Error::ShapeMismatch("conv3d: stride must be >= 1".into()));
    }
    let out = |i: usize, k: usize| -> Result<usize> {
        (i + 2 * pad)
            .checked_sub(k)
            .map(|v| v / stride + 1)
            .ok_or_else(|| {
                Error::ShapeMismatch(format!(
                    "conv3d: kernel {k} larger than padded input {}",
                    i + 2 * pad
                ))
            })
    };
    Ok([n, co, out(d, kd)?, out(h, kh)?, out(wd, kw)?])
}

/// Cross-correlation with zero padding. Bias shape is `(1, co, 1, 1, 1)`.
pub fn conv3d_forward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let xs = x.shape();
    let ws = w.shape();
    let os = conv3d_out_shape(xs, ws, stride, pad)?;
    let [co, ci, kd, kh, kw] = ws;
    if b.shape() != [1, co, 1, 1, 1] {
        return Err(Error::ShapeMismatch(format!(
            "conv3d: bias shape {:?} != (1, {co}, 1, 1, 1)",
            b.shape()
        )));
    }
    let (n, d, h, wd) = (xs[0], xs[2], xs[3], xs[4]);
    let (od, oh, ow) = (os[2], os[3], os[4]);
    let si = spatial(xs);
    let so = spatial(os);
    let mut out = Tensor::<E>::zeros(os);

    let xd = x.data();
    let wd_ = w.data();
    let bd = b.data();
    let macs = n * co * so * ci * kd * kh * kw;

    let fused = stride == 1 && pad == 1 && kd == 3 && kh == 3 && kw == 3;
    let work = |plane_idx: usize, out_plane: &mut [E]| {
        let ni = plane_idx / co;
        let c_out = plane_idx % co;
        out_plane.fill(bd[c_out]);
        if fused {
            for c_in in 0..ci {
                let x_plane = &xd[(ni * ci + c_in) * si..][..si];
                let w27 = &wd_[((c_out * ci + c_in) * 27)..][..27];
                stencil3_accumulate_plane(x_plane, out_plane, d, h, wd, w27);
            }
            return;
        }
        for c_in in 0..ci {
            let x_plane = &xd[(ni * ci + c_in) * si..][..si];
            let w_base = ((c_out * ci + c_in) * kd) * kh * kw;
            for kz in 0..kd {
                // zi = zo*stride + kz - pad must lie in [0, d)
                let zo_lo = pad.saturating_sub(kz).div_ceil(stride);
                for zo in zo_lo..od {
                    let zi = zo * stride + kz;
                    if zi < pad {
                        continue;
                    }
                    let zi = zi - pad;
                    if zi >= d {
                        break;
                    }
                    for ky in 0..kh {
                        let yo_lo = pad.saturating_sub(ky).div_ceil(stride);
                        for yo in yo_lo..oh {
                            let yi = yo * stride + ky;
                            if yi < pad {
                                continue;
                            }
                            let yi = yi - pad;
                            if yi >= h {
                                break;
                            }
                            let out_row = &mut out_plane[(zo * oh + yo) * ow..][..ow];
                            let x_row = &x_plane[(zi * h + yi) * wd..][..wd];
                            let w_row = &wd_[w_base + (kz * kh + ky) * kw..][..kw];
                            for (kx, &wv) in w_row.iter().enumerate() {
                                if stride == 1 {
                                    // xi = xo + kx - pad: one shifted axpy
                                    let shift = kx as isize - pad as isize;
                                    let src_start = shift.max(0) as usize;
                                    let dst_start = (-shift).max(0) as usize;
                                    if src_start >= wd || dst_start >= ow {
                                        continue;
                                    }
                                    let len = (ow - dst_start).min(wd - src_start);
                                    let src = &x_row[src_start..src_start + len];
                                    let dst = &mut out_row[dst_start..dst_start + len];
                                    for (o, xv) in dst.iter_mut().zip(src.iter()) {
                                        *o = *o + wv * *xv;
                                    }
                                } else {
                                    let xo_lo = pad.saturating_sub(kx).div_ceil(stride);
                                    for (xo, o) in out_row.iter_mut().enumerate().skip(xo_lo) {
                                        let xi = xo * stride + kx;
                                        if xi < pad {
                                            continue;
                                        }
                                        let xi = xi - pad;
                                        if xi >= wd {
                                            break;
                                        }
                                        *o = *o + wv * x_row[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    if macs >= PAR_THRESHOLD {
        out.data_mut()
            .par_chunks_exact_mut(so)
            .enumerate()
            .for_each(|(i, plane)| work(i, plane));
    } else {
        for (i, plane) in out.data_mut().chunks_exact_mut(so).enumerate() {
            work(i, plane);
        }
    }
    Ok(out)
}

/// Gradient of conv3d w.r.t. its input. Each (batch, in-channel) plane is
/// owned by one task and filled in a fixed order.
pub fn conv3d_backward_input<E: Element>(
    gout: &Tensor<E>,
    w: &Tensor<E>,
    x_shape: Shape,
    stride: usize,
    pad: usize,
) -> Tensor<E> {
    let os = gout.shape();
    let [co, ci, kd, kh, kw] = w.shape();
    let (n, d, h, wd) = (x_shape[0], x_shape[2], x_shape[3], x_shape[4]);
    let (od, oh, ow) = (os[2], os[3], os[4]);
    let si = spatial(x_shape);
    let so = spatial(os);
    let mut gx = Tensor::<E>::zeros(x_shape);

    let gd = gout.data();
    let wd_ = w.data();
    let macs = n * co * so * ci * kd * kh * kw;

    let fused = stride == 1 && pad == 1 && kd == 3 && kh == 3 && kw == 3;
    let work = |plane_idx: usize, gx_plane: &mut [E]| {
        let ni = plane_idx / ci;
        let c_in = plane_idx % ci;
        if fused {
            for c_out in 0..co {
                let g_plane = &gd[(ni * co + c_out) * so..][..so];
                let w27 = flip27(&wd_[((c_out * ci + c_in) * 27)..][..27]);
                stencil3_accumulate_plane(g_plane, gx_plane, d, h, wd, &w27);
            }
            return;
        }
        for c_out in 0..co {
            let g_plane = &gd[(ni * co + c_out) * so..][..so];
            let w_base = ((c_out * ci + c_in) * kd) * kh * kw;
            for kz in 0..kd {
                let zo_lo = pad.saturating_sub(kz).div_ceil(stride);
                for zo in zo_lo..od {
                    let zi = zo * stride + kz;
                    if zi < pad {
                        continue;
                    }
                    let zi = zi - pad;
                    if zi >= d {
                        break;
                    }
                    for ky in 0..kh {
                        let yo_lo = pad.saturating_sub(ky).div_ceil(stride);
                        for yo in yo_lo..oh {
                            let yi = yo * stride + ky;
                            if yi < pad {
                                continue;
                            }
                            let yi = yi - pad;
                            if yi >= h {
                                break;
                            }
                            let g_row = &g_plane[(zo * oh + yo) * ow..][..ow];
                            let gx_row = &mut gx_plane[(zi * h + yi) * wd..][..wd];
                            let w_row = &wd_[w_base + (kz * kh + ky) * kw..][..kw];
                            for (kx, &wv) in w_row.iter().enumerate() {
                                if stride == 1 {
                                    // gx[xo + kx - pad] += wv * g[xo]
                                    let shift = kx as isize - pad as isize;
                                    let dst_start = shift.max(0) as usize;
                                    let src_start = (-shift).max(0) as usize;
                                    if dst_start >= wd || src_start >= ow {
                                        continue;
                                    }
                                    let len = (wd - dst_start).min(ow - src_start);
                                    let src = &g_row[src_start..src_start + len];
                                    let dst = &mut gx_row[dst_start..dst_start + len];
                                    for (o, g) in dst.iter_mut().zip(src.iter()) {
                                        *o = *o + wv * *g;
                                    }
                                } else {
                                    let xo_lo = pad.saturating_sub(kx).div_ceil(stride);
                                    for (xo, &g) in g_row.iter().enumerate().skip(xo_lo) {
                                        let xi = xo * stride + kx;
                                        if xi < pad {
                                            continue;
                                        }
                                        let xi = xi - pad;
                                        if xi >= wd {
                                            break;
                                        }
                                        gx_row[xi] = gx_row[xi] + wv * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    if macs >= PAR_THRESHOLD {
        gx.data_mut()
            .par_chunks_exact_mut(si)
            .enumerate()
            .for_each(|(i, plane)| work(i, plane));
    } else {
        for (i, plane) in gx.data_mut().chunks_exact_mut(si).enumerate() {
            work(i, plane);
        }
    }
    gx
}

/// Gradient of conv3d w.r.t. its weights; each output-channel block of `gw`
/// is owned by one task.
pub fn conv3d_backward_weight<E: Element>(
    gout: &Tensor<E>,
    x: &Tensor<E>,
    w_shape: Shape,
    stride: usize,
    pad: usize,
) -> Tensor<E> {
    let os = gout.shape();
    let xs = x.shape();
    let [co, ci, kd, kh, kw] = w_shape;
    let (n, d, h, wd) = (xs[0], xs[2], xs[3], xs[4]);
    let (od, oh, ow) = (os[2], os[3], os[4]);
    let si = spatial(xs);
    let so = spatial(os);
    let mut gw = Tensor::<E>::zeros(w_shape);
    let block = ci * kd * kh * kw;

    let gd = gout.data();
    let xd = x.data();
    let macs = n * co * so * ci * kd * kh * kw;

    let work = |c_out: usize, gw_block: &mut [E]| {
        for ni in 0..n {
            let g_plane = &gd[(ni * co + c_out) * so..][..so];
            for c_in in 0..ci {
                let x_plane = &xd[(ni * ci + c_in) * si..][..si];
                for kz in 0..kd {
                    let zo_lo = pad.saturating_sub(kz).div_ceil(stride);
                    for zo in zo_lo..od {
                        let zi = zo * stride + kz;
                        if zi < pad {
                            continue;
                        }
                        let zi = zi - pad;
                        if zi >= d {
                            break;
                        }
                        for ky in 0..kh {
                            let yo_lo = pad.saturating_sub(ky).div_ceil(stride);
                            for yo in yo_lo..oh {
                                let yi = yo * stride + ky;
                                if yi < pad {
                                    continue;
                                }
                                let yi = yi - pad;
                                if yi >= h {
                                    break;
                                }
                                let g_row = &g_plane[(zo * oh + yo) * ow..][..ow];
                                let x_row = &x_plane[(zi * h + yi) * wd..][..wd];
                                if stride == 1 && kw == 3 && pad == 1 && ow >= 2 {
                                    // One fused pass for the three kx taps.
                                    let n = ow;
                                    let mut a0 = E::zero();
                                    let mut a1 = g_row[0] * x_row[0];
                                    let mut a2 = g_row[0] * x_row[1];
                                    for x in 1..n - 1 {
                                        let g = g_row[x];
                                        a0 = a0 + g * x_row[x - 1];
                                        a1 = a1 + g * x_row[x];
                                        a2 = a2 + g * x_row[x + 1];
                                    }
                                    let g = g_row[n - 1];
                                    a0 = a0 + g * x_row[n - 2];
                                    a1 = a1 + g * x_row[n - 1];
                                    let wi = ((c_in * kd + kz) * kh + ky) * kw;
                                    gw_block[wi] = gw_block[wi] + a0;
                                    gw_block[wi + 1] = gw_block[wi + 1] + a1;
                                    gw_block[wi + 2] = gw_block[wi + 2] + a2;
                                    continue;
                                }
                                for kx in 0..kw {
                                    let mut acc = E::zero();
                                    if stride == 1 {
                                        // dot(g[xo], x[xo + kx - pad])
                                        let shift = kx as isize - pad as isize;
                                        let x_start = shift.max(0) as usize;
                                        let g_start = (-shift).max(0) as usize;
                                        if x_start < wd && g_start < ow {
                                            let len = (wd - x_start).min(ow - g_start);
                                            for (g, xv) in g_row[g_start..g_start + len]
                                                .iter()
                                                .zip(x_row[x_start..x_start + len].iter())
                                            {
                                                acc = acc + *g * *xv;
                                            }
                                        }
                                    } else {
                                        let xo_lo = pad.saturating_sub(kx).div_ceil(stride);
                                        for (xo, &g) in g_row.iter().enumerate().skip(xo_lo) {
                                            let xi = xo * stride + kx;
                                            if xi < pad {
                                                continue;
                                            }
                                            let xi = xi - pad;
                                            if xi >= wd {
                                                break;
                                            }
                                            acc = acc + g * x_row[xi];
                                        }
                                    }
                                    let wi = ((c_in * kd + kz) * kh + ky) * kw + kx;
                                    gw_block[wi] = gw_block[wi] + acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    if macs >= PAR_THRESHOLD {
        gw.data_mut()
            .par_chunks_exact_mut(block)
            .enumerate()
            .for_each(|(i, blk)| work(i, blk));
    } else {
        for (i, blk) in gw.data_mut().chunks_exact_mut(block).enumerate() {
            work(i, blk);
        }
    }
    gw
}

/// Gradient of conv3d w.r.t. its bias: per-channel sum of `gout`.
pub fn conv3d_backward_bias<E: Element>(gout: &Tensor<E>) -> Tensor<E> {
    let os = gout.shape();
    let (n, co, so) = (os[0], os[1], spatial(os));
    let mut gb = Tensor::<E>::zeros([1, co, 1, 1, 1]);
    let gd = gout.data();
    for c_out in 0..co {
        let mut acc = E::zero();
        for ni in 0..n {
            for &g in &gd[(ni * co + c_out) * so..][..so] {
                acc = acc + g;
            }
        }
        gb.data_mut()[c_out] = acc;
    }
    gb
}

pub fn leaky_relu_forward<E: Element>(x: &Tensor<E>, slope: f64) -> Tensor<E> {
    let s = E::from_f64(slope);
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < E::zero() {
            *v = *v * s;
        }
    }
    out
}

pub fn leaky_relu_backward<E: Element>(gout: &Tensor<E>, x: &Tensor<E>, slope: f64) -> Tensor<E> {
    let s = E::from_f64(slope);
    let mut gx = gout.clone();
    for (g, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
        if xv < E::zero() {
            *g = *g * s;
        }
    }
    gx
}

pub fn sigmoid_forward<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = E::one() / (E::one() + (-*v).exp());
    }
    out
}

/// Backward from the forward output `y`: `gx = gout * y * (1 - y)`.
pub fn sigmoid_backward<E: Element>(gout: &Tensor<E>, y: &Tensor<E>) -> Tensor<E> {
    let mut gx = gout.clone();
    for (g, &yv) in gx.data_mut().iter_mut().zip(y.data()) {
        *g = *g * yv * (E::one() - yv);
    }
    gx
}

pub fn upsample2x_forward<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let [n, c, d, h, w] = x.shape();
    let os = [n, c, 2 * d, 2 * h, 2 * w];
    let mut out = Tensor::<E>::zeros(os);
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        let src = &xd[nc * d * h * w..][..d * h * w];
        let dst = &mut od[nc * 8 * d * h * w..][..8 * d * h * w];
        for z in 0..d {
            for y in 0..h {
                for x_ in 0..w {
                    let v = src[(z * h + y) * w + x_];
                    let (z2, y2, x2) = (2 * z, 2 * y, 2 * x_);
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let row = ((z2 + dz) * 2 * h + (y2 + dy)) * 2 * w + x2;
                            dst[row] = v;
                            dst[row + 1] = v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of nearest 2x upsampling: sums each 2x2x2 block.
pub fn upsample2x_backward<E: Element>(gout: &Tensor<E>, x_shape: Shape) -> Tensor<E> {
    let [n, c, d, h, w] = x_shape;
    let mut gx = Tensor::<E>::zeros(x_shape);
    let gd = gout.data();
    let gxd = gx.data_mut();
    for nc in 0..n * c {
        let src = &gd[nc * 8 * d * h * w..][..8 * d * h * w];
        let dst = &mut gxd[nc * d * h * w..][..d * h * w];
        for z in 0..d {
            for y in 0..h {
                for x_ in 0..w {
                    let (z2, y2, x2) = (2 * z, 2 * y, 2 * x_);
                    let mut acc = E::zero();
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let row = ((z2 + dz) * 2 * h + (y2 + dy)) * 2 * w + x2;
                            acc = acc + src[row] + src[row + 1];
                        }
                    }
                    dst[(z * h + y) * w + x_] = acc;
                }
            }
        }
    }
    gx
}

pub fn concat_channels_forward<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let [na, ca, da, ha, wa] = a.shape();
    let [nb, cb, db, hb, wb] = b.shape();
    if (na, da, ha, wa) != (nb, db, hb, wb) {
        return Err(Error::ShapeMismatch(format!(
            "concat_channels: shapes {:?} and {:?} differ outside the channel axis",
            a.shape(),
            b.shape()
        )));
    }
    let sp = da * ha * wa;
    let mut out = Tensor::<E>::zeros([na, ca + cb, da, ha, wa]);
    let od = out.data_mut();
    for ni in 0..na {
        let dst = &mut od[ni * (ca + cb) * sp..][..(ca + cb) * sp];
        dst[..ca * sp].copy_from_slice(&a.data()[ni * ca * sp..][..ca * sp]);
        dst[ca * sp..].copy_from_slice(&b.data()[ni * cb * sp..][..cb * sp]);
    }
    Ok(out)
}

/// Splits the gradient of a channel concat back into the two inputs.
pub fn concat_channels_backward<E: Element>(
    gout: &Tensor<E>,
    a_shape: Shape,
    b_shape: Shape,
) -> (Tensor<E>, Tensor<E>) {
    let [n, ca, d, h, w] = a_shape;
    let cb = b_shape[1];
    let sp = d * h * w;
    let mut ga = Tensor::<E>::zeros(a_shape);
    let mut gb = Tensor::<E>::zeros(b_shape);
    for ni in 0..n {
        let src = &gout.data()[ni * (ca + cb) * sp..][..(ca + cb) * sp];
        ga.data_mut()[ni * ca * sp..][..ca * sp].copy_from_slice(&src[..ca * sp]);
        gb.data_mut()[ni * cb * sp..][..cb * sp].copy_from_slice(&src[ca * sp..]);
    }
    (ga, gb)
}

pub fn add_forward<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "add: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o + bv;
    }
    Ok(out)
}

/// Soft Dice loss over probabilities: per batch item
/// `1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)`, averaged over the
/// batch. Returns the per-item sums for the backward pass.
pub fn soft_dice_forward<E: Element>(
    pred: &Tensor<E>,
    target: &Tensor<E>,
    eps: f64,
) -> Result<(E, Vec<[E; 3]>)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "soft_dice: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.shape()[0];
    let per = pred.numel() / n;
    let e = E::from_f64(eps);
    let mut sums = Vec::with_capacity(n);
    let mut total = E::zero();
    for i in 0..n {
        let p = &pred.data()[i * per..][..per];
        let t = &target.data()[i * per..][..per];
        let mut inter = E::zero();
        let mut sp = E::zero();
        let mut st = E::zero();
        for (&pv, &tv) in p.iter().zip(t.iter()) {
            inter = inter + pv * tv;
            sp = sp + pv;
            st = st + tv;
        }
        let loss = E::one() - (E::from_f64(2.0) * inter + e) / (sp + st + e);
        total = total + loss;
        sums.push([inter, sp, st]);
    }
    Ok((total / E::from_f64(n as f64), sums))
}

pub fn soft_dice_backward<E: Element>(
    gout: E,
    pred: &Tensor<E>,
    target: &Tensor<E>,
    sums: &[[E; 3]],
    eps: f64,
) -> Tensor<E> {
    let n = pred.shape()[0];
    let per = pred.numel() / n;
    let e = E::from_f64(eps);
    let two = E::from_f64(2.0);
    let scale = gout / E::from_f64(n as f64);
    let mut gp = Tensor::<E>::zeros(pred.shape());
    for i in 0..n {
        let [inter, sp, st] = sums[i];
        let num = two * inter + e;
        let den = sp + st + e;
        let den2 = den * den;
        let t = &target.data()[i * per..][..per];
        let g = &mut gp.data_mut()[i * per..][..per];
        for (gv, &tv) in g.iter_mut().zip(t.iter()) {
            // d/dp of -(num/den): -(2*t*den - num) / den^2
            *gv = scale * (num - two * tv * den) / den2;
        }
    }
    gp
}

/// Fixed-weight scalar reduction `sum(weights * x)`; the verification head
/// for gradient checks.
pub fn weighted_sum_forward<E: Element>(x: &Tensor<E>, weights: &Tensor<E>) -> Result<E> {
    if x.shape() != weights.shape() {
        return Err(Error::ShapeMismatch(format!(
            "weighted_sum: {:?} vs {:?}",
            x.shape(),
            weights.shape()
        )));
    }
    let mut acc = E::zero();
    for (&xv, &wv) in x.data().iter().zip(weights.data()) {
        acc = acc + xv * wv;
    }
    Ok(acc)
}

pub fn weighted_sum_backward<E: Element>(gout: E, weights: &Tensor<E>) -> Tensor<E> {
    let mut g = weights.clone();
    for v in g.data_mut() {
        *v = *v * gout;
    }
    g
}
