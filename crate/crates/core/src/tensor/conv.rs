//! Convolution and pooling kernels behind the tape ops.
//!
//! All loops accumulate in a fixed order so repeated runs are bit-identical;
//! rayon is only used where each task owns a disjoint output slice.

use rayon::prelude::*;

use super::Element;

// Parallelism below this many output elements costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 14;

pub struct Conv2dDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Output rows `oh` for which `oh*stride + k - pad` lands inside `[0, extent)`.
fn valid_range(extent: usize, k: usize, stride: usize, pad: usize, out_extent: usize) -> (usize, usize) {
    // oh*stride + k - pad >= 0  and  oh*stride + k - pad < extent
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi_excl = if extent + pad > k {
        ((extent + pad - k - 1) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(hi_excl), hi_excl)
}

pub fn conv2d_forward<T: Element>(x: &[T], wt: &[T], bias: &[T], d: &Conv2dDims) -> Vec<T> {
    let plane = d.h_out * d.w_out;
    let mut out = vec![T::zero(); d.n * d.c_out * plane];
    let run = |(idx, dst): (usize, &mut [T])| {
        let n = idx / d.c_out;
        let co = idx % d.c_out;
        dst.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..d.c_in {
            let x_plane = &x[(n * d.c_in + ci) * d.h * d.w..][..d.h * d.w];
            let w_base = ((co * d.c_in + ci) * d.kh) * d.kw;
            for kh in 0..d.kh {
                let (oh_lo, oh_hi) = valid_range(d.h, kh, d.stride, d.pad, d.h_out);
                for kw in 0..d.kw {
                    let wv = wt[w_base + kh * d.kw + kw];
                    let (ow_lo, ow_hi) = valid_range(d.w, kw, d.stride, d.pad, d.w_out);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = oh * d.stride + kh - d.pad;
                        let xrow = &x_plane[ih * d.w..][..d.w];
                        let orow = &mut dst[oh * d.w_out..][..d.w_out];
                        let iw0 = ow_lo * d.stride + kw - d.pad;
                        if d.stride == 1 {
                            let xs = &xrow[iw0..iw0 + (ow_hi - ow_lo)];
                            let os = &mut orow[ow_lo..ow_hi];
                            for (o, &xv) in os.iter_mut().zip(xs) {
                                *o = *o + wv * xv;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                orow[ow] = orow[ow] + wv * xrow[ow * d.stride + kw - d.pad];
                            }
                        }
                    }
                }
            }
        }
    };
    if out.len() >= PAR_THRESHOLD {
        out.par_chunks_mut(plane).enumerate().for_each(run);
    } else {
        out.chunks_mut(plane).enumerate().for_each(run);
    }
    out
}

pub fn conv2d_backward<T: Element>(
    x: &[T],
    wt: &[T],
    gout: &[T],
    d: &Conv2dDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane_out = d.h_out * d.w_out;
    let mut dx = vec![T::zero(); d.n * d.c_in * d.h * d.w];
    let mut dw = vec![T::zero(); d.c_out * d.c_in * d.kh * d.kw];
    let mut db = vec![T::zero(); d.c_out];

    // d bias: sum of output grads per channel, batch-major order.
    for n in 0..d.n {
        for co in 0..d.c_out {
            let g = &gout[(n * d.c_out + co) * plane_out..][..plane_out];
            let mut acc = T::zero();
            for &gv in g {
                acc = acc + gv;
            }
            db[co] = db[co] + acc;
        }
    }

    // d weight: each task owns one output channel's kernel block.
    let dw_run = |(co, dwc): (usize, &mut [T])| {
        for n in 0..d.n {
            let g = &gout[(n * d.c_out + co) * plane_out..][..plane_out];
            for ci in 0..d.c_in {
                let x_plane = &x[(n * d.c_in + ci) * d.h * d.w..][..d.h * d.w];
                for kh in 0..d.kh {
                    let (oh_lo, oh_hi) = valid_range(d.h, kh, d.stride, d.pad, d.h_out);
                    for kw in 0..d.kw {
                        let (ow_lo, ow_hi) = valid_range(d.w, kw, d.stride, d.pad, d.w_out);
                        let mut acc = T::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = oh * d.stride + kh - d.pad;
                            let xrow = &x_plane[ih * d.w..][..d.w];
                            let grow = &g[oh * d.w_out..][..d.w_out];
                            for ow in ow_lo..ow_hi {
                                acc = acc + grow[ow] * xrow[ow * d.stride + kw - d.pad];
                            }
                        }
                        let slot = (ci * d.kh + kh) * d.kw + kw;
                        dwc[slot] = dwc[slot] + acc;
                    }
                }
            }
        }
    };
    let dw_chunk = d.c_in * d.kh * d.kw;
    if d.n * d.c_out * plane_out >= PAR_THRESHOLD {
        dw.par_chunks_mut(dw_chunk).enumerate().for_each(dw_run);
    } else {
        dw.chunks_mut(dw_chunk).enumerate().for_each(dw_run);
    }

    // d input: each task owns one (n, ci) input plane.
    let dx_run = |(idx, dxp): (usize, &mut [T])| {
        let n = idx / d.c_in;
        let ci = idx % d.c_in;
        for co in 0..d.c_out {
            let g = &gout[(n * d.c_out + co) * plane_out..][..plane_out];
            let w_base = ((co * d.c_in + ci) * d.kh) * d.kw;
            for kh in 0..d.kh {
                let (oh_lo, oh_hi) = valid_range(d.h, kh, d.stride, d.pad, d.h_out);
                for kw in 0..d.kw {
                    let wv = wt[w_base + kh * d.kw + kw];
                    let (ow_lo, ow_hi) = valid_range(d.w, kw, d.stride, d.pad, d.w_out);
                    for oh in oh_lo..oh_hi {
                        let ih = oh * d.stride + kh - d.pad;
                        let grow = &g[oh * d.w_out..][..d.w_out];
                        let dxrow = &mut dxp[ih * d.w..][..d.w];
                        for ow in ow_lo..ow_hi {
                            let iw = ow * d.stride + kw - d.pad;
                            dxrow[iw] = dxrow[iw] + wv * grow[ow];
                        }
                    }
                }
            }
        }
    };
    let dx_chunk = d.h * d.w;
    if dx.len() >= PAR_THRESHOLD {
        dx.par_chunks_mut(dx_chunk).enumerate().for_each(dx_run);
    } else {
        dx.chunks_mut(dx_chunk).enumerate().for_each(dx_run);
    }

    (dx, dw, db)
}

/// Dims for the view-volume convolution on `[V, N, C, H, W]` stacks.
pub struct Conv3dDims {
    pub v: usize,
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kv: usize,
    pub kh: usize,
    pub kw: usize,
}

impl Conv3dDims {
    fn pad(&self) -> (usize, usize, usize) {
        (self.kv / 2, self.kh / 2, self.kw / 2)
    }
}

fn idx5(a: usize, b: usize, c: usize, d: usize, e: usize, sb: usize, sc: usize, sd: usize, se: usize) -> usize {
    (((a * sb + b) * sc + c) * sd + d) * se + e
}

/// Stride-1 3D convolution over (view, height, width), zero padded to keep
/// the stack shape. Channel mixing is full (C_in x C_out).
pub fn conv3d_forward<T: Element>(x: &[T], wt: &[T], bias: &[T], d: &Conv3dDims) -> Vec<T> {
    let (pv, ph, pw) = d.pad();
    let plane = d.h * d.w;
    let mut out = vec![T::zero(); d.v * d.n * d.c_out * plane];
    let run = |(idx, dst): (usize, &mut [T])| {
        let v = idx / (d.n * d.c_out);
        let n = (idx / d.c_out) % d.n;
        let co = idx % d.c_out;
        dst.iter_mut().for_each(|o| *o = bias[co]);
        for kv in 0..d.kv {
            let iv = v + kv;
            if iv < pv || iv - pv >= d.v {
                continue;
            }
            let iv = iv - pv;
            for ci in 0..d.c_in {
                let x_plane = &x[idx5(iv, n, ci, 0, 0, d.n, d.c_in, d.h, d.w)..][..plane];
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let wv = wt[idx5(co, ci, kv, kh, kw, d.c_in, d.kv, d.kh, d.kw)];
                        for oh in 0..d.h {
                            let ih = oh + kh;
                            if ih < ph || ih - ph >= d.h {
                                continue;
                            }
                            let ih = ih - ph;
                            for ow in 0..d.w {
                                let iw = ow + kw;
                                if iw < pw || iw - pw >= d.w {
                                    continue;
                                }
                                let slot = oh * d.w + ow;
                                dst[slot] = dst[slot] + wv * x_plane[ih * d.w + (iw - pw)];
                            }
                        }
                    }
                }
            }
        }
    };
    if out.len() >= PAR_THRESHOLD {
        out.par_chunks_mut(plane).enumerate().for_each(run);
    } else {
        out.chunks_mut(plane).enumerate().for_each(run);
    }
    out
}

pub fn conv3d_backward<T: Element>(
    x: &[T],
    wt: &[T],
    gout: &[T],
    d: &Conv3dDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (pv, ph, pw) = d.pad();
    let plane = d.h * d.w;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); wt.len()];
    let mut db = vec![T::zero(); d.c_out];

    for v in 0..d.v {
        for n in 0..d.n {
            for co in 0..d.c_out {
                let g = &gout[idx5(v, n, co, 0, 0, d.n, d.c_out, d.h, d.w)..][..plane];
                let mut acc = T::zero();
                for &gv in g {
                    acc = acc + gv;
                }
                db[co] = db[co] + acc;
            }
        }
    }

    // Serial accumulation keeps the reduction order fixed; these volumes are
    // small (V <= 9, desk-scale maps).
    for v in 0..d.v {
        for n in 0..d.n {
            for co in 0..d.c_out {
                let g = &gout[idx5(v, n, co, 0, 0, d.n, d.c_out, d.h, d.w)..][..plane];
                for kv in 0..d.kv {
                    let iv = v + kv;
                    if iv < pv || iv - pv >= d.v {
                        continue;
                    }
                    let iv = iv - pv;
                    for ci in 0..d.c_in {
                        let x_base = idx5(iv, n, ci, 0, 0, d.n, d.c_in, d.h, d.w);
                        for kh in 0..d.kh {
                            for kw in 0..d.kw {
                                let wslot = idx5(co, ci, kv, kh, kw, d.c_in, d.kv, d.kh, d.kw);
                                let wv = wt[wslot];
                                let mut wacc = T::zero();
                                for oh in 0..d.h {
                                    let ih = oh + kh;
                                    if ih < ph || ih - ph >= d.h {
                                        continue;
                                    }
                                    let ih = ih - ph;
                                    for ow in 0..d.w {
                                        let iw = ow + kw;
                                        if iw < pw || iw - pw >= d.w {
                                            continue;
                                        }
                                        let iw = iw - pw;
                                        let gv = g[oh * d.w + ow];
                                        wacc = wacc + gv * x[x_base + ih * d.w + iw];
                                        dx[x_base + ih * d.w + iw] =
                                            dx[x_base + ih * d.w + iw] + wv * gv;
                                    }
                                }
                                dw[wslot] = dw[wslot] + wacc;
                            }
                        }
                    }
                }
            }
        }
    }

    (dx, dw, db)
}

pub struct Pool2dDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub s: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Max pooling; ties resolve to the first element in scan order. Returns the
/// pooled values and per-output argmax (flat index within the input plane).
pub fn max_pool2d_forward<T: Element>(x: &[T], d: &Pool2dDims) -> (Vec<T>, Vec<u32>) {
    let plane_out = d.h_out * d.w_out;
    let mut out = vec![T::zero(); d.n * d.c * plane_out];
    let mut arg = vec![0u32; out.len()];
    for nc in 0..d.n * d.c {
        let xp = &x[nc * d.h * d.w..][..d.h * d.w];
        let op = &mut out[nc * plane_out..][..plane_out];
        let ap = &mut arg[nc * plane_out..][..plane_out];
        for oh in 0..d.h_out {
            for ow in 0..d.w_out {
                let mut best = T::neg_infinity();
                let mut best_at = 0u32;
                for kh in 0..d.k {
                    for kw in 0..d.k {
                        let ih = oh * d.s + kh;
                        let iw = ow * d.s + kw;
                        let v = xp[ih * d.w + iw];
                        if v > best {
                            best = v;
                            best_at = (ih * d.w + iw) as u32;
                        }
                    }
                }
                op[oh * d.w_out + ow] = best;
                ap[oh * d.w_out + ow] = best_at;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2d_backward<T: Element>(gout: &[T], arg: &[u32], d: &Pool2dDims) -> Vec<T> {
    let plane_out = d.h_out * d.w_out;
    let mut dx = vec![T::zero(); d.n * d.c * d.h * d.w];
    for nc in 0..d.n * d.c {
        let g = &gout[nc * plane_out..][..plane_out];
        let a = &arg[nc * plane_out..][..plane_out];
        let dxp = &mut dx[nc * d.h * d.w..][..d.h * d.w];
        for i in 0..plane_out {
            let slot = a[i] as usize;
            dxp[slot] = dxp[slot] + g[i];
        }
    }
    dx
}
