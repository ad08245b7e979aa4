//! Independent nested-loop reference implementations.
//!
//! These exist solely so the verification suites can compare the optimized
//! kernels against something transparently correct. They work on plain f64
//! slices, share no code with the tape, and trade all speed for clarity.
//! Panics on malformed shapes are fine here: callers are tests.

/// Direct 2-D convolution. `x` is NCHW, `w` is OIHW. Returns (data, shape).
pub fn conv2d(
    x: &[f64],
    xs: &[usize],
    w: &[f64],
    ws: &[usize],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, ci2, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(ci, ci2);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bias[o];
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let ih = oh * stride + i;
                                let iw = ow * stride + j;
                                if ih < pad || iw < pad {
                                    continue;
                                }
                                let (ih, iw) = (ih - pad, iw - pad);
                                if ih >= h || iw >= wd {
                                    continue;
                                }
                                acc += x[((b * ci + c) * h + ih) * wd + iw]
                                    * w[((o * ci + c) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * co + o) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    (out, vec![n, co, ho, wo])
}

/// Direct 3-D convolution over a `[V, N, C, H, W]` stack, stride 1,
/// zero padding of half the (odd) kernel on each of (view, H, W).
pub fn conv3d_views(
    x: &[f64],
    xs: &[usize],
    w: &[f64],
    ws: &[usize],
    bias: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let (v, n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (co, ci2, kv, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    assert_eq!(ci, ci2);
    let (pv, ph, pw) = (kv / 2, kh / 2, kw / 2);
    let mut out = vec![0.0; v * n * co * h * wd];
    for vi in 0..v {
        for b in 0..n {
            for o in 0..co {
                for oh in 0..h {
                    for ow in 0..wd {
                        let mut acc = bias[o];
                        for c in 0..ci {
                            for a in 0..kv {
                                for i in 0..kh {
                                    for j in 0..kw {
                                        let iv = vi + a;
                                        let ih = oh + i;
                                        let iw = ow + j;
                                        if iv < pv || ih < ph || iw < pw {
                                            continue;
                                        }
                                        let (iv, ih, iw) = (iv - pv, ih - ph, iw - pw);
                                        if iv >= v || ih >= h || iw >= wd {
                                            continue;
                                        }
                                        acc += x[(((iv * n + b) * ci + c) * h + ih) * wd + iw]
                                            * w[(((o * ci + c) * kv + a) * kh + i) * kw + j];
                                    }
                                }
                            }
                        }
                        out[(((vi * n + b) * co + o) * h + oh) * wd + ow] = acc;
                    }
                }
            }
        }
    }
    (out, vec![v, n, co, h, wd])
}

pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Residual vectors r_ij = x_i - c_j, flattened as [m, n, d].
pub fn residuals(x: &[f64], m: usize, d: usize, c: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n * d];
    for i in 0..m {
        for j in 0..n {
            for k in 0..d {
                out[(i * n + j) * d + k] = x[i * d + k] - c[j * d + k];
            }
        }
    }
    out
}

/// Assignment weights evaluated directly from the definition
/// w_ij = exp(-s_j ||r_ij||^2) / sum_k exp(-s_k ||r_ik||^2), no stabilization.
pub fn assign_weights(r: &[f64], m: usize, n: usize, d: usize, s: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let mut denom = 0.0;
        for j in 0..n {
            let mut sq = 0.0;
            for k in 0..d {
                let v = r[(i * n + j) * d + k];
                sq += v * v;
            }
            out[i * n + j] = (-s[j] * sq).exp();
            denom += out[i * n + j];
        }
        for j in 0..n {
            out[i * n + j] /= denom;
        }
    }
    out
}

/// Full residual encoding E = {e_j}, e_j = sum_i w_ij r_ij, by triple loop.
pub fn encode_full(x: &[f64], m: usize, d: usize, c: &[f64], n: usize, s: &[f64]) -> Vec<f64> {
    let r = residuals(x, m, d, c, n);
    let w = assign_weights(&r, m, n, d, s);
    let mut e = vec![0.0; n * d];
    for j in 0..n {
        for k in 0..d {
            let mut acc = 0.0;
            for i in 0..m {
                acc += w[i * n + j] * r[(i * n + j) * d + k];
            }
            e[j * d + k] = acc;
        }
    }
    e
}

/// Location-wise self outer products, summed: `[N, C, H, W] -> [N, C*C]`.
pub fn pooled_bilinear(x: &[f64], xs: &[usize]) -> Vec<f64> {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let plane = h * w;
    let mut out = vec![0.0; n * c * c];
    for b in 0..n {
        for loc in 0..plane {
            for i in 0..c {
                for j in 0..c {
                    out[(b * c + i) * c + j] +=
                        x[(b * c + i) * plane + loc] * x[(b * c + j) * plane + loc];
                }
            }
        }
    }
    out
}

/// Elementwise max over the leading (view) axis by straight looping.
pub fn view_max(x: &[f64], v: usize, rest: usize) -> Vec<f64> {
    let mut out = x[..rest].to_vec();
    for vi in 1..v {
        for i in 0..rest {
            if x[vi * rest + i] > out[i] {
                out[i] = x[vi * rest + i];
            }
        }
    }
    out
}
