//! Batched NCHW kernels: 3x3 same-padded convolution, batch normalization,
//! ReLU, 2x2 max pooling and a dense layer, each with its backward pass.
//!
//! Per-sample work is spread over the rayon pool. Cross-sample reductions
//! are accumulated in fixed-size sample chunks and summed in chunk order, so
//! results do not depend on the number of worker threads.

use rayon::prelude::*;

const REDUCE_CHUNK: usize = 8;

/// Sums per-chunk partial vectors of length `len` in a thread-count
/// independent order.
fn chunked_sum<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partials: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; len];
            let lo = c * REDUCE_CHUNK;
            f(lo..(lo + REDUCE_CHUNK).min(n), &mut acc);
            acc
        })
        .collect();
    let mut total = vec![0.0; len];
    for p in partials {
        total.iter_mut().zip(&p).for_each(|(t, v)| *t += v);
    }
    total
}

/// Zero-padded copy of one sample, `cin x (h+2) x (w+2)`.
fn pad_sample(x: &[f64], cin: usize, h: usize, w: usize, out: &mut [f64]) {
    let (ph, pw) = (h + 2, w + 2);
    out.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..cin {
        for y in 0..h {
            let src = &x[(c * h + y) * w..(c * h + y + 1) * w];
            let dst = &mut out[(c * ph + y + 1) * pw + 1..(c * ph + y + 1) * pw + 1 + w];
            dst.copy_from_slice(src);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvShape {
    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }
    fn out_len(&self) -> usize {
        self.cout * self.h * self.w
    }
    fn pad_len(&self) -> usize {
        self.cin * (self.h + 2) * (self.w + 2)
    }
}

pub(crate) fn conv_forward(x: &[f64], s: ConvShape, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (h, w) = (s.h, s.w);
    let pw = w + 2;
    let mut out = vec![0.0; s.n * s.out_len()];
    out.par_chunks_mut(s.out_len())
        .zip(x.par_chunks(s.in_len()))
        .for_each_init(
            || vec![0.0; s.pad_len()],
            |pad, (o, xi)| {
                pad_sample(xi, s.cin, h, w, pad);
                for co in 0..s.cout {
                    let plane = &mut o[co * h * w..(co + 1) * h * w];
                    plane.iter_mut().for_each(|v| *v = bias[co]);
                    for ci in 0..s.cin {
                        let pplane = &pad[ci * (h + 2) * pw..(ci + 1) * (h + 2) * pw];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let wv = weight[((co * s.cin + ci) * 3 + ky) * 3 + kx];
                                for y in 0..h {
                                    let src = &pplane[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                                    let dst = &mut plane[y * w..(y + 1) * w];
                                    for (d, &v) in dst.iter_mut().zip(src) {
                                        *d += wv * v;
                                    }
                                }
                            }
                        }
                    }
                }
            },
        );
    out
}

/// Returns `(d_weight, d_bias, d_input)`; the weight/input gradients are
/// skipped (left empty) when not requested.
pub(crate) fn conv_backward(
    x: &[f64],
    s: ConvShape,
    weight: &[f64],
    dout: &[f64],
    need_dweight: bool,
    need_dinput: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, w) = (s.h, s.w);
    let pw = w + 2;
    let plane = h * w;

    let dbias = chunked_sum(s.n, s.cout, |range, acc| {
        for i in range {
            let d = &dout[i * s.out_len()..(i + 1) * s.out_len()];
            for (co, a) in acc.iter_mut().enumerate() {
                *a += d[co * plane..(co + 1) * plane].iter().sum::<f64>();
            }
        }
    });

    let dweight = if need_dweight {
        chunked_sum(s.n, s.cout * s.cin * 9, |range, acc| {
            let mut pad = vec![0.0; s.pad_len()];
            for i in range {
                pad_sample(&x[i * s.in_len()..(i + 1) * s.in_len()], s.cin, h, w, &mut pad);
                let d = &dout[i * s.out_len()..(i + 1) * s.out_len()];
                for co in 0..s.cout {
                    let dplane = &d[co * plane..(co + 1) * plane];
                    for ci in 0..s.cin {
                        let pplane = &pad[ci * (h + 2) * pw..(ci + 1) * (h + 2) * pw];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let mut sum = 0.0;
                                for y in 0..h {
                                    let src = &pplane[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                                    let dr = &dplane[y * w..(y + 1) * w];
                                    sum += dr.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                                }
                                acc[((co * s.cin + ci) * 3 + ky) * 3 + kx] += sum;
                            }
                        }
                    }
                }
            }
        })
    } else {
        Vec::new()
    };

    let dinput = if need_dinput {
        let mut dx = vec![0.0; s.n * s.in_len()];
        dx.par_chunks_mut(s.in_len())
            .zip(dout.par_chunks(s.out_len()))
            .for_each_init(
                || vec![0.0; s.pad_len()],
                |dpad, (dxi, d)| {
                    dpad.iter_mut().for_each(|v| *v = 0.0);
                    for co in 0..s.cout {
                        let dplane = &d[co * plane..(co + 1) * plane];
                        for ci in 0..s.cin {
                            let pplane = &mut dpad[ci * (h + 2) * pw..(ci + 1) * (h + 2) * pw];
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let wv = weight[((co * s.cin + ci) * 3 + ky) * 3 + kx];
                                    for y in 0..h {
                                        let dst =
                                            &mut pplane[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                                        let dr = &dplane[y * w..(y + 1) * w];
                                        for (o, &g) in dst.iter_mut().zip(dr) {
                                            *o += wv * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    for c in 0..s.cin {
                        for y in 0..h {
                            let src = &dpad[(c * (h + 2) + y + 1) * pw + 1..][..w];
                            dxi[(c * h + y) * w..(c * h + y + 1) * w].copy_from_slice(src);
                        }
                    }
                },
            );
        dx
    } else {
        Vec::new()
    };

    (dweight, dbias, dinput)
}

/// Per-channel mean and biased variance over batch and spatial positions.
pub(crate) fn channel_stats(x: &[f64], n: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += x[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for i in 0..n {
            v += x[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                .iter()
                .map(|&a| (a - mu) * (a - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// Normalizes with the given statistics; returns `(x_hat, y, inv_std)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_forward(
    x: &[f64],
    n: usize,
    c: usize,
    plane: usize,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
            for ((xh, yy), &xv) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&x[r]) {
                *xh = (xv - mean[ch]) * inv_std[ch];
                *yy = gamma[ch] * *xh + beta[ch];
            }
        }
    }
    (xhat, y, inv_std)
}

/// Returns `(d_gamma, d_beta, d_x)`. With `batch_stats` the mean and
/// variance are treated as functions of the batch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward(
    dy: &[f64],
    xhat: &[f64],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = (n * plane) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
            for (&g, &xh) in dy[r.clone()].iter().zip(&xhat[r]) {
                dgamma[ch] += g * xh;
                dbeta[ch] += g;
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for i in 0..n {
        for ch in 0..c {
            let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
            let k = gamma[ch] * inv_std[ch];
            if batch_stats {
                // dx = g*inv_std/m * (m*dy - sum(dy) - xhat*sum(dy*xhat))
                let (sdy, sdyx) = (dbeta[ch], dgamma[ch]);
                for ((o, &g), &xh) in dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&xhat[r]) {
                    *o = k / m * (m * g - sdy - xh * sdyx);
                }
            } else {
                for (o, &g) in dx[r.clone()].iter_mut().zip(&dy[r]) {
                    *o = k * g;
                }
            }
        }
    }
    (dgamma, dbeta, dx)
}

pub(crate) fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Gradient through ReLU given its output.
pub(crate) fn relu_backward(dout: &[f64], out: &[f64]) -> Vec<f64> {
    dout.iter()
        .zip(out)
        .map(|(&g, &o)| if o > 0.0 { g } else { 0.0 })
        .collect()
}

/// 2x2 stride-2 max pool; ties go to the first element in row-major order.
/// Returns the pooled values and the flat argmax index into `x`.
pub(crate) fn maxpool_forward(x: &[f64], nc: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nc * oh * ow);
    let mut idx = Vec::with_capacity(nc * oh * ow);
    for p in 0..nc {
        let base = p * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + (2 * y) * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                out.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

pub(crate) fn maxpool_backward(dout: &[f64], idx: &[u32], in_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; in_len];
    for (&g, &j) in dout.iter().zip(idx) {
        dx[j as usize] += g;
    }
    dx
}

/// `out[n][k] = bias[k] + weight[k] . x[n]`, weight stored `k x fan_in`.
pub(crate) fn dense_forward(x: &[f64], n: usize, fan_in: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let k = bias.len();
    let mut out = vec![0.0; n * k];
    out.par_chunks_mut(k)
        .zip(x.par_chunks(fan_in))
        .for_each(|(o, xi)| {
            for (j, oj) in o.iter_mut().enumerate() {
                let wr = &weight[j * fan_in..(j + 1) * fan_in];
                *oj = bias[j] + wr.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
            }
        });
    out
}

/// Returns `(d_weight, d_bias, d_input)`; `d_weight` empty when skipped.
pub(crate) fn dense_backward(
    x: &[f64],
    n: usize,
    fan_in: usize,
    weight: &[f64],
    dout: &[f64],
    need_dweight: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = dout.len() / n.max(1);
    let dbias = chunked_sum(n, k, |range, acc| {
        for i in range {
            acc.iter_mut()
                .zip(&dout[i * k..(i + 1) * k])
                .for_each(|(a, g)| *a += g);
        }
    });
    let dweight = if need_dweight {
        chunked_sum(n, k * fan_in, |range, acc| {
            for i in range {
                let xi = &x[i * fan_in..(i + 1) * fan_in];
                for j in 0..k {
                    let g = dout[i * k + j];
                    acc[j * fan_in..(j + 1) * fan_in]
                        .iter_mut()
                        .zip(xi)
                        .for_each(|(a, &v)| *a += g * v);
                }
            }
        })
    } else {
        Vec::new()
    };
    let mut dx = vec![0.0; n * fan_in];
    dx.par_chunks_mut(fan_in)
        .zip(dout.par_chunks(k))
        .for_each(|(dxi, g)| {
            for (j, &gj) in g.iter().enumerate() {
                dxi.iter_mut()
                    .zip(&weight[j * fan_in..(j + 1) * fan_in])
                    .for_each(|(a, &w)| *a += gj * w);
            }
        });
    (dweight, dbias, dx)
}
