//! Forward and backward kernels. All loops run in a fixed order so results
//! are bitwise reproducible.

use crate::tensor::Tensor;

/// `y[n, o] = Σ_i x[n, i]·w[o, i] + b[o]`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, inputs) = (x.batch(), x.item_len());
    let outputs = w.shape()[0];
    let (xd, wd) = (x.data(), w.data());
    let mut y = vec![0.0; n * outputs];
    for s in 0..n {
        let xr = &xd[s * inputs..(s + 1) * inputs];
        let yr = &mut y[s * outputs..(s + 1) * outputs];
        for (o, yo) in yr.iter_mut().enumerate() {
            let wr = &wd[o * inputs..(o + 1) * inputs];
            let mut acc = 0.0;
            for (a, c) in xr.iter().zip(wr) {
                acc += a * c;
            }
            *yo = acc + b.map_or(0.0, |b| b.data()[o]);
        }
    }
    Tensor::new(vec![n, outputs], y).expect("dense output shape")
}

/// Returns `(dx, dw, db)`; `dx` is skipped when `need_dx` is false.
pub fn dense_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, inputs) = (x.batch(), x.item_len());
    let outputs = w.shape()[0];
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    let mut dw = vec![0.0; outputs * inputs];
    let mut db = vec![0.0; outputs];
    for s in 0..n {
        let xr = &xd[s * inputs..(s + 1) * inputs];
        for o in 0..outputs {
            let g = gd[s * outputs + o];
            db[o] += g;
            if g == 0.0 {
                continue;
            }
            for (d, a) in dw[o * inputs..(o + 1) * inputs].iter_mut().zip(xr) {
                *d += g * a;
            }
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; n * inputs];
        for s in 0..n {
            let dr = &mut dx[s * inputs..(s + 1) * inputs];
            for o in 0..outputs {
                let g = gd[s * outputs + o];
                if g == 0.0 {
                    continue;
                }
                for (d, c) in dr.iter_mut().zip(&wd[o * inputs..(o + 1) * inputs]) {
                    *d += g * c;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), dx).expect("dense dx shape")
    });
    (
        dx,
        Tensor::new(w.shape().to_vec(), dw).expect("dense dw shape"),
        Tensor::new(vec![outputs], db).expect("dense db shape"),
    )
}

/// Output positions `j` in `0..out_len` whose input coordinate
/// `j·stride + offset − pad` falls inside `0..in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, offset: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    // j·stride + offset − pad ≤ in_len − 1
    let limit = in_len + pad;
    let hi = if limit > offset {
        ((limit - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// Cross-correlation with zero padding: `x[N, C, H, W]`, `w[O, C, k, k]`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let s = x.shape();
    let (n, c_in, h, wid) = (s[0], s[1], s[2], s[3]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (conv_out_len(h, k, stride, pad), conv_out_len(wid, k, stride, pad));
    let (xd, wd) = (x.data(), w.data());
    let mut y = vec![0.0; n * c_out * ho * wo];
    for bi in 0..n {
        for o in 0..c_out {
            let ys = &mut y[(bi * c_out + o) * ho * wo..(bi * c_out + o + 1) * ho * wo];
            for c in 0..c_in {
                let xs = &xd[(bi * c_in + c) * h * wid..(bi * c_in + c + 1) * h * wid];
                for u in 0..k {
                    let (i_lo, i_hi) = valid_range(ho, h, u, pad, stride);
                    for v in 0..k {
                        let wv = wd[((o * c_in + c) * k + u) * k + v];
                        let (j_lo, j_hi) = valid_range(wo, wid, v, pad, stride);
                        for i in i_lo..i_hi {
                            let xi = i * stride + u - pad;
                            let xrow = &xs[xi * wid..(xi + 1) * wid];
                            let yrow = &mut ys[i * wo..(i + 1) * wo];
                            for j in j_lo..j_hi {
                                yrow[j] += wv * xrow[j * stride + v - pad];
                            }
                        }
                    }
                }
            }
            if let Some(b) = b {
                let bv = b.data()[o];
                for yv in ys.iter_mut() {
                    *yv += bv;
                }
            }
        }
    }
    Tensor::new(vec![n, c_out, ho, wo], y).expect("conv output shape")
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let s = x.shape();
    let (n, c_in, h, wid) = (s[0], s[1], s[2], s[3]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    let mut dx = if need_dx { vec![0.0; xd.len()] } else { Vec::new() };
    let mut dw = vec![0.0; wd.len()];
    let mut db = vec![0.0; c_out];
    for bi in 0..n {
        for o in 0..c_out {
            let gs = &gd[(bi * c_out + o) * ho * wo..(bi * c_out + o + 1) * ho * wo];
            db[o] += gs.iter().sum::<f64>();
            for c in 0..c_in {
                let base = (bi * c_in + c) * h * wid;
                let xs = &xd[base..base + h * wid];
                for u in 0..k {
                    let (i_lo, i_hi) = valid_range(ho, h, u, pad, stride);
                    for v in 0..k {
                        let widx = ((o * c_in + c) * k + u) * k + v;
                        let wv = wd[widx];
                        let (j_lo, j_hi) = valid_range(wo, wid, v, pad, stride);
                        let mut acc = 0.0;
                        for i in i_lo..i_hi {
                            let xi = i * stride + u - pad;
                            let grow = &gs[i * wo..(i + 1) * wo];
                            let xrow = &xs[xi * wid..(xi + 1) * wid];
                            for j in j_lo..j_hi {
                                acc += grow[j] * xrow[j * stride + v - pad];
                            }
                            if need_dx {
                                let drow = &mut dx[base + xi * wid..base + (xi + 1) * wid];
                                for j in j_lo..j_hi {
                                    drow[j * stride + v - pad] += wv * grow[j];
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (
        need_dx.then(|| Tensor::new(s.to_vec(), dx).expect("conv dx shape")),
        Tensor::new(w.shape().to_vec(), dw).expect("conv dw shape"),
        Tensor::new(vec![c_out], db).expect("conv db shape"),
    )
}

/// Non-overlapping max pooling; returns the output and the flat input index
/// of each maximum (first maximum wins ties).
pub fn max_pool_forward(x: &Tensor, size: usize) -> (Tensor, Vec<usize>) {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / size, w / size);
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(y.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + (i * size) * w + j * size;
                for u in 0..size {
                    for v in 0..size {
                        let p = base + (i * size + u) * w + j * size + v;
                        if x.data()[p] > x.data()[best] {
                            best = p;
                        }
                    }
                }
                y.push(x.data()[best]);
                idx.push(best);
            }
        }
    }
    (Tensor::new(vec![n, c, ho, wo], y).expect("pool shape"), idx)
}

pub fn max_pool_backward(input_shape: &[usize], idx: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    for (&p, &g) in idx.iter().zip(dy.data()) {
        dx.data_mut()[p] += g;
    }
    dx
}

pub fn avg_pool_forward(x: &Tensor, size: usize) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / size, w / size);
    let scale = 1.0 / (size * size) as f64;
    let mut y = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for u in 0..size {
                    for v in 0..size {
                        acc += x.data()[base + (i * size + u) * w + j * size + v];
                    }
                }
                y.push(acc * scale);
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], y).expect("pool shape")
}

pub fn avg_pool_backward(input_shape: &[usize], size: usize, dy: &Tensor) -> Tensor {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (ho, wo) = (h / size, w / size);
    let scale = 1.0 / (size * size) as f64;
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let g = dy.data()[(plane * ho + i) * wo + j] * scale;
                for u in 0..size {
                    for v in 0..size {
                        d[base + (i * size + u) * w + j * size + v] += g;
                    }
                }
            }
        }
    }
    dx
}

pub fn global_pool_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (n, c, m) = (s[0], s[1], s[2] * s[3]);
    let y = (0..n * c)
        .map(|p| x.data()[p * m..(p + 1) * m].iter().sum::<f64>() / m as f64)
        .collect();
    Tensor::new(vec![n, c, 1, 1], y).expect("pool shape")
}

pub fn global_pool_backward(input_shape: &[usize], dy: &Tensor) -> Tensor {
    let m = input_shape[2] * input_shape[3];
    let mut dx = Tensor::zeros(input_shape);
    for (p, &g) in dy.data().iter().enumerate() {
        for d in &mut dx.data_mut()[p * m..(p + 1) * m] {
            *d = g / m as f64;
        }
    }
    dx
}

/// Views a `[N, C]` or `[N, C, H, W]` tensor as `(N, C, positions)`.
pub fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape.iter().skip(2).product())
}

/// Per-channel affine map `y = scale[c]·x + shift[c]`.
pub fn channel_affine(x: &Tensor, scale: &[f64], shift: &[f64]) -> Tensor {
    let (n, c, m) = channel_layout(x.shape());
    let mut y = x.clone();
    let d = y.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let (a, t) = (scale[ch], shift[ch]);
            for v in &mut d[(b * c + ch) * m..(b * c + ch + 1) * m] {
                *v = a * *v + t;
            }
        }
    }
    y
}

pub struct BatchNormTrain {
    pub y: Tensor,
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Unbiased batch variance, used for the running estimate.
    pub var_unbiased: Vec<f64>,
}

pub fn batchnorm_train(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> BatchNormTrain {
    let (n, c, m) = channel_layout(x.shape());
    let count = (n * m) as f64;
    let d = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for b in 0..n {
            acc += d[(b * c + ch) * m..(b * c + ch + 1) * m].iter().sum::<f64>();
        }
        mean[ch] = acc / count;
        let mut sq = 0.0;
        for b in 0..n {
            for v in &d[(b * c + ch) * m..(b * c + ch + 1) * m] {
                sq += (v - mean[ch]) * (v - mean[ch]);
            }
        }
        var[ch] = sq / count;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let shift: Vec<f64> = (0..c).map(|ch| -mean[ch] * inv_std[ch]).collect();
    let x_hat = channel_affine(x, &inv_std, &shift);
    let y = channel_affine(&x_hat, gamma, beta);
    let var_unbiased = var
        .iter()
        .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
        .collect();
    BatchNormTrain {
        y,
        x_hat,
        inv_std,
        mean,
        var_unbiased,
    }
}

/// Returns `(dx, dgamma, dbeta)` for batch-statistics normalization.
pub fn batchnorm_backward(
    x_hat: &Tensor,
    inv_std: &[f64],
    gamma: &[f64],
    dy: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, c, m) = channel_layout(x_hat.shape());
    let count = (n * m) as f64;
    let (xh, g) = (x_hat.data(), dy.data());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        for b in 0..n {
            let r = (b * c + ch) * m..(b * c + ch + 1) * m;
            for (gv, xv) in g[r.clone()].iter().zip(&xh[r]) {
                dbeta[ch] += gv;
                dgamma[ch] += gv * xv;
            }
        }
    }
    let mut dx = vec![0.0; g.len()];
    for ch in 0..c {
        // With dx̂ = γ·dy: dx = inv_std/count · (count·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂))
        let sum_dxhat = gamma[ch] * dbeta[ch];
        let sum_dxhat_xhat = gamma[ch] * dgamma[ch];
        let k = inv_std[ch] / count;
        for b in 0..n {
            let r = (b * c + ch) * m..(b * c + ch + 1) * m;
            for p in r {
                dx[p] = k * (count * gamma[ch] * g[p] - sum_dxhat - xh[p] * sum_dxhat_xhat);
            }
        }
    }
    (
        Tensor::new(x_hat.shape().to_vec(), dx).expect("bn dx shape"),
        dgamma,
        dbeta,
    )
}
