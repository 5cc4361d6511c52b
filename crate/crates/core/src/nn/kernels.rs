//! Raw compute kernels for the layer zoo. All convolutions are 3x3 with
//! stride 1 and padding 1; all pooling is 2x2 with stride 2.

pub const CONV_KERNEL: usize = 3;
pub const CONV_PAD: usize = 1;
pub const POOL: usize = 2;
pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// y[n, o] = bias[o] + sum_k x[n, k] * w[o, k]
pub fn dense_forward(
    x: &[f32],
    n: usize,
    in_f: usize,
    w: &[f32],
    out_f: usize,
    bias: Option<&[f32]>,
    y: &mut [f32],
) {
    for i in 0..n {
        let xr = &x[i * in_f..(i + 1) * in_f];
        let yr = &mut y[i * out_f..(i + 1) * out_f];
        for o in 0..out_f {
            let wr = &w[o * in_f..(o + 1) * in_f];
            let mut acc = bias.map_or(0.0, |b| b[o]);
            for k in 0..in_f {
                acc += xr[k] * wr[k];
            }
            yr[o] = acc;
        }
    }
}

pub fn dense_backward_weights(
    x: &[f32],
    n: usize,
    in_f: usize,
    g: &[f32],
    out_f: usize,
    grad_w: &mut [f32],
    grad_b: Option<&mut [f32]>,
) {
    for i in 0..n {
        let xr = &x[i * in_f..(i + 1) * in_f];
        let gr = &g[i * out_f..(i + 1) * out_f];
        for o in 0..out_f {
            let go = gr[o];
            if go == 0.0 {
                continue;
            }
            let wr = &mut grad_w[o * in_f..(o + 1) * in_f];
            for k in 0..in_f {
                wr[k] += go * xr[k];
            }
        }
    }
    if let Some(gb) = grad_b {
        for i in 0..n {
            let gr = &g[i * out_f..(i + 1) * out_f];
            for o in 0..out_f {
                gb[o] += gr[o];
            }
        }
    }
}

pub fn dense_backward_input(
    w: &[f32],
    in_f: usize,
    g: &[f32],
    n: usize,
    out_f: usize,
    grad_x: &mut [f32],
) {
    for i in 0..n {
        let gr = &g[i * out_f..(i + 1) * out_f];
        let gxr = &mut grad_x[i * in_f..(i + 1) * in_f];
        for o in 0..out_f {
            let go = gr[o];
            if go == 0.0 {
                continue;
            }
            let wr = &w[o * in_f..(o + 1) * in_f];
            for k in 0..in_f {
                gxr[k] += go * wr[k];
            }
        }
    }
}

/// Loop bounds so that iy = oy + ky - pad stays inside [0, h).
#[inline]
fn conv_range(k: usize, extent: usize) -> (usize, usize) {
    let lo = CONV_PAD.saturating_sub(k);
    let hi = (extent + CONV_PAD - k).min(extent);
    (lo, hi)
}

/// y[n, oc, oy, ox] = bias[oc] + sum_{ic,ky,kx} w[oc,ic,ky,kx] * x[n,ic,oy+ky-1,ox+kx-1]
#[allow(clippy::too_many_arguments)]
pub fn conv_forward(
    x: &[f32],
    n: usize,
    in_c: usize,
    h: usize,
    wd: usize,
    weight: &[f32],
    out_c: usize,
    bias: Option<&[f32]>,
    y: &mut [f32],
) {
    let plane = h * wd;
    for im in 0..n {
        for oc in 0..out_c {
            let yb = (im * out_c + oc) * plane;
            let fill = bias.map_or(0.0, |b| b[oc]);
            y[yb..yb + plane].fill(fill);
            for ic in 0..in_c {
                let xb = (im * in_c + ic) * plane;
                for ky in 0..CONV_KERNEL {
                    let (oy_lo, oy_hi) = conv_range(ky, h);
                    for kx in 0..CONV_KERNEL {
                        let wv = weight[((oc * in_c + ic) * CONV_KERNEL + ky) * CONV_KERNEL + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = conv_range(kx, wd);
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - CONV_PAD;
                            let yrow = yb + oy * wd;
                            let xrow = xb + iy * wd + kx;
                            for ox in ox_lo..ox_hi {
                                y[yrow + ox] += wv * x[xrow + ox - CONV_PAD];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_backward_weights(
    x: &[f32],
    n: usize,
    in_c: usize,
    h: usize,
    wd: usize,
    g: &[f32],
    out_c: usize,
    grad_w: &mut [f32],
    grad_b: Option<&mut [f32]>,
) {
    let plane = h * wd;
    for im in 0..n {
        for oc in 0..out_c {
            let gb = (im * out_c + oc) * plane;
            for ic in 0..in_c {
                let xb = (im * in_c + ic) * plane;
                for ky in 0..CONV_KERNEL {
                    let (oy_lo, oy_hi) = conv_range(ky, h);
                    for kx in 0..CONV_KERNEL {
                        let (ox_lo, ox_hi) = conv_range(kx, wd);
                        let mut acc = 0.0f32;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - CONV_PAD;
                            let grow = gb + oy * wd;
                            let xrow = xb + iy * wd + kx;
                            for ox in ox_lo..ox_hi {
                                acc += g[grow + ox] * x[xrow + ox - CONV_PAD];
                            }
                        }
                        grad_w[((oc * in_c + ic) * CONV_KERNEL + ky) * CONV_KERNEL + kx] += acc;
                    }
                }
            }
        }
    }
    if let Some(gbias) = grad_b {
        for im in 0..n {
            for oc in 0..out_c {
                let gb = (im * out_c + oc) * plane;
                let mut acc = 0.0f32;
                for v in &g[gb..gb + plane] {
                    acc += v;
                }
                gbias[oc] += acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_backward_input(
    weight: &[f32],
    in_c: usize,
    h: usize,
    wd: usize,
    g: &[f32],
    n: usize,
    out_c: usize,
    grad_x: &mut [f32],
) {
    let plane = h * wd;
    for im in 0..n {
        for oc in 0..out_c {
            let gb = (im * out_c + oc) * plane;
            for ic in 0..in_c {
                let xb = (im * in_c + ic) * plane;
                for ky in 0..CONV_KERNEL {
                    let (oy_lo, oy_hi) = conv_range(ky, h);
                    for kx in 0..CONV_KERNEL {
                        let wv = weight[((oc * in_c + ic) * CONV_KERNEL + ky) * CONV_KERNEL + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = conv_range(kx, wd);
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - CONV_PAD;
                            let grow = gb + oy * wd;
                            let xrow = xb + iy * wd + kx;
                            for ox in ox_lo..ox_hi {
                                grad_x[xrow + ox - CONV_PAD] += wv * g[grow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2/2 max pooling; records the flat input index of each window maximum.
pub fn maxpool_forward(
    x: &[f32],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    y: &mut [f32],
    argmax: &mut [u32],
) {
    let oh = h / POOL;
    let ow = wd / POOL;
    for im in 0..n {
        for ch in 0..c {
            let xb = (im * c + ch) * h * wd;
            let yb = (im * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = xb + (oy * POOL) * wd + ox * POOL;
                    let mut best = x[best_idx];
                    for dy in 0..POOL {
                        for dx in 0..POOL {
                            let idx = xb + (oy * POOL + dy) * wd + ox * POOL + dx;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    y[yb + oy * ow + ox] = best;
                    argmax[yb + oy * ow + ox] = best_idx as u32;
                }
            }
        }
    }
}

pub fn maxpool_backward(g: &[f32], argmax: &[u32], grad_x: &mut [f32]) {
    for (gv, &idx) in g.iter().zip(argmax.iter()) {
        grad_x[idx as usize] += *gv;
    }
}

pub fn relu_forward(x: &[f32], y: &mut [f32]) {
    for (yo, &xi) in y.iter_mut().zip(x.iter()) {
        *yo = if xi > 0.0 { xi } else { 0.0 };
    }
}

pub fn relu_backward(x: &[f32], g: &[f32], grad_x: &mut [f32]) {
    for ((gx, &xi), &gv) in grad_x.iter_mut().zip(x.iter()).zip(g.iter()) {
        *gx = if xi > 0.0 { gv } else { 0.0 };
    }
}

/// Per-channel batch statistics over (N, H, W). Returns (mean, biased var).
pub fn bn_batch_stats(x: &[f32], n: usize, c: usize, plane: usize) -> (Vec<f32>, Vec<f32>) {
    let m = (n * plane) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for im in 0..n {
            let base = (im * c + ch) * plane;
            for &v in &x[base..base + plane] {
                sum += v as f64;
            }
        }
        let mu = sum / m;
        let mut sq = 0.0f64;
        for im in 0..n {
            let base = (im * c + ch) * plane;
            for &v in &x[base..base + plane] {
                let d = v as f64 - mu;
                sq += d * d;
            }
        }
        mean[ch] = mu as f32;
        var[ch] = (sq / m) as f32;
    }
    (mean, var)
}

/// Normalizes with the supplied statistics (batch stats in training mode,
/// running stats in eval mode). Affine is frozen at gamma=1, beta=0.
pub fn bn_forward(
    x: &[f32],
    n: usize,
    c: usize,
    plane: usize,
    mean: &[f32],
    var: &[f32],
    y: &mut [f32],
) {
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
        let mu = mean[ch];
        for im in 0..n {
            let base = (im * c + ch) * plane;
            for i in base..base + plane {
                y[i] = (x[i] - mu) * inv;
            }
        }
    }
}

/// Exact input gradient through batch statistics:
/// dx = inv_std/M * (M*g - sum(g) - xhat * sum(g*xhat)), per channel.
#[allow(clippy::too_many_arguments)]
pub fn bn_backward(
    xhat: &[f32],
    n: usize,
    c: usize,
    plane: usize,
    var: &[f32],
    g: &[f32],
    grad_x: &mut [f32],
) {
    let m = (n * plane) as f64;
    for ch in 0..c {
        let inv = 1.0 / ((var[ch] + BN_EPS) as f64).sqrt();
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for im in 0..n {
            let base = (im * c + ch) * plane;
            for i in base..base + plane {
                sum_g += g[i] as f64;
                sum_gx += g[i] as f64 * xhat[i] as f64;
            }
        }
        for im in 0..n {
            let base = (im * c + ch) * plane;
            for i in base..base + plane {
                let v = inv / m * (m * g[i] as f64 - sum_g - xhat[i] as f64 * sum_gx);
                grad_x[i] = v as f32;
            }
        }
    }
}
