//! Independent f64 reference implementations and a central-difference
//! driver. Everything here is written from the math, separately from the
//! crate's compute kernels, so gradient and saliency checks compare two
//! genuinely different routes.

#![allow(dead_code)]

use rand::Rng;

/// Central finite differences of `f` at `theta` with step `eps`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = vec![0.0; theta.len()];
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + eps;
        let up = f(&probe);
        probe[i] = theta[i] - eps;
        let down = f(&probe);
        probe[i] = theta[i];
        grad[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Relative agreement with an absolute floor for near-zero entries.
pub fn assert_close(actual: &[f32], expected: &[f64], rtol: f64, atol: f64, what: &str) {
    assert_eq!(actual.len(), expected.len(), "{what}: length mismatch");
    for (i, (&a, &e)) in actual.iter().zip(expected.iter()).enumerate() {
        let a = a as f64;
        let diff = (a - e).abs();
        let scale = a.abs().max(e.abs());
        assert!(
            diff <= rtol * scale || diff <= atol,
            "{what}[{i}]: actual {a}, expected {e}, diff {diff}, scale {scale}"
        );
    }
}

pub fn max_rel_err(actual: &[f32], expected: &[f64], atol: f64) -> f64 {
    actual
        .iter()
        .zip(expected.iter())
        .map(|(&a, &e)| {
            let a = a as f64;
            let diff = (a - e).abs();
            if diff <= atol {
                0.0
            } else {
                diff / a.abs().max(e.abs()).max(1e-300)
            }
        })
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// f64 layer math (naive formulations)
// ---------------------------------------------------------------------------

/// y[n][o] = b[o] + sum_k w[o][k] x[n][k]
pub fn dense(x: &[Vec<f64>], w: &[Vec<f64>], b: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            w.iter()
                .zip(b.iter())
                .map(|(wr, &bo)| bo + wr.iter().zip(row.iter()).map(|(a, c)| a * c).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn relu(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| row.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect())
        .collect()
}

/// Naive sliding-window 3x3 convolution with padding 1, one image.
/// x and the result are [channel][y][x] nested vectors.
pub fn conv3x3(
    x: &[Vec<Vec<f64>>],
    weight: &[Vec<[[f64; 3]; 3]>], // [out_c][in_c][ky][kx]
    bias: &[f64],
) -> Vec<Vec<Vec<f64>>> {
    let in_c = x.len();
    let h = x[0].len();
    let w = x[0][0].len();
    let out_c = weight.len();
    let mut y = vec![vec![vec![0.0; w]; h]; out_c];
    for (oc, plane) in y.iter_mut().enumerate() {
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = bias[oc];
                for ic in 0..in_c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = oy as isize + ky as isize - 1;
                            let ix = ox as isize + kx as isize - 1;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                acc += weight[oc][ic][ky][kx] * x[ic][iy as usize][ix as usize];
                            }
                        }
                    }
                }
                plane[oy][ox] = acc;
            }
        }
    }
    y
}

/// 2x2 stride-2 max pooling with floor semantics, one image.
pub fn maxpool(x: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    let h = x[0].len();
    let w = x[0][0].len();
    x.iter()
        .map(|plane| {
            (0..h / 2)
                .map(|oy| {
                    (0..w / 2)
                        .map(|ox| {
                            let mut best = f64::NEG_INFINITY;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    best = best.max(plane[oy * 2 + dy][ox * 2 + dx]);
                                }
                            }
                            best
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Batch normalization over a batch of images, per channel, batch
/// statistics, frozen affine, eps 1e-5.
pub fn batchnorm(batch: &[Vec<Vec<Vec<f64>>>]) -> Vec<Vec<Vec<Vec<f64>>>> {
    let n = batch.len();
    let c = batch[0].len();
    let h = batch[0][0].len();
    let w = batch[0][0][0].len();
    let m = (n * h * w) as f64;
    let mut out = batch.to_vec();
    for ch in 0..c {
        let mut mean = 0.0;
        for img in batch {
            for row in &img[ch] {
                for &v in row {
                    mean += v;
                }
            }
        }
        mean /= m;
        let mut var = 0.0;
        for img in batch {
            for row in &img[ch] {
                for &v in row {
                    var += (v - mean) * (v - mean);
                }
            }
        }
        var /= m;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for (i, img) in out.iter_mut().enumerate() {
            for (y, row) in img[ch].iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    *v = (batch[i][ch][y][x] - mean) * inv;
                }
            }
        }
    }
    out
}

/// Mean softmax cross-entropy.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut loss = 0.0;
    for (row, &label) in logits.iter().zip(labels.iter()) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        loss -= row[label] - max - denom.ln();
    }
    loss / logits.len() as f64
}

pub fn flatten_image(x: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let mut out = Vec::new();
    for plane in x {
        for row in plane {
            out.extend_from_slice(row);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Path-product saliency oracle
// ---------------------------------------------------------------------------

/// Explicit enumeration of every input-output path of a bias-free dense
/// chain. The saliency of weight (o, i) in layer l is the sum over all
/// paths through (o, i) of the product of absolute weights along the path.
///
/// `weights[l]` is row-major [out_l x in_l]; `widths` holds the activation
/// widths [d0, d1, ..., dL].
pub fn saliency_by_path_enumeration(weights: &[Vec<f64>], widths: &[usize]) -> Vec<Vec<f64>> {
    let layers = weights.len();
    let mut saliency: Vec<Vec<f64>> = weights.iter().map(|w| vec![0.0; w.len()]).collect();
    // path = (j_0, j_1, ..., j_L), one node per activation level
    let mut path = vec![0usize; layers + 1];
    loop {
        let mut product = 1.0;
        for l in 0..layers {
            let (row, col) = (path[l + 1], path[l]);
            product *= weights[l][row * widths[l] + col].abs();
        }
        if product != 0.0 {
            for l in 0..layers {
                let (row, col) = (path[l + 1], path[l]);
                saliency[l][row * widths[l] + col] += product;
            }
        }
        // odometer increment over all node choices
        let mut level = 0;
        loop {
            if level > layers {
                return saliency;
            }
            path[level] += 1;
            if path[level] < widths[level] {
                break;
            }
            path[level] = 0;
            level += 1;
        }
    }
}

// ---------------------------------------------------------------------------
// Random helpers
// ---------------------------------------------------------------------------

pub fn uniform_vec(rng: &mut impl Rng, len: usize, bound: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}
