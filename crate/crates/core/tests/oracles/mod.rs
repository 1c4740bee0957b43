//! Reference implementations used only by tests. Written from the textbook
//! definitions with plain loops; nothing here calls into the library's
//! numerics.
#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// `y[t][c] = Σ_j k[j][c] · x[t + (j-1)d][c]`, zero outside `0..T`.
pub fn depthwise(x: &[Vec<f64>], kernel: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
    let t_len = x.len();
    let c_len = x[0].len();
    let mut padded = vec![vec![0.0; c_len]; t_len + 2 * d];
    for t in 0..t_len {
        padded[t + d] = x[t].clone();
    }
    let mut y = vec![vec![0.0; c_len]; t_len];
    for t in 0..t_len {
        for c in 0..c_len {
            let mut acc = 0.0;
            for j in 0..3 {
                acc += kernel[j][c] * padded[t + j * d][c];
            }
            y[t][c] = acc;
        }
    }
    y
}

/// Row-by-matrix product with a running sum in ascending inner index.
pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| {
                    let mut acc = 0.0;
                    for (i, v) in row.iter().enumerate() {
                        acc += v * b[i][j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Dense 3-tap convolution with a full `3×C_in×C_out` kernel, padding `d`.
pub fn dense_conv(x: &[Vec<f64>], kernel: &[Vec<Vec<f64>>], d: usize) -> Vec<Vec<f64>> {
    let t_len = x.len();
    let c_out = kernel[0][0].len();
    let mut y = vec![vec![0.0; c_out]; t_len];
    for t in 0..t_len {
        for o in 0..c_out {
            let mut acc = 0.0;
            for (j, tap) in kernel.iter().enumerate() {
                let src = t as i64 + (j as i64 - 1) * d as i64;
                if src < 0 || src >= t_len as i64 {
                    continue;
                }
                for (i, w) in tap.iter().enumerate() {
                    acc += w[o] * x[src as usize][i];
                }
            }
            y[t][o] = acc;
        }
    }
    y
}

pub fn column_mean(x: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; x[0].len()];
    for row in x {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter().map(|v| v / x.len() as f64).collect()
}

/// Single-query attention: weights and weighted sum, by explicit loops.
pub fn attend(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let scale = (q.len() as f64).sqrt();
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| {
            let mut s = 0.0;
            for i in 0..q.len() {
                s += q[i] * k[i];
            }
            s / scale
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let mut out = vec![0.0; values[0].len()];
    for (w, v) in weights.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    (weights, out)
}

/// Pooled attention composed from mean pooling and per-head attention over
/// column slices of `w` (`D_u×D`). Returns the output and per-head weights.
pub fn pooled_attention(u: &[Vec<f64>], w: &[Vec<f64>], heads: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let width = w[0].len();
    let dh = width / heads;
    let proj = matmul(u, w);
    let query = matmul(&[column_mean(u)], w).remove(0);
    let mut out = Vec::with_capacity(width);
    let mut all_weights = Vec::new();
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let keys: Vec<Vec<f64>> = proj.iter().map(|r| r[cols.clone()].to_vec()).collect();
        let (weights, o) = attend(&query[cols], &keys, &keys);
        out.extend(o);
        all_weights.push(weights);
    }
    (out, all_weights)
}

/// Mean cross-entropy straight from `−log(exp(z_y) / Σ exp(z))`, shifted by
/// the row maximum.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        total += -(row[y] - m) + z.ln();
    }
    total / labels.len() as f64
}

/// Textbook MFCC: framing, symmetric Hamming, zero-padded naive DFT, power,
/// triangular mel filters, natural log with floor, orthonormal DCT-II.
pub struct MfccOracle {
    pub sample_rate: f64,
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub bands: usize,
    pub coeffs: usize,
    pub f_low: f64,
    pub f_high: f64,
    pub floor: f64,
}

impl Default for MfccOracle {
    fn default() -> Self {
        Self {
            sample_rate: 16_000.0,
            window: 480,
            hop: 160,
            n_fft: 512,
            bands: 40,
            coeffs: 40,
            f_low: 20.0,
            f_high: 7_800.0,
            floor: 1e-12,
        }
    }
}

impl MfccOracle {
    fn mel(f: f64) -> f64 {
        1127.0 * (1.0 + f / 700.0).ln()
    }

    fn inv_mel(m: f64) -> f64 {
        700.0 * ((m / 1127.0).exp() - 1.0)
    }

    fn filter_weight(&self, band: usize, f: f64) -> f64 {
        let step = (Self::mel(self.f_high) - Self::mel(self.f_low)) / (self.bands + 1) as f64;
        let edge = |i: usize| Self::inv_mel(Self::mel(self.f_low) + i as f64 * step);
        let (lo, mid, hi) = (edge(band), edge(band + 1), edge(band + 2));
        if f <= lo || f >= hi {
            0.0
        } else if f <= mid {
            (f - lo) / (mid - lo)
        } else {
            (hi - f) / (hi - mid)
        }
    }

    pub fn compute(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let frames = (x.len() - self.window) / self.hop + 1;
        let bins = self.n_fft / 2 + 1;
        let hamming: Vec<f64> =
            (0..self.window).map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (self.window - 1) as f64).cos()).collect();
        let weights: Vec<Vec<f64>> = (0..self.bands)
            .map(|b| {
                (0..bins).map(|k| self.filter_weight(b, k as f64 * self.sample_rate / self.n_fft as f64)).collect()
            })
            .collect();
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let frame: Vec<f64> = (0..self.window).map(|n| x[t * self.hop + n] * hamming[n]).collect();
            let power: Vec<f64> = (0..bins)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (n, v) in frame.iter().enumerate() {
                        let angle = -2.0 * PI * ((k * n) % self.n_fft) as f64 / self.n_fft as f64;
                        re += v * angle.cos();
                        im += v * angle.sin();
                    }
                    re * re + im * im
                })
                .collect();
            let logmel: Vec<f64> = weights
                .iter()
                .map(|w| w.iter().zip(&power).map(|(a, b)| a * b).sum::<f64>().max(self.floor).ln())
                .collect();
            let m = self.bands as f64;
            let row = (0..self.coeffs)
                .map(|k| {
                    let alpha = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
                    alpha
                        * logmel
                            .iter()
                            .enumerate()
                            .map(|(n, v)| v * (PI * k as f64 * (n as f64 + 0.5) / m).cos())
                            .sum::<f64>()
                })
                .collect();
            out.push(row);
        }
        out
    }
}

/// ROC point by direct counting.
pub fn count_rates(pos: &[f64], neg: &[f64], threshold: f64) -> (f64, f64) {
    let fa = neg.iter().filter(|&&s| s >= threshold).count() as f64 / neg.len() as f64;
    let fr = pos.iter().filter(|&&s| s < threshold).count() as f64 / pos.len() as f64;
    (fa, fr)
}

/// Reference Adam for one scalar parameter over a gradient sequence.
pub fn adam_scalar(theta0: f64, grads: &[f64], lr: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v, mut theta) = (0.0, 0.0, theta0);
    for (t, g) in grads.iter().enumerate() {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32 + 1));
        let vh = v / (1.0 - b2.powi(t as i32 + 1));
        theta -= lr * mh / (vh.sqrt() + eps);
    }
    theta
}

pub fn to_rows(data: &[f64], cols: usize) -> Vec<Vec<f64>> {
    data.chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

pub fn sine(freq: f64, amplitude: f64, phase: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| amplitude * (2.0 * PI * freq * i as f64 / 16_000.0 + phase).sin()).collect()
}
