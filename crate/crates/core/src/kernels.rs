//! Slice-level numeric kernels shared by the value-level operations and the
//! autodiff graph. Accumulation order is fixed so results are reproducible
//! bit for bit.

/// Taps of every depthwise filter.
pub const KERNEL_SIZE: usize = 3;

/// `C = A·B` with `A: m×k`, `B: k×n`. Each output sums its products in
/// increasing `k` order starting from zero.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&a_ik, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
    out
}

/// `out += G·Bᵀ` with `G: m×n`, `B: k×n`, `out: m×k`.
pub fn matmul_a_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * k);
    for (g_row, out_row) in g.chunks_exact(n).zip(out.chunks_exact_mut(k)) {
        for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(n)) {
            *o += dot(g_row, b_row);
        }
    }
    let _ = m;
}

/// `out += Aᵀ·G` with `A: m×k`, `G: m×n`, `out: k×n`.
pub fn matmul_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    for (a_row, g_row) in a.chunks_exact(k).zip(g.chunks_exact(n)) {
        for (&a_ik, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            for (o, &g_ij) in out_row.iter_mut().zip(g_row) {
                *o += a_ik * g_ij;
            }
        }
    }
    let _ = m;
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Source frame for tap `j` of output frame `t`, if it falls inside the
/// signal (outside is the zero padding).
#[inline]
fn tap_source(t: usize, j: usize, dilation: usize, frames: usize) -> Option<usize> {
    let offset = (j as isize - (KERNEL_SIZE as isize - 1) / 2) * dilation as isize;
    let src = t as isize + offset;
    (src >= 0 && (src as usize) < frames).then_some(src as usize)
}

/// Dilated depthwise convolution over `x: batch×frames×channels` with
/// `kernel: KERNEL_SIZE×channels`, zero padded by `dilation` on both sides.
pub fn depthwise_forward(
    x: &[f64],
    kernel: &[f64],
    batch: usize,
    frames: usize,
    channels: usize,
    dilation: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; batch * frames * channels];
    for b in 0..batch {
        let xb = &x[b * frames * channels..(b + 1) * frames * channels];
        let yb = &mut y[b * frames * channels..(b + 1) * frames * channels];
        for t in 0..frames {
            let out = &mut yb[t * channels..(t + 1) * channels];
            for j in 0..KERNEL_SIZE {
                let Some(src) = tap_source(t, j, dilation, frames) else { continue };
                let taps = &kernel[j * channels..(j + 1) * channels];
                let input = &xb[src * channels..(src + 1) * channels];
                for ((o, &w), &v) in out.iter_mut().zip(taps).zip(input) {
                    *o += w * v;
                }
            }
        }
    }
    y
}

/// Accumulates input and kernel gradients of [`depthwise_forward`].
#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward(
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    grad_x: &mut [f64],
    grad_kernel: &mut [f64],
    batch: usize,
    frames: usize,
    channels: usize,
    dilation: usize,
) {
    for b in 0..batch {
        let base = b * frames * channels;
        for t in 0..frames {
            let g = &grad_out[base + t * channels..base + (t + 1) * channels];
            for j in 0..KERNEL_SIZE {
                let Some(src) = tap_source(t, j, dilation, frames) else { continue };
                let row = base + src * channels;
                let taps = &kernel[j * channels..(j + 1) * channels];
                let dtaps = &mut grad_kernel[j * channels..(j + 1) * channels];
                for c in 0..channels {
                    grad_x[row + c] += taps[c] * g[c];
                    dtaps[c] += x[row + c] * g[c];
                }
            }
        }
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Temporally pooled attention core. `query: batch×width` is the pooled
/// (already projected) query, `proj: batch×frames×width` are the projected
/// frames serving as keys and values. Heads are contiguous column slices of
/// width `width / heads`. Returns the concatenated head outputs
/// (`batch×width`) and the attention weights (`batch×heads×frames`).
pub fn pooled_attention_forward(
    query: &[f64],
    proj: &[f64],
    batch: usize,
    frames: usize,
    width: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = vec![0.0; batch * width];
    let mut weights = vec![0.0; batch * heads * frames];
    for b in 0..batch {
        let q = &query[b * width..(b + 1) * width];
        let p = &proj[b * frames * width..(b + 1) * frames * width];
        for h in 0..heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let w = &mut weights[(b * heads + h) * frames..(b * heads + h + 1) * frames];
            for (t, wt) in w.iter_mut().enumerate() {
                *wt = dot(&q[cols.clone()], &p[t * width..][cols.clone()]) * scale;
            }
            softmax_in_place(w);
            let o = &mut out[b * width..][cols.clone()];
            for (t, &wt) in w.iter().enumerate() {
                for (oj, &pj) in o.iter_mut().zip(&p[t * width..][cols.clone()]) {
                    *oj += wt * pj;
                }
            }
        }
    }
    (out, weights)
}

/// Gradients of [`pooled_attention_forward`] with respect to the query and
/// the projected frames, accumulated into `grad_query` and `grad_proj`.
#[allow(clippy::too_many_arguments)]
pub fn pooled_attention_backward(
    query: &[f64],
    proj: &[f64],
    weights: &[f64],
    grad_out: &[f64],
    grad_query: &mut [f64],
    grad_proj: &mut [f64],
    batch: usize,
    frames: usize,
    width: usize,
    heads: usize,
) {
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut grad_w = vec![0.0; frames];
    for b in 0..batch {
        let q = &query[b * width..(b + 1) * width];
        let p = &proj[b * frames * width..(b + 1) * frames * width];
        let go = &grad_out[b * width..(b + 1) * width];
        for h in 0..heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let w = &weights[(b * heads + h) * frames..(b * heads + h + 1) * frames];
            let go_h = &go[cols.clone()];
            // output = Σ_t w_t p_t, so dL/dw_t = <go, p_t> and dL/dp_t += w_t go
            let mut expected = 0.0;
            for t in 0..frames {
                grad_w[t] = dot(go_h, &p[t * width..][cols.clone()]);
                expected += w[t] * grad_w[t];
            }
            for t in 0..frames {
                let grad_score = w[t] * (grad_w[t] - expected) * scale;
                let row = b * frames * width + t * width;
                for (i, j) in cols.clone().enumerate() {
                    grad_proj[row + j] += w[t] * go_h[i] + grad_score * q[j];
                    grad_query[b * width + j] += grad_score * p[t * width + j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilated_taps_skip_padding() {
        assert_eq!(tap_source(0, 0, 1, 4), None);
        assert_eq!(tap_source(0, 2, 2, 4), Some(2));
        assert_eq!(tap_source(3, 2, 1, 4), None);
    }

    #[test]
    fn softmax_is_normalized_and_stable() {
        let mut v = vec![1000.0, 1000.0, 999.0];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(v[0] == v[1] && v[0] > v[2]);
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2×3
        let g: Vec<f64> = (0..8).map(|v| (v as f64).sin()).collect(); // 2×4
        let mut at_g = vec![0.0; 12];
        matmul_at_b_acc(&a, &g, &mut at_g, 2, 3, 4);
        assert_eq!(at_g, matmul(&transpose(&a, 2, 3), &g, 3, 2, 4));
        let b: Vec<f64> = (0..12).map(|v| (v as f64).cos()).collect(); // 3×4
        let mut g_bt = vec![0.0; 6];
        matmul_a_bt_acc(&g, &b, &mut g_bt, 2, 3, 4);
        let expect = matmul(&g, &transpose(&b, 3, 4), 2, 4, 3);
        for (x, y) in g_bt.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
