//! Temporally pooled attention.
//!
//! The time-averaged input, projected by a head's weight matrix, is the
//! single query of that head. The same matrix projects every frame into the
//! keys and values. Each head yields one `D/n` vector; the module output is
//! their concatenation, so a `T×D_u` sequence reduces to one `D` vector.
//!
//! Heads are stored as column slices of one `D_u×D` matrix.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, softmax_in_place};
use crate::layers::{linear_over_last_axis, uniform};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Scaled dot-product attention, `softmax(q·kᵀ/√d_k)·v`, with
/// `q: T_q×d_k`, `k: T×d_k`, `v: T×d_v`.
pub fn self_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (tq, dk) = matrix_dims(q)?;
    let (t, dk2) = matrix_dims(k)?;
    let (t2, dv) = matrix_dims(v)?;
    if dk != dk2 {
        return Err(shape_err!("query width {dk} differs from key width {dk2}"));
    }
    if t != t2 {
        return Err(shape_err!("{t} keys but {t2} values"));
    }
    let mut scores = q.matmul(&k.transpose()?)?;
    let scale = 1.0 / (dk as f64).sqrt();
    for row in scores.data_mut().chunks_exact_mut(t) {
        row.iter_mut().for_each(|s| *s *= scale);
        softmax_in_place(row);
    }
    let out = scores.matmul(v)?;
    debug_assert_eq!(out.shape(), [tq, dv]);
    Ok(out)
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(shape_err!("expected a matrix, got {s:?}")),
    }
}

/// Multi-head temporally pooled attention with a shared query/key/value
/// projection per head and no output projection.
#[derive(Debug, Clone)]
pub struct PooledAttention {
    /// `D_u×D`; head `i` owns columns `i·D/n .. (i+1)·D/n`.
    pub weight: ParamId,
    pub input_width: usize,
    pub width: usize,
    pub heads: usize,
}

impl PooledAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_width: usize,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!("attention width {width} is not divisible by {heads} heads")));
        }
        let limit = (6.0 / (input_width + width) as f64).sqrt();
        let init = uniform(&[input_width, width], limit, rng)?;
        let weight = store.add(format!("{name}/weight"), init, true)?;
        Ok(Self { weight, input_width, width, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Projection matrix of one head, `D_u×(D/n)`.
    pub fn head_weight(&self, store: &ParamStore, head: usize) -> Result<Tensor> {
        if head >= self.heads {
            return Err(Error::Range(format!("head {head} of {}", self.heads)));
        }
        let w = store.value(self.weight);
        let hd = self.head_dim();
        let data =
            w.data().chunks_exact(self.width).flat_map(|row| row[head * hd..(head + 1) * hd].iter().copied()).collect();
        Tensor::new([self.input_width, hd], data)
    }

    /// `B×T×D_u → B×D`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, u: Var) -> Result<Var> {
        match *g.value(u).shape() {
            [_, _, d] if d == self.input_width => {}
            ref s => return Err(shape_err!("attention expects B×T×{}, got {s:?}", self.input_width)),
        }
        let pooled = g.avg_pool_time(u)?;
        let w = g.param(store, self.weight);
        let query = g.matmul(pooled, w)?;
        let proj = linear_over_last_axis(g, store, u, self.weight)?;
        g.pooled_attention(query, proj, self.heads)
    }
}

/// Reduces `u: T×D_u` to the concatenated head outputs, a length-`D` vector.
pub fn pooled_attention(u: &Tensor, module: &PooledAttention, store: &ParamStore) -> Result<Tensor> {
    let (g, out) = run_single(u, module, store)?;
    g.value(out).clone().reshape([module.width])
}

/// Softmax weights the pooled query of `head` assigns to each of the `T`
/// frames of `u`.
pub fn attention_weights(u: &Tensor, module: &PooledAttention, store: &ParamStore, head: usize) -> Result<Tensor> {
    if head >= module.heads {
        return Err(Error::Range(format!("head {head} of {}", module.heads)));
    }
    let (g, out) = run_single(u, module, store)?;
    let frames = u.shape()[0];
    let w = g.attention_weights(out).expect("attention node");
    Tensor::new([frames], w[head * frames..(head + 1) * frames].to_vec())
}

/// All heads' weights for one sequence, `heads×T`.
pub fn all_attention_weights(u: &Tensor, module: &PooledAttention, store: &ParamStore) -> Result<Tensor> {
    let (g, out) = run_single(u, module, store)?;
    let frames = u.shape()[0];
    Tensor::new([module.heads, frames], g.attention_weights(out).expect("attention node").to_vec())
}

fn run_single(u: &Tensor, module: &PooledAttention, store: &ParamStore) -> Result<(Graph, Var)> {
    let (frames, width) = matrix_dims(u)?;
    let mut g = Graph::new();
    let x = g.input(u.clone().reshape([1, frames, width])?);
    let out = module.forward(&mut g, store, x)?;
    Ok((g, out))
}

/// Dot products of the pooled query with each projected frame; exposed for
/// diagnostics alongside [`attention_weights`].
pub fn attention_scores(u: &Tensor, module: &PooledAttention, store: &ParamStore, head: usize) -> Result<Vec<f64>> {
    let w = module.head_weight(store, head)?;
    let proj = u.matmul(&w)?;
    let pooled = crate::layers::avg_pool_time(u)?.reshape([1, module.input_width])?;
    let query = pooled.matmul(&w)?;
    let scale = 1.0 / (module.head_dim() as f64).sqrt();
    Ok((0..proj.shape()[0]).map(|t| kernels::dot(query.data(), proj.row(t)) * scale).collect())
}
