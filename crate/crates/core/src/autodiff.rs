//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and enough context to run its backward pass. Parameters enter the
//! tape as copies of their current values, so later parameter or gradient
//! mutation never changes recorded outputs. [`Graph::backward`] adds
//! `∂loss/∂param` into each reachable parameter's accumulator; gradients keep
//! accumulating until [`ParamStore::zero_grad`].

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, KERNEL_SIZE};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{matmul_dims, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Reshape(Var),
    Sum(Var),
    Depthwise {
        x: Var,
        kernel: Var,
        dilation: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Batch statistics flow into the gradient only in training mode.
        batch_stats: bool,
    },
    AvgPoolTime(Var),
    PooledAttention {
        query: Var,
        proj: Var,
        heads: usize,
        weights: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Running-statistic update produced by a training-mode batch norm, applied
/// with [`Graph::commit_running_stats`].
#[derive(Debug, Clone)]
pub struct RunningStatsUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

/// Statistics used to normalize a batch-norm input.
#[derive(Debug, Clone, Copy)]
pub enum Normalization<'a> {
    /// Per-channel mean and biased variance of the current input.
    Batch,
    /// Fixed statistics (running mean/variance in inference mode).
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    pending_stats: Vec<RunningStatsUpdate>,
}

/// Splits a channel-last tensor into (rows, channels).
fn rows_channels(t: &Tensor) -> (usize, usize) {
    let c = t.last_dim();
    (t.len() / c, c)
}

/// Interprets `T×C` as a batch of one and `B×T×C` as is.
fn batch_frames_channels(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [frames, channels] => Ok((1, frames, channels)),
        [batch, frames, channels] => Ok((batch, frames, channels)),
        ref s => Err(shape_err!("expected T×C or B×T×C, got {s:?}")),
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.value(a).shape(), self.value(b).shape())?;
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err!("operand shapes differ: {sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Relu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    /// Dilated depthwise convolution of `x` (`T×C` or `B×T×C`) with a
    /// `3×C` kernel, preserving the time length.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        if dilation < 1 {
            return Err(Error::Range(format!("dilation must be ≥ 1, got {dilation}")));
        }
        let (batch, frames, channels) = batch_frames_channels(self.value(x))?;
        let k = self.value(kernel);
        if k.shape() != [KERNEL_SIZE, channels] {
            return Err(shape_err!("depthwise kernel {:?} does not fit {channels} channels", k.shape()));
        }
        let out = kernels::depthwise_forward(self.value(x).data(), k.data(), batch, frames, channels, dilation);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Depthwise { x, kernel, dilation }))
    }

    /// Per-channel normalization of a channel-last tensor followed by the
    /// affine `gamma·x̂ + beta`. With [`Normalization::Batch`] the returned
    /// statistics are the batch mean and biased variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        norm: Normalization<'_>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let input = self.value(x);
        let (rows, channels) = rows_channels(input);
        for p in [gamma, beta] {
            if self.value(p).shape() != [channels] {
                return Err(shape_err!(
                    "batch-norm affine {:?} does not fit {channels} channels",
                    self.value(p).shape()
                ));
            }
        }
        let (mean, var, batch_stats) = match norm {
            Normalization::Batch => {
                if rows < 2 {
                    return Err(Error::InputValidation(
                        "training-mode batch norm needs more than one value per channel".into(),
                    ));
                }
                let mut mean = vec![0.0; channels];
                for row in input.data().chunks_exact(channels) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; channels];
                for row in input.data().chunks_exact(channels) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                (mean, var, true)
            }
            Normalization::Fixed { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(shape_err!("running statistics do not fit {channels} channels"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(input.len());
        let mut out = Vec::with_capacity(input.len());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for row in input.data().chunks_exact(channels) {
            for c in 0..channels {
                let h = (row[c] - mean[c]) * inv_std[c];
                xhat.push(h);
                out.push(g[c] * h + b[c]);
            }
        }
        let out = Tensor::new(input.shape().to_vec(), out)?;
        let var_out = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats });
        Ok((var_out, batch_stats.then_some((mean, var))))
    }

    /// Queues a running-statistics update for [`Graph::commit_running_stats`].
    pub fn defer_running_stats(&mut self, update: RunningStatsUpdate) {
        self.pending_stats.push(update);
    }

    /// Applies queued running-statistics updates:
    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn commit_running_stats(&mut self, store: &mut ParamStore) {
        for u in self.pending_stats.drain(..) {
            for (id, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
                let running = store.get_mut(id).value.data_mut();
                for (r, b) in running.iter_mut().zip(batch) {
                    *r = u.momentum * *r + (1.0 - u.momentum) * b;
                }
            }
        }
    }

    /// Mean over the time axis: `T×C → C` or `B×T×C → B×C`.
    pub fn avg_pool_time(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let (batch, frames, channels) = batch_frames_channels(input)?;
        let mut out = vec![0.0; batch * channels];
        let mut column = Vec::with_capacity(frames);
        for b in 0..batch {
            let item = &input.data()[b * frames * channels..(b + 1) * frames * channels];
            for c in 0..channels {
                // Summing in sorted order makes the mean independent of
                // frame order, bit for bit.
                column.clear();
                column.extend(item.iter().skip(c).step_by(channels).copied());
                column.sort_unstable_by(f64::total_cmp);
                out[b * channels + c] = column.iter().sum::<f64>() / frames as f64;
            }
        }
        let shape = if input.rank() == 2 { vec![channels] } else { vec![batch, channels] };
        Ok(self.push(Tensor::new(shape, out)?, Op::AvgPoolTime(x)))
    }

    /// Multi-head attention of one pooled query per batch item
    /// (`query: B×D`) over projected frames (`proj: B×T×D`) that serve as
    /// both keys and values. Output is the head concatenation, `B×D`.
    pub fn pooled_attention(&mut self, query: Var, proj: Var, heads: usize) -> Result<Var> {
        let (batch, frames, width) = match *self.value(proj).shape() {
            [b, t, d] => (b, t, d),
            ref s => return Err(shape_err!("projected frames must be B×T×D, got {s:?}")),
        };
        if self.value(query).shape() != [batch, width] {
            return Err(shape_err!(
                "query {:?} does not match frames {:?}",
                self.value(query).shape(),
                self.value(proj).shape()
            ));
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("width {width} is not divisible by {heads} heads")));
        }
        let (out, weights) = kernels::pooled_attention_forward(
            self.value(query).data(),
            self.value(proj).data(),
            batch,
            frames,
            width,
            heads,
        );
        let out = Tensor::new([batch, width], out)?;
        Ok(self.push(out, Op::PooledAttention { query, proj, heads, weights }))
    }

    /// Attention weights recorded by a [`Graph::pooled_attention`] node, laid
    /// out `batch×heads×frames`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::PooledAttention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (batch, classes) = match *self.value(logits).shape() {
            [b, k] => (b, k),
            ref s => return Err(shape_err!("logits must be B×K, got {s:?}")),
        };
        if labels.len() != batch {
            return Err(shape_err!("{} labels for a batch of {batch}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InputValidation(format!("label {bad} outside [0, {classes})")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_exact_mut(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_total = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss -= row[label] - max - log_total;
            kernels::softmax_in_place(row);
        }
        let out = Tensor::scalar(loss / batch as f64);
        Ok(self.push(out, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Back-propagates from a scalar `loss`, adding parameter gradients into
    /// `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let len = |v: Var| self.nodes[v.0].value.len();
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let acc = store.get_mut(*id).grad.data_mut();
                    for (a, d) in acc.iter_mut().zip(&g) {
                        *a += d;
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let ga = add_into(&mut grads[a.0], m * k);
                    kernels::matmul_a_bt_acc(&g, bv.data(), ga, m, k, n);
                    let gb = add_into(&mut grads[b.0], k * n);
                    kernels::matmul_at_b_acc(av.data(), &g, gb, m, k, n);
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        let acc = add_into(&mut grads[v.0], g.len());
                        acc.iter_mut().zip(&g).for_each(|(x, d)| *x += d);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga = add_into(&mut grads[a.0], g.len());
                    for ((x, d), o) in ga.iter_mut().zip(&g).zip(bv) {
                        *x += d * o;
                    }
                    let gb = add_into(&mut grads[b.0], g.len());
                    for ((x, d), o) in gb.iter_mut().zip(&g).zip(av) {
                        *x += d * o;
                    }
                }
                Op::Relu(a) => {
                    let av = self.value(*a).data();
                    let ga = add_into(&mut grads[a.0], g.len());
                    for ((x, d), v) in ga.iter_mut().zip(&g).zip(av) {
                        if *v > 0.0 {
                            *x += d;
                        }
                    }
                }
                Op::Reshape(a) | Op::Sum(a) => {
                    let n = len(*a);
                    let ga = add_into(&mut grads[a.0], n);
                    if matches!(node.op, Op::Sum(_)) {
                        ga.iter_mut().for_each(|x| *x += g[0]);
                    } else {
                        ga.iter_mut().zip(&g).for_each(|(x, d)| *x += d);
                    }
                }
                Op::Depthwise { x, kernel, dilation } => {
                    let xv = self.value(*x);
                    let (batch, frames, channels) = batch_frames_channels(xv)?;
                    let mut gx = grads[x.0].take().unwrap_or_else(|| vec![0.0; xv.len()]);
                    let mut gk = grads[kernel.0].take().unwrap_or_else(|| vec![0.0; KERNEL_SIZE * channels]);
                    kernels::depthwise_backward(
                        xv.data(),
                        self.value(*kernel).data(),
                        &g,
                        &mut gx,
                        &mut gk,
                        batch,
                        frames,
                        channels,
                        *dilation,
                    );
                    grads[x.0] = Some(gx);
                    grads[kernel.0] = Some(gk);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                    let channels = inv_std.len();
                    let rows = g.len() / channels;
                    let mut sum_g = vec![0.0; channels];
                    let mut sum_gx = vec![0.0; channels];
                    for (gr, hr) in g.chunks_exact(channels).zip(xhat.chunks_exact(channels)) {
                        for c in 0..channels {
                            sum_g[c] += gr[c];
                            sum_gx[c] += gr[c] * hr[c];
                        }
                    }
                    let gamma_v = self.value(*gamma).data();
                    let gxs = add_into(&mut grads[x.0], g.len());
                    let n = rows as f64;
                    for ((gr, hr), out) in
                        g.chunks_exact(channels).zip(xhat.chunks_exact(channels)).zip(gxs.chunks_exact_mut(channels))
                    {
                        for c in 0..channels {
                            let scale = gamma_v[c] * inv_std[c];
                            out[c] += if *batch_stats {
                                scale * (gr[c] - sum_g[c] / n - hr[c] * sum_gx[c] / n)
                            } else {
                                scale * gr[c]
                            };
                        }
                    }
                    let gg = add_into(&mut grads[gamma.0], channels);
                    gg.iter_mut().zip(&sum_gx).for_each(|(a, d)| *a += d);
                    let gb = add_into(&mut grads[beta.0], channels);
                    gb.iter_mut().zip(&sum_g).for_each(|(a, d)| *a += d);
                }
                Op::AvgPoolTime(x) => {
                    let xv = self.value(*x);
                    let (batch, frames, channels) = batch_frames_channels(xv)?;
                    let gx = add_into(&mut grads[x.0], xv.len());
                    let inv = 1.0 / frames as f64;
                    for b in 0..batch {
                        let gb = &g[b * channels..(b + 1) * channels];
                        for row in gx[b * frames * channels..(b + 1) * frames * channels].chunks_exact_mut(channels) {
                            row.iter_mut().zip(gb).for_each(|(a, d)| *a += d * inv);
                        }
                    }
                }
                Op::PooledAttention { query, proj, heads, weights } => {
                    let (qv, pv) = (self.value(*query), self.value(*proj));
                    let [batch, frames, width] = *pv.shape() else { unreachable!() };
                    let mut gq = grads[query.0].take().unwrap_or_else(|| vec![0.0; qv.len()]);
                    let mut gp = grads[proj.0].take().unwrap_or_else(|| vec![0.0; pv.len()]);
                    kernels::pooled_attention_backward(
                        qv.data(),
                        pv.data(),
                        weights,
                        &g,
                        &mut gq,
                        &mut gp,
                        batch,
                        frames,
                        width,
                        *heads,
                    );
                    grads[query.0] = Some(gq);
                    grads[proj.0] = Some(gp);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let classes = probs.len() / labels.len();
                    let scale = g[0] / labels.len() as f64;
                    let gl = add_into(&mut grads[logits.0], probs.len());
                    for ((out, p), &label) in gl.chunks_exact_mut(classes).zip(probs.chunks_exact(classes)).zip(labels)
                    {
                        for (c, (o, &pc)) in out.iter_mut().zip(p).enumerate() {
                            let target = if c == label { 1.0 } else { 0.0 };
                            *o += (pc - target) * scale;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
