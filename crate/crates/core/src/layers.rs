//! Layer vocabulary of the separable temporal convolution network.
//!
//! All tensors are channel-last (`T×C` or `B×T×C`). No convolution or fully
//! connected layer carries a bias; batch norm supplies the only shift.

use rand::Rng;

use crate::autodiff::{Graph, Normalization, RunningStatsUpdate, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels::KERNEL_SIZE;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Uniform `[-limit, limit)` tensor.
pub(crate) fn uniform(shape: &[usize], limit: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// He-uniform initialization limit for a given fan-in.
pub(crate) fn he_limit(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// One length-3 filter per channel, dilated, stride 1, zero padded by the
/// dilation on both sides so the time length is preserved.
#[derive(Debug, Clone)]
pub struct DepthwiseConvLayer {
    pub kernel: ParamId,
    pub channels: usize,
    pub dilation: usize,
}

impl DepthwiseConvLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dilation < 1 {
            return Err(Error::Range(format!("dilation must be ≥ 1, got {dilation}")));
        }
        let init = uniform(&[KERNEL_SIZE, channels], he_limit(KERNEL_SIZE), rng)?;
        let kernel = store.add(format!("{name}/kernel"), init, true)?;
        Ok(Self { kernel, channels, dilation })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernel);
        g.depthwise_conv(x, k, self.dilation)
    }
}

/// 1×1 convolution: the same `C_in×C_out` map applied at every frame.
#[derive(Debug, Clone)]
pub struct PointwiseConvLayer {
    pub weight: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl PointwiseConvLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let init = uniform(&[in_channels, out_channels], he_limit(in_channels), rng)?;
        let weight = store.add(format!("{name}/weight"), init, true)?;
        Ok(Self { weight, in_channels, out_channels })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        linear_over_last_axis(g, store, x, self.weight)
    }
}

/// Applies `x·W` to the last axis of a rank-2 or rank-3 input.
pub(crate) fn linear_over_last_axis(g: &mut Graph, store: &ParamStore, x: Var, weight: ParamId) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let w = g.param(store, weight);
    let (c_in, c_out) = match *store.value(weight).shape() {
        [i, o] => (i, o),
        ref s => return Err(shape_err!("weight must be a matrix, got {s:?}")),
    };
    if shape.last() != Some(&c_in) {
        return Err(shape_err!("input {shape:?} does not end in {c_in} channels"));
    }
    let rows = g.value(x).len() / c_in;
    let flat = g.reshape(x, [rows, c_in])?;
    let y = g.matmul(flat, w)?;
    let mut out_shape = shape;
    *out_shape.last_mut().expect("non-scalar") = c_out;
    g.reshape(y, out_shape)
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormLayer {
    pub const EPSILON: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.9;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let ones = Tensor::full([channels], 1.0)?;
        let zeros = Tensor::zeros([channels])?;
        Ok(Self {
            gamma: store.add(format!("{name}/gamma"), ones.clone(), true)?,
            beta: store.add(format!("{name}/beta"), zeros.clone(), true)?,
            running_mean: store.add(format!("{name}/running_mean"), zeros, false)?,
            running_var: store.add(format!("{name}/running_var"), ones, false)?,
            channels,
            epsilon: Self::EPSILON,
            momentum: Self::MOMENTUM,
        })
    }

    /// Training mode normalizes with batch statistics and queues a running
    /// statistics update on the graph; inference mode uses the running
    /// statistics.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, Normalization::Batch, self.epsilon)?;
                let (batch_mean, batch_var) = stats.expect("batch statistics");
                g.defer_running_stats(RunningStatsUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean,
                    batch_var,
                    momentum: self.momentum,
                });
                Ok(y)
            }
            Mode::Infer => {
                let norm = Normalization::Fixed {
                    mean: store.value(self.running_mean).data(),
                    var: store.value(self.running_var).data(),
                };
                Ok(g.batch_norm(x, gamma, beta, norm, self.epsilon)?.0)
            }
        }
    }
}

/// Depthwise conv → BN → ReLU → pointwise conv → BN (→ ReLU).
#[derive(Debug, Clone)]
pub struct SeparableUnit {
    pub depthwise: DepthwiseConvLayer,
    pub depthwise_norm: BatchNormLayer,
    pub pointwise: PointwiseConvLayer,
    pub pointwise_norm: BatchNormLayer,
}

impl SeparableUnit {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            depthwise: DepthwiseConvLayer::new(store, &format!("{name}/dw"), in_channels, dilation, rng)?,
            depthwise_norm: BatchNormLayer::new(store, &format!("{name}/dw_bn"), in_channels)?,
            pointwise: PointwiseConvLayer::new(store, &format!("{name}/pw"), in_channels, out_channels, rng)?,
            pointwise_norm: BatchNormLayer::new(store, &format!("{name}/pw_bn"), out_channels)?,
        })
    }

    /// Runs the unit; the trailing ReLU is skipped when `final_relu` is off
    /// so a residual block can add its shortcut first.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode, final_relu: bool) -> Result<Var> {
        let h = self.depthwise.forward(g, store, x)?;
        let h = self.depthwise_norm.forward(g, store, h, mode)?;
        let h = g.relu(h);
        let h = self.pointwise.forward(g, store, h)?;
        let h = self.pointwise_norm.forward(g, store, h, mode)?;
        Ok(if final_relu { g.relu(h) } else { h })
    }
}

/// Two separable units with an identity shortcut: `ReLU(x + F(x))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub first: SeparableUnit,
    pub second: SeparableUnit,
    pub channels: usize,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        dilations: [usize; 2],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            first: SeparableUnit::new(store, &format!("{name}/unit0"), channels, channels, dilations[0], rng)?,
            second: SeparableUnit::new(store, &format!("{name}/unit1"), channels, channels, dilations[1], rng)?,
            channels,
        })
    }

    pub fn dilations(&self) -> [usize; 2] {
        [self.first.depthwise.dilation, self.second.depthwise.dilation]
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let c = g.value(x).last_dim();
        if c != self.channels {
            return Err(shape_err!("block expects {} channels, got {c}", self.channels));
        }
        let h = self.first.forward(g, store, x, mode, true)?;
        let h = self.second.forward(g, store, h, mode, false)?;
        let sum = g.add(x, h)?;
        Ok(g.relu(sum))
    }
}

// Value-level entry points. Each runs the same graph op on a throwaway tape.

/// `y[t,c] = Σ_j kernel[j,c]·x̃[t+(j−1)·d, c]` with `x̃` zero padded by `d`.
pub fn depthwise_conv(x: &Tensor, kernel: &Tensor, dilation: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xv, kv) = (g.input(x.clone()), g.input(kernel.clone()));
    let y = g.depthwise_conv(xv, kv, dilation)?;
    Ok(g.value(y).clone())
}

/// `y = x·weight` applied per frame.
pub fn pointwise_conv(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let rows = x.len() / x.last_dim();
    if weight.rank() != 2 || weight.shape()[0] != x.last_dim() {
        return Err(shape_err!("cannot apply {:?} to {:?}", weight.shape(), x.shape()));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-scalar") = weight.shape()[1];
    x.clone().reshape([rows, x.last_dim()])?.matmul(weight)?.reshape(shape)
}

/// Batch norm of a channel-last tensor. In training mode the layer's running
/// statistics are updated.
pub fn batch_norm(x: &Tensor, layer: &BatchNormLayer, store: &mut ParamStore, mode: Mode) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = layer.forward(&mut g, store, xv, mode)?;
    g.commit_running_stats(store);
    Ok(g.value(y).clone())
}

/// Column mean over time: `T×C → C` (or `B×T×C → B×C`).
pub fn avg_pool_time(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = g.avg_pool_time(xv)?;
    Ok(g.value(y).clone())
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Mean softmax cross-entropy of `B×K` logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.input(logits.clone());
    let loss = g.softmax_cross_entropy(l, labels)?;
    Ok(g.value(loss).data()[0])
}

/// Row-wise softmax of a `B×K` tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let k = out.last_dim();
    for row in out.data_mut().chunks_exact_mut(k) {
        crate::kernels::softmax_in_place(row);
    }
    out
}

pub fn residual_block_forward(x: &Tensor, block: &ResidualBlock, store: &mut ParamStore, mode: Mode) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = block.forward(&mut g, store, xv, mode)?;
    g.commit_running_stats(store);
    Ok(g.value(y).clone())
}
