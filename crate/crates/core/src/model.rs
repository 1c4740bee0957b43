//! Network variants and their construction.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::PooledAttention;
use crate::autodiff::{Graph, Var};
use crate::dsp::{FRAMES_PER_CLIP, MFCC_COEFFS};
use crate::error::{shape_err, Error, Result};
use crate::layers::{he_limit, softmax_rows, uniform, Mode, ResidualBlock, SeparableUnit};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Number of output classes: ten keywords, unknown, silence.
pub const NUM_CLASSES: usize = 12;

/// The four published network variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Base model with plain average pooling instead of attention.
    StNet4,
    StAttNet4,
    StAttNet4Wide,
    StAttNet7,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::StNet4, Variant::StAttNet4, Variant::StAttNet4Wide, Variant::StAttNet7];

    pub fn name(self) -> &'static str {
        match self {
            Variant::StNet4 => "ST-Net4",
            Variant::StAttNet4 => "ST-AttNet4",
            Variant::StAttNet4Wide => "ST-AttNet4-wide",
            Variant::StAttNet7 => "ST-AttNet7",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Variant::name).join(", ")
    }

    pub fn spec(self) -> ModelSpec {
        let (channels, plain_blocks, reduction) = match self {
            Variant::StNet4 => (45, 0, Reduction::AvgPool),
            Variant::StAttNet4 => (45, 0, Reduction::PooledAttention),
            Variant::StAttNet4Wide => (65, 0, Reduction::PooledAttention),
            Variant::StAttNet7 => (45, 3, Reduction::PooledAttention),
        };
        ModelSpec {
            name: self.name().to_string(),
            channels,
            dilated_blocks: 4,
            plain_blocks,
            heads: 5,
            reduction,
            num_classes: NUM_CLASSES,
            frames: FRAMES_PER_CLIP,
            features: MFCC_COEFFS,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; valid names: {}", Self::valid_names())))
    }
}

/// How the final `T×C` feature map is reduced to one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    AvgPool,
    PooledAttention,
}

/// Declarative description of a network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub channels: usize,
    /// Residual blocks whose depthwise layers follow the exponential
    /// dilation schedule.
    pub dilated_blocks: usize,
    /// Residual blocks appended after the dilated ones, all with dilation 1.
    pub plain_blocks: usize,
    pub heads: usize,
    pub reduction: Reduction,
    pub num_classes: usize,
    pub frames: usize,
    pub features: usize,
}

impl ModelSpec {
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(name.parse::<Variant>()?.spec())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("num_classes", self.num_classes),
            ("frames", self.frames),
            ("features", self.features),
        ];
        if let Some((field, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{field} must be positive")));
        }
        if self.reduction == Reduction::PooledAttention
            && (self.heads == 0 || !self.channels.is_multiple_of(self.heads))
        {
            return Err(Error::Config(format!("{} channels cannot be split into {} heads", self.channels, self.heads)));
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.dilated_blocks + self.plain_blocks
    }

    /// Dilation of every depthwise layer inside the residual blocks, in
    /// order: `2^⌊i/3⌋` for layer `i` of the dilated blocks, then 1.
    pub fn block_dilations(&self) -> Vec<usize> {
        let mut d = dilation_schedule(2 * self.dilated_blocks);
        d.extend(std::iter::repeat_n(1, 2 * self.plain_blocks));
        d
    }
}

/// `2^⌊i/3⌋` for `i = 0..layers`.
pub fn dilation_schedule(layers: usize) -> Vec<usize> {
    (0..layers).map(|i| 1 << (i / 3)).collect()
}

#[derive(Debug, Clone)]
pub enum ReductionLayer {
    AvgPool,
    Attention(PooledAttention),
}

/// Output of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub logits: Var,
    /// The attention node, when the model has one.
    pub attention: Option<Var>,
}

/// A built network together with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    store: ParamStore,
    input_conv: SeparableUnit,
    blocks: Vec<ResidualBlock>,
    reduction: ReductionLayer,
    classifier: ParamId,
}

impl Model {
    /// Builds `spec` with He-uniform weights drawn from a ChaCha stream
    /// seeded by `seed`. Batch-norm scales start at 1, shifts at 0.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let input_conv = SeparableUnit::new(&mut store, "input", spec.features, spec.channels, 1, &mut rng)?;
        let dilations = spec.block_dilations();
        let blocks = dilations
            .chunks_exact(2)
            .enumerate()
            .map(|(i, d)| ResidualBlock::new(&mut store, &format!("block{i}"), spec.channels, [d[0], d[1]], &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let reduction = match spec.reduction {
            Reduction::AvgPool => ReductionLayer::AvgPool,
            Reduction::PooledAttention => ReductionLayer::Attention(PooledAttention::new(
                &mut store,
                "attention",
                spec.channels,
                spec.channels,
                spec.heads,
                &mut rng,
            )?),
        };
        let init = uniform(&[spec.channels, spec.num_classes], he_limit(spec.channels), &mut rng)?;
        let classifier = store.add("classifier/weight", init, true)?;
        Ok(Self { spec: spec.clone(), store, input_conv, blocks, reduction, classifier })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    pub fn input_conv(&self) -> &SeparableUnit {
        &self.input_conv
    }

    pub fn reduction(&self) -> &ReductionLayer {
        &self.reduction
    }

    pub fn attention(&self) -> Option<&PooledAttention> {
        match &self.reduction {
            ReductionLayer::Attention(a) => Some(a),
            ReductionLayer::AvgPool => None,
        }
    }

    pub fn classifier(&self) -> ParamId {
        self.classifier
    }

    /// Records the network on `g`. `x` is `B×T×F`; the result holds `B×K`
    /// logits.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Forward> {
        match *g.value(x).shape() {
            [_, _, f] if f == self.spec.features => {}
            ref s => return Err(shape_err!("model expects B×T×{} input, got {s:?}", self.spec.features)),
        }
        let store = &self.store;
        let mut h = self.input_conv.forward(g, store, x, mode, true)?;
        for block in &self.blocks {
            h = block.forward(g, store, h, mode)?;
        }
        let (pooled, attention) = match &self.reduction {
            ReductionLayer::AvgPool => (g.avg_pool_time(h)?, None),
            ReductionLayer::Attention(att) => {
                let out = att.forward(g, store, h)?;
                (out, Some(out))
            }
        };
        let w = g.param(store, self.classifier);
        let logits = g.matmul(pooled, w)?;
        Ok(Forward { logits, attention })
    }

    /// Class posteriors (`B×K`) in inference mode.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let out = self.forward(&mut g, x, Mode::Infer)?;
        Ok(softmax_rows(g.value(out.logits)))
    }

    /// Posteriors for one `T×F` feature map plus, for attention models, the
    /// `heads×T` attention weights.
    pub fn predict_one(&self, features: &Tensor) -> Result<(Vec<f64>, Option<Tensor>)> {
        let (t, f) = match *features.shape() {
            [t, f] => (t, f),
            ref s => return Err(shape_err!("expected T×F features, got {s:?}")),
        };
        let mut g = Graph::new();
        let x = g.input(features.clone().reshape([1, t, f])?);
        let out = self.forward(&mut g, x, Mode::Infer)?;
        let probs = softmax_rows(g.value(out.logits)).into_data();
        let weights = match (out.attention, self.attention()) {
            (Some(node), Some(att)) => {
                let w = g.attention_weights(node).expect("attention node").to_vec();
                Some(Tensor::new([att.heads, t], w)?)
            }
            _ => None,
        };
        Ok((probs, weights))
    }

    /// Number of scalar weights in convolution, attention and classifier
    /// layers, i.e. everything but batch-norm parameters and buffers.
    pub fn weight_count(&self) -> usize {
        self.store.iter().filter(|p| p.trainable && !is_norm_param(&p.name)).map(|p| p.value.len()).sum()
    }
}

pub(crate) fn is_norm_param(name: &str) -> bool {
    name.rsplit('/').next().is_some_and(|leaf| matches!(leaf, "gamma" | "beta" | "running_mean" | "running_var"))
}
