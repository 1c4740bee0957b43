//! Central finite-difference checks of model gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::Result;
use crate::layers::Mode;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Entries checked per parameter tensor; `None` checks all of them.
    pub max_entries_per_tensor: Option<usize>,
    /// Floor of the relative-error denominator, so entries whose true
    /// gradient is below finite-difference noise are judged absolutely.
    pub scale_floor: f64,
    /// One-sided slopes further apart than this fraction trigger a tenfold
    /// smaller step. Refinement continues while the split persists, which
    /// marks a ReLU kink inside the step.
    pub kink_tolerance: f64,
    pub max_refinements: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_entries_per_tensor: None,
            scale_floor: 1e-5,
            kink_tolerance: 1e-4,
            max_refinements: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Step that produced `numeric`.
    pub epsilon: f64,
    /// One-sided slopes still disagreed at the smallest step.
    pub kink: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tensors: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |e| e.rel_error)
    }

    /// Entries whose step had to be shrunk.
    pub fn refined(&self, initial_epsilon: f64) -> usize {
        self.entries.iter().filter(|e| e.epsilon < initial_epsilon).count()
    }

    pub fn failures(&self, tolerance: f64) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| !(e.rel_error < tolerance)).collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Mean cross-entropy of `model` on one batch, without side effects.
pub fn batch_loss(model: &Model, inputs: &Tensor, labels: &[usize], mode: Mode) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(inputs.clone());
    let out = model.forward(&mut g, x, mode)?;
    let loss = g.softmax_cross_entropy(out.logits, labels)?;
    Ok(g.value(loss).data()[0])
}

/// Compares backprop gradients with central differences for every
/// trainable tensor. Parameter values are restored bit-exactly.
///
/// Steps across a ReLU kink are detected from loss values alone and
/// retried with a smaller step; the analytic value plays no part in
/// choosing the step.
pub fn check_model_gradients(
    model: &mut Model,
    inputs: &Tensor,
    labels: &[usize],
    mode: Mode,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    model.store_mut().zero_grad();
    let mut g = Graph::new();
    let x = g.input(inputs.clone());
    let out = model.forward(&mut g, x, mode)?;
    let loss = g.softmax_cross_entropy(out.logits, labels)?;
    g.backward(loss, model.store_mut())?;
    drop(g);

    let base = batch_loss(model, inputs, labels, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ids: Vec<_> = model.store().ids().filter(|&id| model.store().get(id).trainable).collect();
    let mut entries = Vec::new();
    for &id in &ids {
        let (name, len) = {
            let p = model.store().get(id);
            (p.name.clone(), p.value.len())
        };
        let indices: Vec<usize> = match config.max_entries_per_tensor {
            Some(k) if k < len => {
                let mut v = sample(&mut rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        for i in indices {
            let original = model.store().value(id).data()[i];
            // Central estimate and one-sided slope split at step `h`.
            let probe = |model: &mut Model, h: f64| -> Result<(f64, f64, f64)> {
                model.store_mut().get_mut(id).value.data_mut()[i] = original + h;
                let plus = batch_loss(model, inputs, labels, mode);
                model.store_mut().get_mut(id).value.data_mut()[i] = original - h;
                let minus = batch_loss(model, inputs, labels, mode);
                model.store_mut().get_mut(id).value.data_mut()[i] = original;
                let (plus, minus) = (plus?, minus?);
                let (right, left) = ((plus - base) / h, (base - minus) / h);
                Ok(((plus - minus) / (2.0 * h), (right - left).abs(), right.abs().max(left.abs())))
            };
            // Rounding in the loss bounds how well two slopes can agree.
            let noise = |h: f64| 8.0 * f64::EPSILON * base.abs().max(1.0) / h;
            let mut epsilon = config.epsilon;
            let (mut estimate, mut split, slope) = probe(model, epsilon)?;
            let scale = slope.max(config.scale_floor);
            let tolerance = |h: f64| config.kink_tolerance * scale + noise(h);
            let (numeric, kink) = if split <= tolerance(epsilon) {
                (estimate, false)
            } else {
                let mut found = None;
                for _ in 0..config.max_refinements {
                    let h = epsilon / 10.0;
                    let (finer, finer_split, _) = probe(model, h)?;
                    // Curvature splits the slopes in proportion to the step;
                    // a kink inside the step keeps them apart.
                    if finer_split <= tolerance(h) || finer_split < 0.5 * split {
                        let agree = (finer - estimate).abs() <= tolerance(h);
                        found = Some(if agree { (estimate, false) } else { (finer, false) });
                        if !agree {
                            epsilon = h;
                        }
                        break;
                    }
                    (epsilon, estimate, split) = (h, finer, finer_split);
                }
                found.unwrap_or((estimate, true))
            };
            let analytic = model.store().get(id).grad.data()[i];
            entries.push(GradCheckEntry {
                param: name.clone(),
                index: i,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric, config.scale_floor),
                epsilon,
                kink,
            });
        }
    }
    Ok(GradCheckReport { entries, tensors: ids.len() })
}
