use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FeatureSet, SplitManifest, NOISE_DIR};
use crate::dsp::{self, AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Opt-in waveform augmentation: a random time shift with zero fill, then
/// background noise mixed in with some probability.
#[derive(Debug, Clone)]
pub struct Augmentation {
    pub max_shift_samples: usize,
    pub noise_probability: f64,
    pub max_noise_gain: f64,
    noise: Vec<Vec<f64>>,
}

impl Augmentation {
    pub fn new(max_shift_samples: usize, noise_probability: f64, max_noise_gain: f64, noise: Vec<Vec<f64>>) -> Self {
        Self { max_shift_samples, noise_probability, max_noise_gain, noise }
    }

    /// ±100 ms shifts and up to 0.1 gain of the dataset's background noise.
    pub fn standard(manifest: &SplitManifest) -> Result<Self> {
        let dir = manifest.root.join(NOISE_DIR);
        let mut noise = Vec::new();
        if dir.is_dir() {
            let mut files: Vec<_> = std::fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            files.sort();
            for path in files {
                noise.push(dsp::read_wav(&path)?.samples);
            }
        }
        Ok(Self::new(SAMPLE_RATE as usize / 10, 0.8, 0.1, noise))
    }

    pub fn apply(&self, clip: &AudioClip, rng: &mut ChaCha8Rng) -> Result<AudioClip> {
        let n = clip.len();
        let max = self.max_shift_samples as i64;
        let shift = if max > 0 { rng.gen_range(-max..=max) } else { 0 };
        let mut out = vec![0.0; n];
        for (i, slot) in out.iter_mut().enumerate() {
            let src = i as i64 - shift;
            if (0..n as i64).contains(&src) {
                *slot = clip.samples()[src as usize];
            }
        }
        if !self.noise.is_empty() && rng.gen_bool(self.noise_probability.clamp(0.0, 1.0)) {
            let noise = &self.noise[rng.gen_range(0..self.noise.len())];
            let offset = rng.gen_range(0..=noise.len().saturating_sub(n));
            let gain = rng.gen_range(0.0..=self.max_noise_gain);
            for (slot, v) in out.iter_mut().zip(noise.iter().skip(offset)) {
                *slot = (*slot + gain * v).clamp(-1.0, 1.0);
            }
        }
        AudioClip::new(out, clip.sample_rate())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `B×T×F` features.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Positions of the examples in the source set.
    pub indices: Vec<usize>,
}

/// An ordered stream of batches over one pass of a [`FeatureSet`].
#[derive(Debug)]
pub struct Batches<'a> {
    set: &'a FeatureSet,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    augmentation: Option<(&'a Augmentation, ChaCha8Rng)>,
}

/// Shuffled batches for one epoch. The order depends only on
/// `(seed, epoch)`; the last batch may be short.
pub fn make_batches(set: &FeatureSet, batch_size: usize, seed: u64, epoch: u64) -> Result<Batches<'_>> {
    let mut batches = Batches::sequential(set, batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    batches.order.shuffle(&mut rng);
    Ok(batches)
}

impl<'a> Batches<'a> {
    /// Batches in dataset order, for evaluation.
    pub fn sequential(set: &'a FeatureSet, batch_size: usize) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::Config("cannot batch an empty split".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self { set, order: (0..set.len()).collect(), batch_size, cursor: 0, augmentation: None })
    }

    /// Recomputes features from augmented audio. Needs a set loaded with
    /// `keep_audio`.
    pub fn with_augmentation(mut self, augmentation: &'a Augmentation, seed: u64, epoch: u64) -> Result<Self> {
        if self.set.audio().is_none() {
            return Err(Error::Config("augmentation needs audio; load with keep_audio".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_a5a5);
        rng.set_stream(epoch);
        self.augmentation = Some((augmentation, rng));
        Ok(self)
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn batch_count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    fn build(&mut self, indices: Vec<usize>) -> Result<Batch> {
        let labels = indices.iter().map(|&i| self.set.labels()[i]).collect();
        let inputs = match &mut self.augmentation {
            None => self.set.gather(&indices)?,
            Some((aug, rng)) => {
                let audio = self.set.audio().expect("checked in with_augmentation");
                let mut data = Vec::new();
                for &i in &indices {
                    let clip = aug.apply(&audio[i], rng)?;
                    data.extend(dsp::extract_features(&clip)?.values());
                }
                Tensor::new([indices.len(), self.set.frames(), self.set.coeffs()], data)?
            }
        };
        Ok(Batch { inputs, labels, indices })
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(self.build(indices))
    }
}
