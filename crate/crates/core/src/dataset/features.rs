use std::collections::HashMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{Entry, Source, SplitManifest};
use crate::dsp::{self, AudioClip, FeatureMap, FRAMES_PER_CLIP, MFCC_COEFFS, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Directory for per-example feature files; created on demand.
    pub cache_dir: Option<PathBuf>,
    /// Extraction threads; 0 uses the available parallelism.
    pub workers: usize,
    /// Keep the one-second clips in memory, needed for augmentation.
    pub keep_audio: bool,
}

/// Features and labels for a list of examples, stored at cache precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    frames: usize,
    coeffs: usize,
    values: Vec<f32>,
    labels: Vec<usize>,
    keys: Vec<String>,
    audio: Option<Vec<AudioClip>>,
}

impl FeatureSet {
    pub fn from_maps(maps: &[FeatureMap], labels: Vec<usize>, keys: Vec<String>) -> Result<Self> {
        if maps.len() != labels.len() || maps.len() != keys.len() {
            return Err(Error::InputValidation(format!(
                "{} feature maps, {} labels, {} keys",
                maps.len(),
                labels.len(),
                keys.len()
            )));
        }
        let (frames, coeffs) = maps.first().map_or((FRAMES_PER_CLIP, MFCC_COEFFS), |m| (m.frames(), m.coeffs()));
        let mut values = Vec::with_capacity(maps.len() * frames * coeffs);
        for (m, key) in maps.iter().zip(&keys) {
            if (m.frames(), m.coeffs()) != (frames, coeffs) {
                return Err(Error::Shape(format!(
                    "{key}: {}×{} features among {frames}×{coeffs}",
                    m.frames(),
                    m.coeffs()
                )));
            }
            values.extend(m.values().iter().map(|&v| v as f32));
        }
        Ok(Self { frames, coeffs, values, labels, keys, audio: None })
    }

    /// Extracts (or reads from cache) features for `entries`.
    pub fn load(manifest: &SplitManifest, entries: &[Entry], options: &LoadOptions) -> Result<Self> {
        if let Some(dir) = &options.cache_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let noise = load_noise(&manifest.root, entries)?;
        let workers = match options.workers {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
        .clamp(1, entries.len().max(1));
        let chunk = entries.len().div_ceil(workers).max(1);
        let loaded: Vec<Result<(FeatureMap, Option<AudioClip>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = entries
                .chunks(chunk)
                .map(|part| {
                    let noise = &noise;
                    scope.spawn(move || {
                        part.iter().map(|e| load_one(&manifest.root, e, noise, options)).collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("feature worker panicked")).collect()
        });
        let mut maps = Vec::with_capacity(entries.len());
        let mut audio = Vec::new();
        for item in loaded {
            let (map, clip) = item?;
            maps.push(map);
            audio.extend(clip);
        }
        let labels = entries.iter().map(|e| e.label).collect();
        let keys = entries.iter().map(Entry::key).collect();
        let mut set = Self::from_maps(&maps, labels, keys)?;
        if options.keep_audio {
            set.audio = Some(audio);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn coeffs(&self) -> usize {
        self.coeffs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn audio(&self) -> Option<&[AudioClip]> {
        self.audio.as_deref()
    }

    pub fn example(&self, i: usize) -> &[f32] {
        let n = self.frames * self.coeffs;
        &self.values[i * n..(i + 1) * n]
    }

    /// One example as a `T×F` tensor.
    pub fn features(&self, i: usize) -> Tensor {
        let data = self.example(i).iter().map(|&v| v as f64).collect();
        Tensor::new([self.frames, self.coeffs], data).expect("consistent shape")
    }

    /// The listed examples stacked into `B×T×F`.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.frames * self.coeffs);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InputValidation(format!("example {i} of {}", self.len())));
            }
            data.extend(self.example(i).iter().map(|&v| v as f64));
        }
        Tensor::new([indices.len(), self.frames, self.coeffs], data)
    }

    /// Keeps the listed examples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let n = self.frames * self.coeffs;
        Self {
            frames: self.frames,
            coeffs: self.coeffs,
            values: indices.iter().flat_map(|&i| self.values[i * n..(i + 1) * n].iter().copied()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            keys: indices.iter().map(|&i| self.keys[i].clone()).collect(),
            audio: self.audio.as_ref().map(|a| indices.iter().map(|&i| a[i].clone()).collect()),
        }
    }
}

fn load_noise(root: &Path, entries: &[Entry]) -> Result<HashMap<String, Vec<f64>>> {
    let mut out = HashMap::new();
    for e in entries {
        if let Source::Silence { noise: Some(name), .. } = &e.source {
            if !out.contains_key(name) {
                let wav = dsp::read_wav(&root.join(name))?;
                out.insert(name.clone(), wav.samples);
            }
        }
    }
    Ok(out)
}

/// The one-second clip behind an entry.
pub(crate) fn load_clip(root: &Path, entry: &Entry, noise: &HashMap<String, Vec<f64>>) -> Result<AudioClip> {
    match &entry.source {
        Source::File(relative) => {
            let path = root.join(relative);
            let wav = dsp::read_wav(&path)?;
            if wav.sample_rate != SAMPLE_RATE {
                return Err(Error::InputValidation(format!(
                    "{}: expected {SAMPLE_RATE} Hz, found {} Hz",
                    path.display(),
                    wav.sample_rate
                )));
            }
            AudioClip::ingest(wav.samples, SAMPLE_RATE)
        }
        Source::Silence { noise: name, offset, gain } => {
            let len = SAMPLE_RATE as usize;
            let samples = match name {
                None => vec![0.0; len],
                Some(name) => {
                    let source = noise
                        .get(name)
                        .ok_or_else(|| Error::InputValidation(format!("noise file {name} not loaded")))?;
                    let end = (offset + len).min(source.len());
                    source.get(*offset..end).unwrap_or(&[]).iter().map(|v| v * gain).collect()
                }
            };
            AudioClip::ingest(samples, SAMPLE_RATE)
        }
    }
}

fn cache_path(dir: &Path, entry: &Entry) -> PathBuf {
    let digest = Sha256::digest(entry.key().as_bytes());
    let name: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    dir.join(format!("{name}.kwsf"))
}

fn load_one(
    root: &Path,
    entry: &Entry,
    noise: &HashMap<String, Vec<f64>>,
    options: &LoadOptions,
) -> Result<(FeatureMap, Option<AudioClip>)> {
    let cached = options.cache_dir.as_ref().map(|dir| cache_path(dir, entry));
    if let Some(path) = cached.as_ref().filter(|p| p.is_file()) {
        let map = dsp::read_feature_cache(path)?;
        let clip = options.keep_audio.then(|| load_clip(root, entry, noise)).transpose()?;
        return Ok((map, clip));
    }
    let clip = load_clip(root, entry, noise)?;
    let map = dsp::extract_features(&clip)?;
    if let Some(path) = cached {
        dsp::write_feature_cache(&path, &map)?;
    }
    Ok((map, options.keep_audio.then_some(clip)))
}
