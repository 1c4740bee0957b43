//! Synthetic corpus in the Speech Commands V1 directory layout.
//!
//! Each word maps to a fixed sequence of gliding tones derived from a hash
//! of the word. Clips vary in onset, pitch scale, level and noise, so
//! classes are learnable but not trivially separable.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::dataset::{SplitCounts, NOISE_DIR, TESTING_LIST, VALIDATION_LIST};
use crate::dsp::{write_wav, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub words: Vec<String>,
    pub clips_per_word: usize,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub noise_files: usize,
    pub noise_seconds: usize,
    /// Largest white-noise standard deviation added to a clip.
    pub max_noise: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            words: ["yes", "no"].map(String::from).to_vec(),
            clips_per_word: 10,
            dev_fraction: 0.1,
            test_fraction: 0.1,
            noise_files: 2,
            noise_seconds: 3,
            max_noise: 0.05,
            seed: 0,
        }
    }
}

/// One gliding tone of a word template; times in seconds from the onset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Glide {
    pub start: f64,
    pub duration: f64,
    pub from_hz: f64,
    pub to_hz: f64,
}

pub fn word_template(word: &str) -> Vec<Glide> {
    let digest = Sha256::digest(word.as_bytes());
    let byte = |i: usize| digest[i] as f64 / 255.0;
    let mut t = 0.0;
    (0..3)
        .map(|s| {
            let duration = 0.08 + 0.12 * byte(4 * s);
            let glide = Glide {
                start: t,
                duration,
                from_hz: 250.0 + 3_000.0 * byte(4 * s + 1),
                to_hz: 250.0 + 3_000.0 * byte(4 * s + 2),
            };
            t += duration + 0.03 * byte(4 * s + 3);
            glide
        })
        .collect()
}

/// A one-second 16 kHz rendition of `word` with random variation.
pub fn synth_clip(word: &str, max_noise: f64, rng: &mut impl Rng) -> Vec<f64> {
    let template = word_template(word);
    let sr = SAMPLE_RATE as f64;
    let onset = rng.gen_range(0.05..0.35);
    let pitch = rng.gen_range(0.92..1.08);
    let level = rng.gen_range(0.2..0.6);
    let noise = rng.gen_range(0.0..=max_noise);
    let mut out = vec![0.0; SAMPLE_RATE as usize];
    for glide in &template {
        let first = ((onset + glide.start) * sr) as usize;
        let len = (glide.duration * sr) as usize;
        let mut phase = rng.gen_range(0.0..2.0 * PI);
        for i in 0..len {
            let Some(slot) = out.get_mut(first + i) else { break };
            let frac = i as f64 / len as f64;
            let hz = pitch * (glide.from_hz + (glide.to_hz - glide.from_hz) * frac);
            phase += 2.0 * PI * hz / sr;
            let envelope = (PI * frac).sin();
            *slot += level * envelope * (phase.sin() + 0.3 * (2.0 * phase).sin());
        }
    }
    for slot in &mut out {
        *slot = (*slot + noise * gaussian(rng)).clamp(-1.0, 1.0);
    }
    out
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Writes the corpus under `root` and returns word-file counts per split.
pub fn generate_corpus(root: &Path, config: &CorpusConfig) -> Result<SplitCounts> {
    if config.dev_fraction + config.test_fraction >= 1.0 || config.dev_fraction < 0.0 || config.test_fraction < 0.0 {
        return Err(Error::Config("dev and test fractions must leave room for training".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut validation = String::new();
    let mut testing = String::new();
    let mut counts = SplitCounts::default();
    for word in &config.words {
        let dir = root.join(word);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let n_test = (config.test_fraction * config.clips_per_word as f64).round() as usize;
        let n_dev = (config.dev_fraction * config.clips_per_word as f64).round() as usize;
        for i in 0..config.clips_per_word {
            let speaker: u32 = rng.gen();
            let name = format!("{speaker:08x}_nohash_{i}.wav");
            write_wav(&dir.join(&name), &synth_clip(word, config.max_noise, &mut rng), SAMPLE_RATE)?;
            let relative = format!("{word}/{name}\n");
            if i < n_test {
                testing.push_str(&relative);
                counts.test += 1;
            } else if i < n_test + n_dev {
                validation.push_str(&relative);
                counts.dev += 1;
            } else {
                counts.train += 1;
            }
        }
    }
    let noise_dir = root.join(NOISE_DIR);
    std::fs::create_dir_all(&noise_dir).map_err(|e| Error::io(&noise_dir, e))?;
    for k in 0..config.noise_files {
        let len = config.noise_seconds * SAMPLE_RATE as usize;
        let mut brown = 0.0;
        let samples: Vec<f64> = (0..len)
            .map(|_| {
                let white = gaussian(&mut rng);
                if k % 2 == 0 {
                    0.3 * white
                } else {
                    brown = 0.98 * brown + 0.2 * white;
                    brown.clamp(-1.0, 1.0)
                }
            })
            .map(|v: f64| v.clamp(-1.0, 1.0))
            .collect();
        let name = if k % 2 == 0 { format!("white_noise_{k}.wav") } else { format!("brown_noise_{k}.wav") };
        write_wav(&noise_dir.join(name), &samples, SAMPLE_RATE)?;
    }
    for (file, text) in [(VALIDATION_LIST, validation), (TESTING_LIST, testing)] {
        let path = root.join(file);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(counts)
}
