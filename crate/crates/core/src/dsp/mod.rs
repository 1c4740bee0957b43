//! Audio front end: one-second clips in, `98×40` MFCC feature maps out.

mod cache;
mod mfcc;
mod wav;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub use cache::{decode_feature_cache, encode_feature_cache, read_feature_cache, write_feature_cache, CACHE_MAGIC};
pub use mfcc::{hamming_window, hz_to_mel, mel_filterbank, mel_to_hz, mfcc, MfccConfig, MfccExtractor};
pub use wav::{read_wav, write_wav, WavAudio};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW_MS: u32 = 30;
pub const FRAME_SHIFT_MS: u32 = 10;
pub const WINDOW_SAMPLES: usize = 480;
pub const HOP_SAMPLES: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const MEL_BANDS: usize = 40;
pub const MFCC_COEFFS: usize = 40;
pub const FRAMES_PER_CLIP: usize = 98;
pub const BAND_LOW_HZ: f64 = 20.0;
pub const BAND_HIGH_HZ: f64 = 7_800.0;
pub const LOG_FLOOR: f64 = 1e-12;

/// Mono audio with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    /// Wraps samples as they are. Clips may exceed one second by at most 5%.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InputValidation("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InputValidation(format!("sample {i} is not finite")));
        }
        let limit = sample_rate as usize + sample_rate as usize / 20;
        if samples.len() > limit {
            return Err(Error::InputValidation(format!("{} samples exceed 1.05 s at {sample_rate} Hz", samples.len())));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Ingestion path: zero-pads at the end or truncates to exactly one
    /// second.
    pub fn ingest(mut samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        samples.resize(sample_rate as usize, 0.0);
        Self::new(samples, sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }
}

pub fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64).sqrt()
}

/// A `T×F` matrix of cepstral features, row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Vec<f64>,
    frames: usize,
    coeffs: usize,
}

impl FeatureMap {
    pub fn new(values: Vec<f64>, frames: usize, coeffs: usize) -> Result<Self> {
        if frames == 0 || coeffs == 0 || values.len() != frames * coeffs {
            return Err(Error::Shape(format!("{} values cannot form a {frames}×{coeffs} feature map", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InputValidation("feature map has non-finite entries".into()));
        }
        Ok(Self { values, frames, coeffs })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn coeffs(&self) -> usize {
        self.coeffs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.coeffs..(t + 1) * self.coeffs]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.frames, self.coeffs], self.values.clone()).expect("valid shape")
    }

    /// Rounds every value to `f32`, the precision of the on-disk cache, so
    /// cached and freshly computed features are identical.
    pub fn quantized(&self) -> Self {
        Self {
            values: self.values.iter().map(|&v| v as f32 as f64).collect(),
            frames: self.frames,
            coeffs: self.coeffs,
        }
    }
}

/// Number of full windows that fit in `samples`.
pub fn frame_count(samples: usize, window: usize, hop: usize) -> usize {
    if samples < window {
        0
    } else {
        (samples - window) / hop + 1
    }
}

/// Brick-wall band-pass: zeroes every FFT bin of the whole clip whose
/// frequency lies outside `[low_hz, high_hz]` and transforms back.
pub fn band_limit(clip: &AudioClip, low_hz: f64, high_hz: f64) -> Result<AudioClip> {
    let nyquist = clip.sample_rate as f64 / 2.0;
    if !(low_hz >= 0.0 && low_hz < high_hz) {
        return Err(Error::Range(format!("band [{low_hz}, {high_hz}] is empty or negative")));
    }
    if high_hz > nyquist {
        return Err(Error::Range(format!("upper edge {high_hz} Hz exceeds Nyquist {nyquist} Hz")));
    }
    let n = clip.len();
    if n == 0 {
        return Ok(clip.clone());
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = clip.samples.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let bin_hz = clip.sample_rate as f64 / n as f64;
    for (k, bin) in buf.iter_mut().enumerate() {
        let freq = k.min(n - k) as f64 * bin_hz;
        if freq < low_hz || freq > high_hz {
            *bin = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    let samples = buf.iter().map(|c| c.re * scale).collect();
    AudioClip::new(samples, clip.sample_rate)
}

/// Full front end used for training and inference: band limit to
/// 20 Hz–7.8 kHz, MFCC, then rounding to cache precision.
pub fn extract_features(clip: &AudioClip) -> Result<FeatureMap> {
    let limited = band_limit(clip, BAND_LOW_HZ, BAND_HIGH_HZ)?;
    Ok(mfcc(&limited)?.quantized())
}
