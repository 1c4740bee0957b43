use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{frame_count, AudioClip, FeatureMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub mel_bands: usize,
    pub coeffs: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate: super::SAMPLE_RATE,
            window: super::WINDOW_SAMPLES,
            hop: super::HOP_SAMPLES,
            fft_size: super::FFT_SIZE,
            mel_bands: super::MEL_BANDS,
            coeffs: super::MFCC_COEFFS,
            low_hz: super::BAND_LOW_HZ,
            high_hz: super::BAND_HIGH_HZ,
            log_floor: super::LOG_FLOOR,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Symmetric Hamming window of length `n`.
pub fn hamming_window(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()).collect()
}

/// Triangular mel filters evaluated at the `fft_size/2 + 1` bin centres,
/// `bands` rows. Edges are equally spaced on the mel scale.
pub fn mel_filterbank(bands: usize, fft_size: usize, sample_rate: u32, low_hz: f64, high_hz: f64) -> Vec<Vec<f64>> {
    let bins = fft_size / 2 + 1;
    let (lo, hi) = (hz_to_mel(low_hz), hz_to_mel(high_hz));
    let edges: Vec<f64> = (0..bands + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (bands + 1) as f64)).collect();
    (0..bands)
        .map(|b| {
            let (left, centre, right) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / fft_size as f64;
                    let rise = (f - left) / (centre - left);
                    let fall = (right - f) / (right - centre);
                    rise.min(fall).max(0.0)
                })
                .collect()
        })
        .collect()
}

fn dct_matrix(coeffs: usize, bands: usize) -> Vec<f64> {
    let mut m = vec![0.0; coeffs * bands];
    for k in 0..coeffs {
        let norm = if k == 0 { (1.0 / bands as f64).sqrt() } else { (2.0 / bands as f64).sqrt() };
        for n in 0..bands {
            m[k * bands + n] = norm * (PI * k as f64 * (2 * n + 1) as f64 / (2 * bands) as f64).cos();
        }
    }
    m
}

/// Precomputed window, filterbank, DCT and FFT plan.
pub struct MfccExtractor {
    config: MfccConfig,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    dct: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MfccExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccExtractor").field("config", &self.config).finish()
    }
}

impl MfccExtractor {
    pub fn new(config: MfccConfig) -> Result<Self> {
        if config.window == 0 || config.hop == 0 || config.fft_size < config.window {
            return Err(Error::Config(format!(
                "window {} / hop {} / fft {} are inconsistent",
                config.window, config.hop, config.fft_size
            )));
        }
        if config.coeffs == 0 || config.coeffs > config.mel_bands {
            return Err(Error::Config(format!("{} coefficients from {} bands", config.coeffs, config.mel_bands)));
        }
        if !(config.low_hz >= 0.0
            && config.low_hz < config.high_hz
            && config.high_hz <= config.sample_rate as f64 / 2.0)
        {
            return Err(Error::Range(format!("mel range [{}, {}] Hz", config.low_hz, config.high_hz)));
        }
        let filters =
            mel_filterbank(config.mel_bands, config.fft_size, config.sample_rate, config.low_hz, config.high_hz);
        Ok(Self {
            window: hamming_window(config.window),
            dct: dct_matrix(config.coeffs, config.mel_bands),
            fft: FftPlanner::new().plan_fft_forward(config.fft_size),
            filters,
            config,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.config
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureMap> {
        let c = &self.config;
        if clip.sample_rate() != c.sample_rate {
            return Err(Error::InputValidation(format!(
                "expected {} Hz audio, got {} Hz",
                c.sample_rate,
                clip.sample_rate()
            )));
        }
        let frames = frame_count(clip.len(), c.window, c.hop);
        if frames == 0 {
            return Err(Error::InputValidation(format!(
                "clip of {} samples is shorter than one {}-sample window",
                clip.len(),
                c.window
            )));
        }
        let bins = c.fft_size / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); c.fft_size];
        let mut power = vec![0.0; bins];
        let mut log_mel = vec![0.0; c.mel_bands];
        let mut out = Vec::with_capacity(frames * c.coeffs);
        for t in 0..frames {
            let frame = &clip.samples()[t * c.hop..t * c.hop + c.window];
            for (slot, (x, w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *slot = Complex::new(x * w, 0.0);
            }
            buf[c.window..].fill(Complex::new(0.0, 0.0));
            self.fft.process(&mut buf);
            for (p, z) in power.iter_mut().zip(&buf) {
                *p = z.norm_sqr();
            }
            for (m, filter) in log_mel.iter_mut().zip(&self.filters) {
                let energy: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
                *m = energy.max(c.log_floor).ln();
            }
            for k in 0..c.coeffs {
                let row = &self.dct[k * c.mel_bands..(k + 1) * c.mel_bands];
                out.push(row.iter().zip(&log_mel).map(|(a, b)| a * b).sum());
            }
        }
        FeatureMap::new(out, frames, c.coeffs)
    }
}

/// MFCC with the default 16 kHz configuration.
pub fn mfcc(clip: &AudioClip) -> Result<FeatureMap> {
    static DEFAULT: OnceLock<MfccExtractor> = OnceLock::new();
    DEFAULT.get_or_init(|| MfccExtractor::new(MfccConfig::default()).expect("default config is valid")).extract(clip)
}
