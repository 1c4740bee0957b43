//! Speech Commands (V1 layout) ingestion and the 12-class task.

mod batch;
mod features;

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use batch::{make_batches, Augmentation, Batch, Batches};
pub use features::{FeatureSet, LoadOptions};

use crate::dsp::SAMPLE_RATE;
use crate::error::{Error, Result};

pub const KEYWORDS: [&str; 10] = ["yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"];
pub const UNKNOWN_LABEL: usize = 10;
pub const SILENCE_LABEL: usize = 11;
pub const CLASS_NAMES: [&str; 12] =
    ["yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go", "unknown", "silence"];

pub const NOISE_DIR: &str = "_background_noise_";
pub const VALIDATION_LIST: &str = "validation_list.txt";
pub const TESTING_LIST: &str = "testing_list.txt";

/// Label of a word folder: its keyword index, or unknown.
pub fn label_for_word(word: &str) -> usize {
    KEYWORDS.iter().position(|k| *k == word).unwrap_or(UNKNOWN_LABEL)
}

/// Label of a dataset-relative path such as `yes/0a7c2a8d_nohash_0.wav`.
pub fn label_for_path(relative: &str) -> Result<usize> {
    match relative.split_once('/') {
        Some((word, file)) if !word.is_empty() && !file.is_empty() => Ok(label_for_word(word)),
        _ => Err(Error::InputValidation(format!("{relative:?} is not of the form word/file.wav"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where an example's audio comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Source {
    /// A recording, relative to the dataset root with `/` separators.
    File(String),
    /// A one-second crop of a background-noise file scaled by `gain`.
    /// `noise` is `None` when the dataset ships no noise, giving digital
    /// silence.
    Silence { noise: Option<String>, offset: usize, gain: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub source: Source,
    pub label: usize,
}

impl Entry {
    /// Stable identifier, also used as the feature-cache key.
    pub fn key(&self) -> String {
        match &self.source {
            Source::File(p) => p.clone(),
            Source::Silence { noise, offset, gain } => {
                format!("silence:{}:{offset}:{gain:e}", noise.as_deref().unwrap_or("-"))
            }
        }
    }

    pub fn is_silence(&self) -> bool {
        matches!(self.source, Source::Silence { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }

    fn bump(&mut self, split: Split) {
        match split {
            Split::Train => self.train += 1,
            Split::Dev => self.dev += 1,
            Split::Test => self.test += 1,
        }
    }
}

/// How the 12-class task is composed from the raw word files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanOptions {
    /// Silence examples per split, as a fraction of that split's keyword
    /// examples.
    pub silence_fraction: f64,
    /// Unknown-word examples kept per split, as a fraction of that split's
    /// keyword examples.
    pub unknown_fraction: f64,
    /// Largest gain applied to silence crops.
    pub silence_gain: f64,
    pub seed: u64,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self { silence_fraction: 0.1, unknown_fraction: 0.1, silence_gain: 0.1, seed: 0 }
    }
}

/// Every usable word file assigned to a split, plus synthesized silence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub root: PathBuf,
    pub options: ScanOptions,
    train: Vec<Entry>,
    dev: Vec<Entry>,
    test: Vec<Entry>,
    /// Files that could not be read, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl SplitManifest {
    /// All entries of a split: every word file plus silence.
    pub fn entries(&self, split: Split) -> &[Entry] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Word-file counts, silence excluded.
    pub fn word_counts(&self) -> SplitCounts {
        let mut counts = SplitCounts::default();
        for split in Split::ALL {
            for e in self.entries(split) {
                if !e.is_silence() {
                    counts.bump(split);
                }
            }
        }
        counts
    }

    /// The 12-class task for a split: all keyword and silence examples and a
    /// path-hash-selected subset of unknown words. Independent of any seed.
    pub fn task(&self, split: Split) -> Vec<Entry> {
        let entries = self.entries(split);
        let keywords = entries.iter().filter(|e| e.label < UNKNOWN_LABEL).count();
        let quota = (self.options.unknown_fraction * keywords as f64).ceil() as usize;
        let mut unknown: Vec<(Vec<u8>, &Entry)> = entries
            .iter()
            .filter(|e| e.label == UNKNOWN_LABEL)
            .map(|e| (Sha256::digest(e.key().as_bytes()).to_vec(), e))
            .collect();
        unknown.sort_by(|a, b| a.0.cmp(&b.0));
        let kept: HashSet<String> = unknown.iter().take(quota).map(|(_, e)| e.key()).collect();
        entries.iter().filter(|e| e.label != UNKNOWN_LABEL || kept.contains(&e.key())).cloned().collect()
    }

    /// A task restricted to the given labels, relabelled `0..labels.len()`
    /// in the given order. Used for reduced desk-scale tasks.
    pub fn subset_task(&self, split: Split, labels: &[usize]) -> Vec<Entry> {
        self.entries(split)
            .iter()
            .filter_map(|e| {
                labels.iter().position(|&l| l == e.label).map(|i| Entry { source: e.source.clone(), label: i })
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,label,class,source\n");
        for split in Split::ALL {
            for e in self.entries(split) {
                out.push_str(&format!("{split},{},{},{}\n", e.label, CLASS_NAMES[e.label], e.key()));
            }
        }
        out
    }
}

/// Scans a V1-layout directory with default task options.
pub fn scan_dataset(root: &Path) -> Result<SplitManifest> {
    scan_dataset_with(root, &ScanOptions::default())
}

pub fn scan_dataset_with(root: &Path, options: &ScanOptions) -> Result<SplitManifest> {
    let validation = read_list(&root.join(VALIDATION_LIST))?;
    let testing = read_list(&root.join(TESTING_LIST))?;
    let mut manifest = SplitManifest {
        root: root.to_path_buf(),
        options: options.clone(),
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        skipped: Vec::new(),
    };
    for word in sorted_dirs(root)? {
        if word.starts_with('_') {
            continue;
        }
        let label = label_for_word(&word);
        for file in sorted_wavs(&root.join(&word))? {
            let relative = format!("{word}/{file}");
            if let Err(reason) = check_header(&root.join(&word).join(&file)) {
                log::warn!("skipping {relative}: {reason}");
                manifest.skipped.push((relative, reason));
                continue;
            }
            let split = if testing.contains(&relative) {
                Split::Test
            } else if validation.contains(&relative) {
                Split::Dev
            } else {
                Split::Train
            };
            let entry = Entry { source: Source::File(relative), label };
            match split {
                Split::Train => manifest.train.push(entry),
                Split::Dev => manifest.dev.push(entry),
                Split::Test => manifest.test.push(entry),
            }
        }
    }
    let noise = noise_lengths(root, &mut manifest.skipped)?;
    if noise.is_empty() {
        log::warn!("no usable {NOISE_DIR} recordings; silence examples are all-zero");
    }
    for (i, split) in Split::ALL.into_iter().enumerate() {
        let keywords = manifest.entries(split).iter().filter(|e| e.label < UNKNOWN_LABEL).count();
        let count = (options.silence_fraction * keywords as f64).ceil() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ (0x5111_e9ce << 8 | i as u64));
        let silence: Vec<Entry> = (0..count)
            .map(|_| {
                let gain = rng.gen_range(0.0..=options.silence_gain);
                let source = if noise.is_empty() {
                    Source::Silence { noise: None, offset: 0, gain }
                } else {
                    let (name, len) = &noise[rng.gen_range(0..noise.len())];
                    let offset = rng.gen_range(0..=len.saturating_sub(SAMPLE_RATE as usize));
                    Source::Silence { noise: Some(name.clone()), offset, gain }
                };
                Entry { source, label: SILENCE_LABEL }
            })
            .collect();
        match split {
            Split::Train => manifest.train.extend(silence),
            Split::Dev => manifest.dev.extend(silence),
            Split::Test => manifest.test.extend(silence),
        }
    }
    let counts = manifest.word_counts();
    log::info!(
        "scanned {}: {} train / {} dev / {} test word files, {} skipped",
        root.display(),
        counts.train,
        counts.dev,
        counts.test,
        manifest.skipped.len()
    );
    Ok(manifest)
}

fn read_list(path: &Path) -> Result<HashSet<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read split list {}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect())
}

fn sorted_dirs(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_wavs(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".wav") {
            out.push(name);
        }
    }
    out.sort();
    Ok(out)
}

fn check_header(path: &Path) -> std::result::Result<hound::WavSpec, String> {
    let reader = hound::WavReader::open(path).map_err(|e| e.to_string())?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(format!("expected 16-bit mono PCM, found {spec:?}"));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(format!("expected {SAMPLE_RATE} Hz, found {} Hz", spec.sample_rate));
    }
    Ok(spec)
}

fn noise_lengths(root: &Path, skipped: &mut Vec<(String, String)>) -> Result<Vec<(String, usize)>> {
    let dir = root.join(NOISE_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for file in sorted_wavs(&dir)? {
        let relative = format!("{NOISE_DIR}/{file}");
        let path = dir.join(&file);
        match check_header(&path).and_then(|_| hound::WavReader::open(&path).map_err(|e| e.to_string())) {
            Ok(reader) => out.push((relative, reader.duration() as usize)),
            Err(reason) => {
                log::warn!("skipping {relative}: {reason}");
                skipped.push((relative, reason));
            }
        }
    }
    Ok(out)
}
