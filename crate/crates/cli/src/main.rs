//! `kws`: footprint tables, training, evaluation, single-clip inference and
//! feature caching for the separable temporal convolution keyword spotters.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use kws_core::checkpoint;
use kws_core::dataset::{
    label_for_word, scan_dataset, Augmentation, FeatureSet, LoadOptions, Split, SplitManifest, CLASS_NAMES,
};
use kws_core::dsp::{extract_features, read_wav, AudioClip, SAMPLE_RATE};
use kws_core::eval::evaluate;
use kws_core::footprint::footprint;
use kws_core::train::{fit_with, history_csv, TrainConfig};
use kws_core::{Model, Variant};

#[derive(Parser, Debug)]
#[command(name = "kws", version, about = "Keyword spotting with separable temporal convolutions")]
struct Cli {
    /// Every file the command writes goes here.
    #[arg(long, global = true, default_value = "kws-out")]
    output_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
enum Command {
    /// Per-layer parameter and multiplier counts.
    Footprint { variant: String },
    /// Train a model and keep the best dev-accuracy checkpoint.
    Train(TrainArgs),
    /// Accuracy, confusion matrix and ROC curves on one split.
    Eval(EvalArgs),
    /// Posteriors for one 16 kHz mono WAV file.
    Infer(InferArgs),
    /// Extract and cache features for every split.
    Features(DataArgs),
}

#[derive(Args, Debug, Serialize)]
struct DataArgs {
    /// Speech Commands V1 layout: one directory per word plus the
    /// validation and testing lists.
    #[arg(long)]
    data: PathBuf,
    /// Cache features under OUTPUT_DIR/feature-cache.
    #[arg(long)]
    cache: bool,
    /// Feature extraction threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Train on these keywords only, relabelled in the given order.
    #[arg(long, value_delimiter = ',')]
    words: Vec<String>,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "ST-AttNet4")]
    variant: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 80)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Random time shifts and background noise.
    #[arg(long)]
    augment: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
}

#[derive(Args, Debug, Serialize)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    wav: PathBuf,
    /// Also write the per-head attention weights to attention.csv.
    #[arg(long)]
    attention: bool,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<kws_core::Error> for Failure {
    fn from(e: kws_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    output_dir: &'a Path,
    command: &'a Command,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<CheckpointRecord>,
}

#[derive(Serialize)]
struct CheckpointRecord {
    path: PathBuf,
    bytes: usize,
    /// SHA-256 over `blob <len>\0` followed by the file, as git hashes objects.
    sha256: String,
}

fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn checkpoint_record(path: &Path) -> Outcome<CheckpointRecord> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(CheckpointRecord { path: path.to_path_buf(), bytes: bytes.len(), sha256: blob_hash(&bytes) })
}

fn write(out: &Path, name: &str, contents: impl AsRef<[u8]>) -> Outcome<PathBuf> {
    let path = out.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn parse_variant(name: &str) -> Outcome<Variant> {
    name.parse().map_err(|_| usage(format!("unknown variant {name:?}; valid names: {}", Variant::valid_names())))
}

fn existing_file(path: &Path, what: &str) -> Outcome<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn scan(args: &DataArgs) -> Outcome<SplitManifest> {
    if !args.data.is_dir() {
        return Err(usage(format!("dataset directory {} does not exist", args.data.display())));
    }
    let manifest = scan_dataset(&args.data)?;
    for (path, reason) in &manifest.skipped {
        log::warn!("skipped {path}: {reason}");
    }
    Ok(manifest)
}

fn word_labels(args: &DataArgs) -> Outcome<Option<Vec<usize>>> {
    if args.words.is_empty() {
        return Ok(None);
    }
    let labels: Vec<usize> = args.words.iter().map(|w| label_for_word(w)).collect();
    if let Some(w) = args.words.iter().zip(&labels).find(|(_, &l)| l >= 10).map(|(w, _)| w) {
        return Err(usage(format!("{w:?} is not a keyword")));
    }
    Ok(Some(labels))
}

fn load_split(
    manifest: &SplitManifest,
    split: Split,
    args: &DataArgs,
    out: &Path,
    keep_audio: bool,
) -> Outcome<FeatureSet> {
    let entries = match word_labels(args)? {
        Some(labels) => manifest.subset_task(split, &labels),
        None => manifest.task(split),
    };
    let options =
        LoadOptions { cache_dir: args.cache.then(|| out.join("feature-cache")), workers: args.workers, keep_audio };
    let set = FeatureSet::load(manifest, &entries, &options)?;
    println!("{split}: {} examples", set.len());
    Ok(set)
}

fn footprint_cmd(variant: &str, out: &Path) -> Outcome<Option<CheckpointRecord>> {
    let fp = footprint(&parse_variant(variant)?.spec());
    print!("{}", fp.to_text());
    write(out, "footprint.csv", fp.to_csv())?;
    Ok(None)
}

fn train_cmd(args: &TrainArgs, out: &Path) -> Outcome<Option<CheckpointRecord>> {
    let variant = parse_variant(&args.variant)?;
    let config = TrainConfig {
        variant: variant.name().into(),
        epochs: args.epochs,
        batch_size: args.batch_size,
        initial_lr: args.lr,
        seed: args.seed,
        augment: args.augment,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let manifest = scan(&args.data)?;
    write(out, "split_manifest.csv", manifest.to_csv())?;
    let train = load_split(&manifest, Split::Train, &args.data, out, args.augment)?;
    let dev = load_split(&manifest, Split::Dev, &args.data, out, false)?;
    let augmentation = if args.augment { Some(Augmentation::standard(&manifest)?) } else { None };
    let model = Model::build(&variant.spec(), args.seed)?;
    let outcome = fit_with(model, &train, &dev, &config, augmentation.as_ref(), |r| {
        println!(
            "epoch {:>3}  train loss {:.4} acc {:.4}  dev loss {:.4} acc {:.4}  lr {:.2e}",
            r.epoch, r.train_loss, r.train_accuracy, r.dev_loss, r.dev_accuracy, r.lr
        );
    })?;
    if let kws_core::train::StopReason::Diverged(why) = &outcome.stop {
        eprintln!("training stopped early: {why}");
    }
    let path = out.join("model.ckpt");
    checkpoint::save(&outcome.model, &path)?;
    write(out, "history.csv", history_csv(&outcome.history))?;
    match outcome.best_epoch {
        Some(e) => println!("best dev accuracy at epoch {e}; checkpoint {}", path.display()),
        None => println!("no epochs run; initial model saved to {}", path.display()),
    }
    Ok(Some(checkpoint_record(&path)?))
}

fn load_checkpoint(path: &Path) -> Outcome<Model> {
    existing_file(path, "checkpoint")?;
    let model = checkpoint::load(path)?;
    parse_variant(&model.spec().name)
        .map_err(|_| Failure::Runtime(anyhow::anyhow!("checkpoint holds unknown variant {:?}", model.spec().name)))?;
    Ok(model)
}

fn eval_cmd(args: &EvalArgs, out: &Path) -> Outcome<Option<CheckpointRecord>> {
    let model = load_checkpoint(&args.checkpoint)?;
    if args.batch_size == 0 {
        return Err(usage("batch size must be positive"));
    }
    let manifest = scan(&args.data)?;
    let set = load_split(&manifest, args.split.into(), &args.data, out, false)?;
    let report = evaluate(&model, &set, args.batch_size)?;
    write(out, "summary.csv", report.summary_csv())?;
    write(out, "confusion.csv", report.confusion_csv())?;
    write(out, "roc.csv", report.roc_csv())?;
    write(out, "roc.svg", report.roc_svg())?;
    println!("accuracy {:.4} on {} examples", report.accuracy, report.examples);
    if let Some(avg) = &report.average {
        println!("averaged ROC area {:.4}", avg.auc);
    }
    Ok(Some(checkpoint_record(&args.checkpoint)?))
}

fn infer_cmd(args: &InferArgs, out: &Path) -> Outcome<Option<CheckpointRecord>> {
    let model = load_checkpoint(&args.checkpoint)?;
    existing_file(&args.wav, "audio file")?;
    let audio = read_wav(&args.wav)?;
    if audio.sample_rate != SAMPLE_RATE {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE} Hz; resample the file first",
            args.wav.display(),
            audio.sample_rate
        )));
    }
    let features = extract_features(&AudioClip::ingest(audio.samples, audio.sample_rate)?)?;
    let (probs, weights) = model.predict_one(&features.to_tensor())?;
    let top = kws_core::train::argmax(&probs);
    println!("top {} {:.6}", CLASS_NAMES[top], probs[top]);
    for (name, p) in CLASS_NAMES.iter().zip(&probs) {
        println!("{name:<8} {p:.6}");
    }
    if args.attention {
        let Some(w) = weights else {
            return Err(usage(format!("{} has no attention layer", model.spec().name)));
        };
        let frames = w.shape()[1];
        let mut csv = String::from("head,frame,weight\n");
        for (i, v) in w.data().iter().enumerate() {
            csv.push_str(&format!("{},{},{v}\n", i / frames, i % frames));
        }
        write(out, "attention.csv", csv)?;
    }
    Ok(Some(checkpoint_record(&args.checkpoint)?))
}

fn features_cmd(args: &DataArgs, out: &Path) -> Outcome<Option<CheckpointRecord>> {
    let manifest = scan(args)?;
    let args = DataArgs { cache: true, data: args.data.clone(), workers: args.workers, words: args.words.clone() };
    for split in Split::ALL {
        load_split(&manifest, split, &args, out, false)?;
    }
    write(out, "split_manifest.csv", manifest.to_csv())?;
    println!("features cached in {}", out.join("feature-cache").display());
    Ok(None)
}

fn run(cli: &Cli) -> Outcome<()> {
    let out = &cli.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let checkpoint = match &cli.command {
        Command::Footprint { variant } => footprint_cmd(variant, out)?,
        Command::Train(a) => train_cmd(a, out)?,
        Command::Eval(a) => eval_cmd(a, out)?,
        Command::Infer(a) => infer_cmd(a, out)?,
        Command::Features(a) => features_cmd(a, out)?,
    };
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        output_dir: out,
        command: &cli.command,
        checkpoint,
    };
    let json = serde_json::to_string_pretty(&manifest).context("encoding run manifest")?;
    write(out, "run_manifest.json", json + "\n")?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
