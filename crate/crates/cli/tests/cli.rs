use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kws_core::dsp::write_wav;
use kws_core::synth::{generate_corpus, CorpusConfig};

fn kws(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kws")).arg("--output-dir").arg(out).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Twenty clips: "yes" and "no", ten each.
fn small_corpus(root: &Path) {
    generate_corpus(root, &CorpusConfig::default()).unwrap();
}

/// Four clips of every keyword, one of each in dev and in test.
fn keyword_corpus(root: &Path) {
    let words = kws_core::dataset::KEYWORDS.iter().map(|w| w.to_string()).collect();
    let cfg = CorpusConfig { words, clips_per_word: 4, dev_fraction: 0.25, test_fraction: 0.25, ..Default::default() };
    generate_corpus(root, &cfg).unwrap();
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args =
        vec!["train", "--data", path_str(data), "--variant", "ST-AttNet4", "--seed", "7", "--batch-size", "8"];
    args.extend_from_slice(extra);
    kws(out, &args)
}

#[test]
fn footprint_prints_the_table() {
    let out = tempfile::tempdir().unwrap();
    let o = kws(out.path(), &["footprint", "ST-AttNet4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let conv = text.lines().find(|l| l.starts_with("conv")).unwrap();
    assert!(conv.contains("1,920") && conv.contains("188,160"), "{conv}");
    assert!(out.path().join("footprint.csv").is_file());
    assert!(out.path().join("run_manifest.json").is_file());

    let o = kws(out.path(), &["footprint", "ST-AttNet7"]);
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.starts_with("res x4")) && text.lines().any(|l| l.starts_with("res x3")));
}

#[test]
fn bad_variant_is_a_usage_error() {
    let out = tempfile::tempdir().unwrap();
    let o = kws(out.path(), &["footprint", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ST-AttNet4-wide"), "{}", stderr(&o));
    assert_eq!(kws(out.path(), &["no-such-command"]).status.code(), Some(2));
}

#[test]
fn training_is_deterministic_and_records_the_run() {
    let data = tempfile::tempdir().unwrap();
    small_corpus(data.path());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for out in [&a, &b] {
        let o = train(data.path(), out.path(), &["--epochs", "1"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let history = std::fs::read_to_string(a.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2, "{history}");
    assert_eq!(history, std::fs::read_to_string(b.path().join("history.csv")).unwrap());
    let ckpt = |d: &tempfile::TempDir| std::fs::read(d.path().join("model.ckpt")).unwrap();
    assert_eq!(ckpt(&a), ckpt(&b));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"]["Train"]["epochs"], 1);
    let bytes = ckpt(&a);
    let mut object = format!("blob {}\0", bytes.len()).into_bytes();
    object.extend_from_slice(&bytes);
    let hex: String = sha256_hex(&object);
    assert_eq!(manifest["checkpoint"]["sha256"], hex.as_str());
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn zero_epochs_save_the_initial_model() {
    let data = tempfile::tempdir().unwrap();
    small_corpus(data.path());
    let out = tempfile::tempdir().unwrap();
    let o = train(data.path(), out.path(), &["--epochs", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let history = std::fs::read_to_string(out.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1);
    let saved = kws_core::checkpoint::load(&out.path().join("model.ckpt")).unwrap();
    let fresh = kws_core::Model::build(&kws_core::Variant::StAttNet4.spec(), 7).unwrap();
    for (x, y) in saved.store().iter().zip(fresh.store().iter()) {
        assert_eq!(x.value, y.value);
    }
}

fn untrained_checkpoint(data: &Path) -> (tempfile::TempDir, PathBuf) {
    let out = tempfile::tempdir().unwrap();
    let o = train(data, out.path(), &["--epochs", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let path = out.path().join("model.ckpt");
    (out, path)
}

#[test]
fn untrained_eval_is_near_chance_and_repeatable() {
    let data = tempfile::tempdir().unwrap();
    keyword_corpus(data.path());
    let (_keep, ckpt) = untrained_checkpoint(data.path());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for out in [&a, &b] {
        let o = kws(out.path(), &["eval", "--checkpoint", path_str(&ckpt), "--data", path_str(data.path())]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["summary.csv", "confusion.csv", "roc.csv", "roc.svg"] {
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join(name)).unwrap();
        assert_eq!(read(&a), read(&b), "{name}");
    }
    let summary = std::fs::read_to_string(a.path().join("summary.csv")).unwrap();
    let accuracy: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("accuracy,"))
        .unwrap_or_else(|| panic!("{summary}"))
        .parse()
        .unwrap();
    assert!((0.0..=0.35).contains(&accuracy), "{accuracy}");
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let data = tempfile::tempdir().unwrap();
    small_corpus(data.path());
    let out = tempfile::tempdir().unwrap();
    let o = kws(out.path(), &["eval", "--checkpoint", "/nonexistent/model.ckpt", "--data", path_str(data.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = kws(out.path(), &["infer", "--checkpoint", "/nonexistent/model.ckpt", "x.wav"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn infer_prints_a_distribution_and_rejects_bad_audio() {
    let data = tempfile::tempdir().unwrap();
    small_corpus(data.path());
    let (_keep, ckpt) = untrained_checkpoint(data.path());
    let out = tempfile::tempdir().unwrap();
    let wav = data.path().join("yes").read_dir().unwrap().next().unwrap().unwrap().path();
    let o = kws(out.path(), &["infer", "--checkpoint", path_str(&ckpt), path_str(&wav), "--attention"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let probs: Vec<f64> = text.lines().skip(1).map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(probs.len(), 12);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    let att = std::fs::read_to_string(out.path().join("attention.csv")).unwrap();
    assert_eq!(att.lines().count(), 1 + 5 * 98);

    let slow = out.path().join("slow.wav");
    write_wav(&slow, &vec![0.0; 8_000], 8_000).unwrap();
    let o = kws(out.path(), &["infer", "--checkpoint", path_str(&ckpt), path_str(&slow)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("8000 Hz"), "{}", stderr(&o));

    let stereo = out.path().join("stereo.wav");
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
    for _ in 0..32_000 {
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();
    let o = kws(out.path(), &["infer", "--checkpoint", path_str(&ckpt), path_str(&stereo)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mono"), "{}", stderr(&o));
}

#[test]
fn features_fill_the_cache() {
    let data = tempfile::tempdir().unwrap();
    small_corpus(data.path());
    let out = tempfile::tempdir().unwrap();
    let o = kws(out.path(), &["features", "--data", path_str(data.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.path().join("feature-cache").read_dir().unwrap().count() > 0);
    let o = kws(out.path(), &["features", "--data", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(2));
}
