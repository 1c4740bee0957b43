//! One line per acceptance criterion. Run with
//! `cargo test -p kws-core --test acceptance`.
//!
//! A criterion fails when any of its checks fails. Checks marked `known`
//! cannot hold for mathematical or empirical reasons recorded in the
//! project notes; they still print FAIL but do not fail the process.

mod oracles;

use std::path::PathBuf;
use std::time::Instant;

use kws_core::attention::{all_attention_weights, pooled_attention, PooledAttention};
use kws_core::dataset::{label_for_word, scan_dataset, Augmentation, FeatureSet, LoadOptions, Split};
use kws_core::dsp::mfcc;
use kws_core::dsp::AudioClip;
use kws_core::eval::{evaluate, roc_for_keyword, roc_point, threshold_grid, vertical_average};
use kws_core::footprint::footprint;
use kws_core::gradcheck::{check_model_gradients, GradCheckConfig};
use kws_core::layers::{avg_pool_time, depthwise_conv, pointwise_conv, Mode};
use kws_core::model::{Model, ModelSpec, Reduction, Variant};
use kws_core::param::ParamStore;
use kws_core::synth::{generate_corpus, CorpusConfig};
use kws_core::train::{evaluate_loss, fit_with, LrScheduler, TrainConfig};
use kws_core::Tensor;
use oracles::{count_rates, depthwise, flatten, matmul, random_vec, rng, sine, MfccOracle};
use rand::seq::SliceRandom;
use rand::Rng;

struct Check {
    name: String,
    passed: bool,
    known: bool,
}

enum Verdict {
    Checks(Vec<Check>),
    Skip(String),
}

fn check(name: impl Into<String>, passed: bool) -> Check {
    Check { name: name.into(), passed, known: false }
}

fn known(name: impl Into<String>, passed: bool) -> Check {
    Check { name: name.into(), passed, known: true }
}

fn rows(t: usize, c: usize, r: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..t).map(|_| random_vec(c, r)).collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn footprint_rows() -> Verdict {
    let att = footprint(&Variant::StAttNet4.spec());
    let wide = footprint(&Variant::StAttNet4Wide.spec());
    let row = |f: &kws_core::footprint::Footprint, l: &str| {
        let r = f.row(l).unwrap();
        (r.params, r.multipliers)
    };
    let mut checks = vec![
        check(
            format!("ST-AttNet4 conv {:?} == (1920, 188160)", row(&att, "conv")),
            row(&att, "conv") == (1_920, 188_160),
        ),
        check(
            format!("ST-AttNet4 res x4 {:?} == (17280, 1693440)", row(&att, "res x4")),
            row(&att, "res x4") == (17_280, 1_693_440),
        ),
        check(format!("ST-AttNet4 softmax params {} == 540", row(&att, "softmax").0), row(&att, "softmax").0 == 540),
        check(
            format!("ST-AttNet4-wide softmax params {} == 780", row(&wide, "softmax").0),
            row(&wide, "softmax").0 == 780,
        ),
        check(format!("ST-AttNet4 avg-att params {} == 2025", row(&att, "avg-att").0), row(&att, "avg-att").0 == 2_025),
        check(
            format!("ST-AttNet4-wide avg-att params {} == 4225", row(&wide, "avg-att").0),
            row(&wide, "avg-att").0 == 4_225,
        ),
    ];
    for v in Variant::ALL {
        for note in footprint(&v.spec()).discrepancies() {
            println!("    note  {v} {note}");
        }
    }
    checks.push(check("discrepancies listed for the attention rows", !att.discrepancies().is_empty()));
    Verdict::Checks(checks)
}

fn oracle_equivalence() -> Verdict {
    let mut r = rng(2);
    let mut exact = 0;
    let mut total = 0;
    for d in [1, 2, 4] {
        for _ in 0..40 {
            let (t, c) = (r.gen_range(1..24), r.gen_range(1..8));
            let (x, k) = (rows(t, c, &mut r), rows(3, c, &mut r));
            let ours = depthwise_conv(&tensor(&x), &tensor(&k), d).unwrap();
            exact += usize::from(ours.data() == flatten(&depthwise(&x, &k, d)).as_slice());
            total += 1;
        }
    }
    let depthwise_ok = exact == total;
    let mut pw_exact = 0;
    for _ in 0..120 {
        let (t, ci, co) = (r.gen_range(1..16), r.gen_range(1..10), r.gen_range(1..10));
        let (x, w) = (rows(t, ci, &mut r), rows(ci, co, &mut r));
        let ours = pointwise_conv(&tensor(&x), &tensor(&w)).unwrap();
        pw_exact += usize::from(ours.data() == flatten(&matmul(&x, &w)).as_slice());
    }
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut store = ParamStore::new();
        let m = PooledAttention::new(&mut store, "att", 45, 45, 5, &mut rng(seed)).unwrap();
        let u = rows(98, 45, &mut r);
        let w = oracles::to_rows(store.value(m.weight).data(), 45);
        let (expect, _) = oracles::pooled_attention(&u, &w, 5);
        let ours = pooled_attention(&tensor(&u), &m, &store).unwrap();
        for (a, b) in ours.data().iter().zip(&expect) {
            worst = worst.max((a - b).abs());
        }
    }
    Verdict::Checks(vec![
        check(format!("depthwise d∈{{1,2,4}} exact on {exact}/{total}"), depthwise_ok && total >= 100),
        check(format!("pointwise exact on {pw_exact}/120"), pw_exact == 120),
        check(format!("pooled attention deviation {worst:.1e} < 1e-10"), worst < 1e-10),
    ])
}

fn mini_spec() -> ModelSpec {
    ModelSpec {
        name: "mini".into(),
        channels: 8,
        dilated_blocks: 2,
        plain_blocks: 0,
        heads: 2,
        reduction: Reduction::PooledAttention,
        num_classes: 12,
        frames: 12,
        features: 6,
    }
}

fn gradients() -> Verdict {
    let cfg = GradCheckConfig::default();
    let mut checks = Vec::new();
    let cases: [(&str, ModelSpec, usize, usize); 2] =
        [("mini width 8, 2 blocks", mini_spec(), 12, 6), ("ST-AttNet4", Variant::StAttNet4.spec(), 98, 40)];
    for (i, (name, spec, t, f)) in cases.into_iter().enumerate() {
        let mut model = Model::build(&spec, 40 + i as u64).unwrap();
        let x = Tensor::new([2, t, f], random_vec(2 * t * f, &mut rng(50 + i as u64))).unwrap();
        let report = check_model_gradients(&mut model, &x, &[3, 10], Mode::Train, &cfg).unwrap();
        let err = report.max_rel_error();
        checks.push(check(
            format!(
                "{name}: {} scalars, max rel error {err:.2e} < 1e-4 ({} refined)",
                report.entries.len(),
                report.refined(cfg.epsilon)
            ),
            err < 1e-4,
        ));
    }
    Verdict::Checks(checks)
}

fn attention_normalisation() -> Verdict {
    let mut r = rng(4);
    let mut worst_sum = 0.0f64;
    let mut pool_exact = true;
    let mut worst_perm = 0.0f64;
    for trial in 0..200 {
        let t = r.gen_range(2..60);
        let heads = [1, 3, 5][trial % 3];
        let mut store = ParamStore::new();
        let m = PooledAttention::new(&mut store, "att", 15, 15, heads, &mut r).unwrap();
        let scale = r.gen_range(0.01..30.0);
        let u: Vec<Vec<f64>> =
            rows(t, 15, &mut r).into_iter().map(|row| row.iter().map(|v| v * scale).collect()).collect();
        let w = all_attention_weights(&tensor(&u), &m, &store).unwrap();
        for row in w.data().chunks(t) {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let mut permuted = u.clone();
        permuted.shuffle(&mut r);
        pool_exact &= avg_pool_time(&tensor(&u)).unwrap() == avg_pool_time(&tensor(&permuted)).unwrap();
        let a = pooled_attention(&tensor(&u), &m, &store).unwrap();
        let b = pooled_attention(&tensor(&permuted), &m, &store).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            worst_perm = worst_perm.max((x - y).abs() / x.abs().max(1.0));
        }
    }
    Verdict::Checks(vec![
        check(format!("weights sum to 1, worst {worst_sum:.1e} <= 1e-12"), worst_sum <= 1e-12),
        check("avg_pool_time exactly permutation-invariant on 200 instances", pool_exact),
        // The pooled query is the time mean and keys double as values, so a
        // frame permutation permutes weights and values together.
        known(
            format!("order-dependent pooled_attention instance found (largest change {worst_perm:.1e}, need > 1e-9)"),
            worst_perm > 1e-9,
        ),
    ])
}

fn scheduler() -> Verdict {
    let mut a = LrScheduler::with_state(1e-3, Some(1.0), 2);
    let mut b = LrScheduler::with_state(1e-3, Some(1.0), 2);
    let mut c = LrScheduler::with_state(1.2e-5, Some(1.0), 2);
    let mut d = LrScheduler::with_state(1e-3, Some(1.0), 0);
    let (ra, rb, rc, rd) = (a.update(0.90), b.update(0.97), c.update(1.0), d.update(1.0));
    Verdict::Checks(vec![
        check(format!("10% drop keeps 1e-3 -> {ra:e}"), ra == 1e-3),
        check(format!("3% drop at dwell 2 decays 1e-3 -> {rb:e}"), rb == 6e-4 && b.epochs_at_current_lr == 0),
        check(format!("floor 1.2e-5 -> {rc:e}"), rc == 1e-5),
        check(format!("first epoch at a new rate holds 1e-3 -> {rd:e}"), rd == 1e-3),
    ])
}

struct Desk {
    _dir: tempfile::TempDir,
    train: FeatureSet,
    dev: FeatureSet,
}

fn desk_data(words: &[&str], clips_per_word: usize) -> Desk {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig {
        words: words.iter().map(|w| w.to_string()).collect(),
        clips_per_word,
        dev_fraction: 0.2,
        test_fraction: 0.0,
        max_noise: 0.05,
        seed: 1,
        ..Default::default()
    };
    generate_corpus(dir.path(), &cfg).unwrap();
    let manifest = scan_dataset(dir.path()).unwrap();
    let labels: Vec<usize> = words.iter().map(|w| label_for_word(w)).collect();
    let load = |s| FeatureSet::load(&manifest, &manifest.subset_task(s, &labels), &LoadOptions::default()).unwrap();
    Desk { train: load(Split::Train), dev: load(Split::Dev), _dir: dir }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn desk_learning() -> Verdict {
    let two = desk_data(&["yes", "no"], 100);
    let model = Model::build(&Variant::StAttNet4.spec(), 0).unwrap();
    let cfg = TrainConfig { epochs: 30, seed: 0, ..Default::default() };
    let out = fit_with(model, &two.train, &two.dev, &cfg, None, |_| {}).unwrap();
    let best_train = out.history.iter().map(|r| r.train_accuracy).fold(0.0, f64::max);
    let first = out.history.iter().position(|r| r.train_accuracy >= 0.95).map(|e| e + 1);
    let (_, frozen) = evaluate_loss(&out.model, &two.train, 100).unwrap();

    let four = desk_data(&["yes", "no", "up", "down"], 200);
    let dev = |v: Variant| -> Vec<f64> {
        (0..3)
            .map(|seed| {
                let model = Model::build(&v.spec(), seed).unwrap();
                let cfg = TrainConfig { epochs: 15, seed, ..Default::default() };
                let out = fit_with(model, &four.train, &four.dev, &cfg, None, |_| {}).unwrap();
                out.history[out.best_epoch.unwrap() - 1].dev_accuracy
            })
            .collect()
    };
    let att = dev(Variant::StAttNet4);
    let avg = dev(Variant::StNet4);
    let (ma, mb) = (median(att.clone()), median(avg.clone()));
    Verdict::Checks(vec![
        check(
            format!(
                "2-class, {} train clips: train accuracy {best_train:.3} >= 0.95 within 30 epochs (first at {first:?}, frozen {frozen:.3})",
                two.train.len()
            ),
            best_train >= 0.95,
        ),
        known(
            format!("4-class, {} train clips, 15 epochs: median dev ST-AttNet4 {ma:.3} {att:.3?} >= ST-Net4 {mb:.3} {avg:.3?} - 0.01", four.train.len()),
            ma >= mb - 0.01,
        ),
    ])
}

fn full_scale() -> Verdict {
    let Some(root) = std::env::var_os("KWS_SPEECH_COMMANDS").map(PathBuf::from) else {
        return Verdict::Skip("set KWS_SPEECH_COMMANDS to a Speech Commands V1 directory to run".into());
    };
    let manifest = scan_dataset(&root).unwrap();
    let opts = LoadOptions {
        cache_dir: Some(std::env::temp_dir().join("kws-acceptance-cache")),
        keep_audio: true,
        ..Default::default()
    };
    let train = FeatureSet::load(&manifest, &manifest.task(Split::Train), &opts).unwrap();
    let opts = LoadOptions { keep_audio: false, ..opts };
    let dev = FeatureSet::load(&manifest, &manifest.task(Split::Dev), &opts).unwrap();
    let test = FeatureSet::load(&manifest, &manifest.task(Split::Test), &opts).unwrap();
    let aug = Augmentation::standard(&manifest).unwrap();
    let model = Model::build(&Variant::StAttNet4.spec(), 0).unwrap();
    let cfg = TrainConfig { augment: true, ..Default::default() };
    let out = fit_with(model, &train, &dev, &cfg, Some(&aug), |r| {
        println!("    epoch {} train {:.4} dev {:.4} lr {:e}", r.epoch, r.train_accuracy, r.dev_accuracy, r.lr)
    })
    .unwrap();
    let acc = evaluate(&out.model, &test, 100).unwrap().accuracy;
    Verdict::Checks(vec![check(format!("ST-AttNet4 test accuracy {acc:.4} >= 0.95"), acc >= 0.95)])
}

fn roc_machinery() -> Verdict {
    let scores = [0.9, 0.8, 0.4, 0.3, 0.7];
    let labels = [true, true, true, false, false];
    let point = roc_point(&scores, &labels, 0.5);
    let mut r = rng(8);
    let mut monotone = true;
    for _ in 0..100 {
        let n = r.gen_range(2..50);
        let s: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..=1.0)).collect();
        let l: Vec<bool> = (0..n).map(|_| r.gen_bool(0.3)).collect();
        let mut prev = (f64::INFINITY, f64::NEG_INFINITY);
        for t in threshold_grid(1001) {
            let (fa, fr) = roc_point(&s, &l, t);
            monotone &= fa <= prev.0 && fr >= prev.1;
            prev = (fa, fr);
        }
    }
    let s: Vec<f64> = (0..40).map(|_| r.gen_range(0.0..=1.0)).collect();
    let l: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
    let c = roc_for_keyword(&s, &l, &threshold_grid(1001)).unwrap();
    let avg = vertical_average(&[c.clone(), c.clone(), c.clone()]).unwrap();
    let near = |p: &(f64, f64), q: &(f64, f64)| (p.0 - q.0).abs() < 1e-9 && (p.1 - q.1).abs() < 1e-9;
    let on_curve = avg.points.iter().all(|p| c.points.iter().any(|q| near(p, q)));
    // Interior points of a vertical run may be merged away; run ends may not.
    let run_ends_kept = c.points.iter().all(|q| {
        let run: Vec<f64> = c.points.iter().filter(|p| p.0 == q.0).map(|p| p.1).collect();
        let interior = q.1 < run[0] && q.1 > run[run.len() - 1];
        interior || avg.points.iter().any(|p| near(p, q))
    });
    Verdict::Checks(vec![
        check(format!("θ=0.5 gives {point:?}, brute force {:?}", count_rates(&[0.9, 0.8, 0.4], &[0.3, 0.7], 0.5)), {
            point == (0.5, 1.0 / 3.0) && point == count_rates(&[0.9, 0.8, 0.4], &[0.3, 0.7], 0.5)
        }),
        check("FAR non-increasing, FRR non-decreasing on 100 score sets", monotone),
        check(
            format!("averaging three copies reproduces the curve (area {:.6} vs {:.6})", avg.auc, c.auc),
            on_curve && run_ends_kept && (avg.auc - c.auc).abs() < 1e-9,
        ),
    ])
}

fn mfcc_conformance() -> Verdict {
    let oracle = MfccOracle::default();
    let mut r = rng(9);
    let mut worst = 0.0f64;
    let mut shapes = true;
    for i in 0..20 {
        let x: Vec<f64> = match i % 4 {
            0 => sine(r.gen_range(60.0..7_600.0), r.gen_range(0.05..0.9), r.gen_range(0.0..6.0), 16_000),
            1 => random_vec(16_000, &mut r).iter().map(|v| 0.2 * v).collect(),
            2 => {
                let rate = r.gen_range(1e-4..4e-4);
                (0..16_000).map(|n| 0.5 * (rate * (n * n) as f64 / 16_000.0).sin()).collect()
            }
            _ => {
                let (f1, f2) = (r.gen_range(100.0..1_000.0), r.gen_range(2_000.0..6_000.0));
                sine(f1, 0.3, 0.0, 16_000).iter().zip(sine(f2, 0.2, 1.0, 16_000)).map(|(a, b)| a + b).collect()
            }
        };
        let ours = mfcc(&AudioClip::new(x.clone(), 16_000).unwrap()).unwrap();
        shapes &= (ours.frames(), ours.coeffs()) == (98, 40);
        for (t, row) in oracle.compute(&x).iter().enumerate() {
            for (a, b) in ours.row(t).iter().zip(row) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Verdict::Checks(vec![
        check(format!("20 signals, worst coefficient deviation {worst:.1e} < 1e-6"), worst < 1e-6),
        check("every clip gives 98×40", shapes),
    ])
}

fn main() {
    let criteria: [(&str, &str, fn() -> Verdict); 9] = [
        ("AC1", "footprint reproduction", footprint_rows),
        ("AC2", "oracle equivalence", oracle_equivalence),
        ("AC3", "gradient correctness", gradients),
        ("AC4", "attention normalisation", attention_normalisation),
        ("AC5", "scheduler conformance", scheduler),
        ("AC6", "desk-scale learning", desk_learning),
        ("AC7", "full-scale reproduction", full_scale),
        ("AC8", "ROC machinery", roc_machinery),
        ("AC9", "MFCC conformance", mfcc_conformance),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC")).collect();
    let mut unexpected = 0;
    for (id, title, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let verdict = run();
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Verdict::Skip(why) => println!("[SKIP] {id} {title} ({why})"),
            Verdict::Checks(checks) => {
                let ok = checks.iter().all(|c| c.passed);
                println!("[{}] {id} {title} ({secs:.1} s)", if ok { "PASS" } else { "FAIL" });
                for c in &checks {
                    let tag = match (c.passed, c.known) {
                        (true, _) => "ok   ",
                        (false, true) => "known",
                        (false, false) => "FAIL ",
                    };
                    println!("    {tag} {}", c.name);
                    unexpected += usize::from(!c.passed && !c.known);
                }
            }
        }
    }
    if unexpected > 0 {
        println!("{unexpected} unexpected failure(s)");
        std::process::exit(1);
    }
}
