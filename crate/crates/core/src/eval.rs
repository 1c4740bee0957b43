//! Accuracy, confusion and keyword ROC curves (false alarm vs false
//! reject) with vertical averaging.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{Batches, FeatureSet, CLASS_NAMES, KEYWORDS};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::argmax;

pub const THRESHOLD_STEPS: usize = 1001;

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InputValidation(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::InputValidation("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `classes×classes` counts, rows indexed by true label.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    accuracy(predictions, labels)?;
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(Error::InputValidation(format!("class {} outside 0..{classes}", p.max(l))));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// `n` evenly spaced thresholds from 0 to 1 inclusive.
pub fn threshold_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// Rates at one threshold: a score at or above `threshold` is accepted.
pub fn roc_point(scores: &[f64], positives: &[bool], threshold: f64) -> (f64, f64) {
    let (mut fa, mut fr, mut neg, mut pos) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &is_pos) in scores.iter().zip(positives) {
        if is_pos {
            pos += 1;
            fr += usize::from(s < threshold);
        } else {
            neg += 1;
            fa += usize::from(s >= threshold);
        }
    }
    (fa as f64 / neg.max(1) as f64, fr as f64 / pos.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(false alarm rate, false reject rate)`, FAR ascending; at equal FAR,
    /// FRR descending.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    /// Sorts, drops duplicates and computes the area.
    pub fn from_points(mut points: Vec<(f64, f64)>) -> Self {
        points.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
        points.dedup();
        let auc = trapezoid(&points);
        Self { points, auc }
    }

    /// FRR just left and just right of `far`, linear between points.
    fn limits(&self, far: f64) -> (f64, f64) {
        let p = &self.points;
        let first = p.partition_point(|q| q.0 < far);
        let end = p.partition_point(|q| q.0 <= far);
        if first < end {
            return (p[first].1, p[end - 1].1);
        }
        if first == 0 {
            return (p[0].1, p[0].1);
        }
        if first == p.len() {
            let last = p[p.len() - 1].1;
            return (last, last);
        }
        let (a, b) = (p[first - 1], p[first]);
        let y = a.1 + (b.1 - a.1) * (far - a.0) / (b.0 - a.0);
        (y, y)
    }
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Sweeps `thresholds` for one keyword. The curve also carries the
/// reject-everything point `(0, 1)`, the limit of thresholds above 1.
pub fn roc_for_keyword(scores: &[f64], positives: &[bool], thresholds: &[f64]) -> Result<RocCurve> {
    if scores.len() != positives.len() {
        return Err(Error::InputValidation(format!("{} scores, {} labels", scores.len(), positives.len())));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InputValidation(format!("score {s} outside [0, 1]")));
    }
    let pos = positives.iter().filter(|&&p| p).count();
    if pos == 0 || pos == positives.len() {
        return Err(Error::UndefinedCurve(format!("{pos} positives among {} examples", positives.len())));
    }
    let mut points: Vec<_> = thresholds.iter().map(|&t| roc_point(scores, positives, t)).collect();
    points.push((0.0, 1.0));
    Ok(RocCurve::from_points(points))
}

/// Pointwise mean FRR over the union of the curves' FAR values. Vertical
/// jumps are kept, so the area of the result is the mean area.
pub fn vertical_average(curves: &[RocCurve]) -> Result<RocCurve> {
    if curves.is_empty() {
        return Err(Error::InputValidation("no curves to average".into()));
    }
    let mut grid: Vec<f64> = curves.iter().flat_map(|c| c.points.iter().map(|p| p.0)).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let n = curves.len() as f64;
    let mut points = Vec::with_capacity(2 * grid.len());
    for x in grid {
        let (mut left, mut right) = (0.0, 0.0);
        for c in curves {
            let (l, r) = c.limits(x);
            left += l;
            right += r;
        }
        points.push((x, left / n));
        if right != left {
            points.push((x, right / n));
        }
    }
    Ok(RocCurve::from_points(points))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordRoc {
    pub keyword: String,
    /// `None` when the set lacks positives or negatives for the keyword.
    pub curve: Option<RocCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub keywords: Vec<KeywordRoc>,
    pub average: Option<RocCurve>,
}

/// Scores a frozen model on `set`. Keyword scores are the softmax
/// posteriors; negatives for keyword `k` are all other examples.
pub fn evaluate(model: &Model, set: &FeatureSet, batch_size: usize) -> Result<EvalReport> {
    let classes = model.spec().num_classes;
    let mut probs = Vec::with_capacity(set.len() * classes);
    for batch in Batches::sequential(set, batch_size)? {
        probs.extend_from_slice(model.predict(&batch?.inputs)?.data());
    }
    report_from_posteriors(&probs, set.labels(), classes)
}

/// Builds a report from row-major `N×classes` posteriors.
pub fn report_from_posteriors(probs: &[f64], labels: &[usize], classes: usize) -> Result<EvalReport> {
    if probs.len() != labels.len() * classes {
        return Err(Error::Shape(format!("{} posteriors for {}×{classes}", probs.len(), labels.len())));
    }
    let predictions: Vec<usize> = probs.chunks(classes).map(argmax).collect();
    let grid = threshold_grid(THRESHOLD_STEPS);
    let keywords: Vec<KeywordRoc> = KEYWORDS
        .iter()
        .enumerate()
        .take(classes)
        .map(|(k, word)| {
            let scores: Vec<f64> = probs.chunks(classes).map(|row| row[k].clamp(0.0, 1.0)).collect();
            let positives: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            let curve = match roc_for_keyword(&scores, &positives, &grid) {
                Ok(c) => Some(c),
                Err(Error::UndefinedCurve(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(KeywordRoc { keyword: word.to_string(), curve })
        })
        .collect::<Result<_>>()?;
    let defined: Vec<RocCurve> = keywords.iter().filter_map(|k| k.curve.clone()).collect();
    let average = if defined.is_empty() { None } else { Some(vertical_average(&defined)?) };
    Ok(EvalReport {
        examples: labels.len(),
        accuracy: accuracy(&predictions, labels)?,
        confusion: confusion_matrix(&predictions, labels, classes)?,
        keywords,
        average,
    })
}

fn class_name(i: usize) -> String {
    CLASS_NAMES.get(i).map_or_else(|| format!("class{i}"), |s| s.to_string())
}

impl EvalReport {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "examples,{}", self.examples);
        let _ = writeln!(out, "accuracy,{:.6}", self.accuracy);
        for k in &self.keywords {
            match &k.curve {
                Some(c) => writeln!(out, "auc_{},{:.6}", k.keyword, c.auc),
                None => writeln!(out, "auc_{},", k.keyword),
            }
            .ok();
        }
        if let Some(avg) = &self.average {
            let _ = writeln!(out, "auc_average,{:.6}", avg.auc);
        }
        out
    }

    pub fn confusion_csv(&self) -> String {
        let n = self.confusion.len();
        let mut out = String::from("true\\predicted");
        for j in 0..n {
            out.push(',');
            out.push_str(&class_name(j));
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            out.push_str(&class_name(i));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Long format: one row per point of every keyword curve and the
    /// average (named `average`).
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("curve,far,frr\n");
        let named = self
            .keywords
            .iter()
            .filter_map(|k| k.curve.as_ref().map(|c| (k.keyword.as_str(), c)))
            .chain(self.average.as_ref().map(|c| ("average", c)));
        for (name, c) in named {
            for (x, y) in &c.points {
                let _ = writeln!(out, "{name},{x:.6},{y:.6}");
            }
        }
        out
    }

    pub fn roc_svg(&self) -> String {
        let curves: Vec<&RocCurve> = self.keywords.iter().filter_map(|k| k.curve.as_ref()).collect();
        roc_svg(&curves, self.average.as_ref())
    }
}

/// A square plot with thin keyword curves and a bold average.
pub fn roc_svg(curves: &[&RocCurve], average: Option<&RocCurve>) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 50.0;
    let map = |(x, y): (f64, f64)| (PAD + x * SIZE, PAD + (1.0 - y) * SIZE);
    let polyline = |c: &RocCurve, style: &str| {
        let pts: Vec<String> = c.points.iter().map(|&p| map(p)).map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        format!("  <polyline fill=\"none\" {style} points=\"{}\"/>\n", pts.join(" "))
    };
    let total = SIZE + 2.0 * PAD;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total}\" height=\"{total}\" viewBox=\"0 0 {total} {total}\">\n"
    );
    let _ = writeln!(
        svg,
        "  <rect x=\"{PAD}\" y=\"{PAD}\" width=\"{SIZE}\" height=\"{SIZE}\" fill=\"white\" stroke=\"black\"/>"
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let (x, y) = map((v, v));
        let _ = writeln!(
            svg,
            "  <text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{v:.2}</text>",
            PAD + SIZE + 16.0
        );
        let _ = writeln!(
            svg,
            "  <text x=\"{:.1}\" y=\"{y:.1}\" font-size=\"11\" text-anchor=\"end\">{v:.2}</text>",
            PAD - 6.0
        );
    }
    let _ = writeln!(
        svg,
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">false alarm rate</text>",
        PAD + SIZE / 2.0,
        total - 8.0
    );
    let _ = writeln!(
        svg,
        "  <text x=\"14\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">false reject rate</text>",
        PAD + SIZE / 2.0,
        PAD + SIZE / 2.0
    );
    for c in curves {
        svg.push_str(&polyline(c, "stroke=\"#9aa\" stroke-width=\"1\""));
    }
    if let Some(avg) = average {
        svg.push_str(&polyline(avg, "stroke=\"#c22\" stroke-width=\"2.5\""));
    }
    svg.push_str("</svg>\n");
    svg
}
