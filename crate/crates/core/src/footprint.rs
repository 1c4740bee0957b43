//! Parameter and multiplier accounting.
//!
//! Headline parameter counts cover convolution, attention and classifier
//! weights. Batch-norm scale/shift parameters are reported in a separate
//! column. Multipliers are the multiplications of one inference over a
//! `T`-frame input: `T·k·C` per depthwise layer, `T·C_in·C_out` per
//! pointwise layer, `T·D_u·D + D_u·D + 2·T·D` for pooled attention and
//! `C·K` for the classifier. Pooling divisions are not counted.

use std::fmt::Write as _;

use crate::kernels::KERNEL_SIZE;
use crate::model::{ModelSpec, Reduction, Variant};

/// A value as printed in the published per-layer tables, e.g. `1.9K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Published {
    pub text: &'static str,
    pub value: f64,
}

const fn published(text: &'static str, value: f64) -> Published {
    Published { text, value }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FootprintRow {
    pub layer: String,
    pub kernel: Option<usize>,
    pub channels: usize,
    pub dilation: String,
    pub params: u64,
    pub multipliers: u64,
    pub norm_params: u64,
    pub published_params: Option<Published>,
    pub published_multipliers: Option<Published>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Footprint {
    pub variant: String,
    pub rows: Vec<FootprintRow>,
    pub total_params: u64,
    pub total_multipliers: u64,
    pub total_norm_params: u64,
    pub published_total_params: Option<Published>,
    pub published_total_multipliers: Option<Published>,
}

/// Relative deviation beyond which a row is reported as disagreeing with
/// its published figure.
pub const DISCREPANCY_THRESHOLD: f64 = 0.05;

struct Reference {
    conv: (Published, Published),
    dilated: (Published, Published),
    plain: Option<(Published, Published)>,
    reduction: (Published, Published),
    classifier: (Published, Published),
    total: (Published, Published),
}

fn reference(name: &str) -> Option<Reference> {
    let variant: Variant = name.parse().ok()?;
    match variant {
        Variant::StAttNet4 => Some(Reference {
            conv: (published("1.9K", 1.9e3), published("188K", 188e3)),
            dilated: (published("17.2K", 17.2e3), published("1.69M", 1.69e6)),
            plain: None,
            reduction: (published("4.3K", 4.3e3), published("207K", 207e3)),
            classifier: (published("0.5K", 0.5e3), published("540", 540.0)),
            total: (published("24K", 24e3), published("2.0M", 2.0e6)),
        }),
        Variant::StAttNet4Wide => Some(Reference {
            conv: (published("2.7K", 2.7e3), published("266K", 266e3)),
            dilated: (published("35.3K", 35.3e3), published("3.46M", 3.46e6)),
            plain: None,
            reduction: (published("8.5K", 8.5e3), published("428K", 428e3)),
            classifier: (published("0.8K", 0.8e3), published("780", 780.0)),
            total: (published("48K", 48e3), published("4.1M", 4.1e6)),
        }),
        Variant::StAttNet7 => Some(Reference {
            conv: (published("1.9K", 1.9e3), published("188K", 188e3)),
            dilated: (published("17.2K", 17.2e3), published("1.69M", 1.69e6)),
            plain: Some((published("12.9K", 12.9e3), published("1.27M", 1.27e6))),
            reduction: (published("4.3K", 4.3e3), published("207K", 207e3)),
            classifier: (published("0.5K", 0.5e3), published("540", 540.0)),
            total: (published("37K", 37e3), published("3.3M", 3.3e6)),
        }),
        Variant::StNet4 => None,
    }
}

/// Weights and multipliers of one separable unit.
fn separable(frames: u64, c_in: u64, c_out: u64) -> (u64, u64, u64) {
    let k = KERNEL_SIZE as u64;
    let params = k * c_in + c_in * c_out;
    (params, frames * params, 2 * c_in + 2 * c_out)
}

/// Footprint of `spec`, grouped like the published tables.
pub fn footprint(spec: &ModelSpec) -> Footprint {
    let t = spec.frames as u64;
    let c = spec.channels as u64;
    let reference = reference(&spec.name);
    let pick = |f: fn(&Reference) -> Option<(Published, Published)>| reference.as_ref().and_then(f);
    let mut rows = Vec::new();

    let (p, m, n) = separable(t, spec.features as u64, c);
    let conv_ref = pick(|r| Some(r.conv));
    rows.push(row("conv", Some(KERNEL_SIZE), spec.channels, "-", p, m, n, conv_ref));

    let (bp, bm, bn) = separable(t, c, c);
    if spec.dilated_blocks > 0 {
        let blocks = spec.dilated_blocks as u64;
        rows.push(row(
            &format!("res x{}", spec.dilated_blocks),
            Some(KERNEL_SIZE),
            spec.channels,
            "2^floor(i/3)",
            2 * blocks * bp,
            2 * blocks * bm,
            2 * blocks * bn,
            pick(|r| Some(r.dilated)),
        ));
    }
    if spec.plain_blocks > 0 {
        let blocks = spec.plain_blocks as u64;
        rows.push(row(
            &format!("res x{}", spec.plain_blocks),
            Some(KERNEL_SIZE),
            spec.channels,
            "1",
            2 * blocks * bp,
            2 * blocks * bm,
            2 * blocks * bn,
            pick(|r| r.plain),
        ));
    }
    match spec.reduction {
        Reduction::PooledAttention => rows.push(row(
            "avg-att",
            None,
            spec.channels,
            "-",
            c * c,
            t * c * c + c * c + 2 * t * c,
            0,
            pick(|r| Some(r.reduction)),
        )),
        Reduction::AvgPool => rows.push(row("avg-pool", None, spec.channels, "-", 0, 0, 0, None)),
    }
    let k = spec.num_classes as u64;
    rows.push(row("softmax", None, spec.num_classes, "-", c * k, c * k, 0, pick(|r| Some(r.classifier))));

    let total = pick(|r| Some(r.total));
    Footprint {
        variant: spec.name.clone(),
        total_params: rows.iter().map(|r| r.params).sum(),
        total_multipliers: rows.iter().map(|r| r.multipliers).sum(),
        total_norm_params: rows.iter().map(|r| r.norm_params).sum(),
        rows,
        published_total_params: total.map(|t| t.0),
        published_total_multipliers: total.map(|t| t.1),
    }
}

#[allow(clippy::too_many_arguments)]
fn row(
    layer: &str,
    kernel: Option<usize>,
    channels: usize,
    dilation: &str,
    params: u64,
    multipliers: u64,
    norm_params: u64,
    reference: Option<(Published, Published)>,
) -> FootprintRow {
    FootprintRow {
        layer: layer.to_string(),
        kernel,
        channels,
        dilation: dilation.to_string(),
        params,
        multipliers,
        norm_params,
        published_params: reference.map(|r| r.0),
        published_multipliers: reference.map(|r| r.1),
    }
}

fn deviates(ours: u64, reference: Option<Published>) -> Option<(Published, f64)> {
    let r = reference?;
    let rel = (ours as f64 - r.value) / r.value;
    (rel.abs() > DISCREPANCY_THRESHOLD).then_some((r, rel))
}

/// `12345` → `12,345`.
pub fn group_digits(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl Footprint {
    pub fn row(&self, layer: &str) -> Option<&FootprintRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }

    /// Rows (and the total) whose counts deviate from the published figure
    /// by more than [`DISCREPANCY_THRESHOLD`], as human-readable notes.
    pub fn discrepancies(&self) -> Vec<String> {
        let mut notes = Vec::new();
        let mut check = |label: &str, what: &str, ours: u64, reference: Option<Published>| {
            if let Some((r, rel)) = deviates(ours, reference) {
                notes.push(format!(
                    "{label}: {what} {} vs published {} ({:+.0}%)",
                    group_digits(ours),
                    r.text,
                    rel * 100.0
                ));
            }
        };
        for r in &self.rows {
            check(&r.layer, "params", r.params, r.published_params);
            check(&r.layer, "multipliers", r.multipliers, r.published_multipliers);
        }
        check("Total", "params", self.total_params, self.published_total_params);
        check("Total", "multipliers", self.total_multipliers, self.published_total_multipliers);
        notes
    }

    pub fn to_text(&self) -> String {
        let pubcol = |p: Option<Published>| p.map_or("-", |p| p.text);
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.variant);
        let _ = writeln!(
            out,
            "{:<10} {:>3} {:>4} {:>13} {:>10} {:>12} {:>8} {:>9} {:>9}",
            "layer", "k", "c", "d", "params", "mults", "bn", "pub.par", "pub.mult"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:>3} {:>4} {:>13} {:>10} {:>12} {:>8} {:>9} {:>9}",
                r.layer,
                r.kernel.map_or("-".to_string(), |k| k.to_string()),
                r.channels,
                r.dilation,
                group_digits(r.params),
                group_digits(r.multipliers),
                group_digits(r.norm_params),
                pubcol(r.published_params),
                pubcol(r.published_multipliers),
            );
        }
        let _ = writeln!(
            out,
            "{:<10} {:>3} {:>4} {:>13} {:>10} {:>12} {:>8} {:>9} {:>9}",
            "Total",
            "-",
            "-",
            "-",
            group_digits(self.total_params),
            group_digits(self.total_multipliers),
            group_digits(self.total_norm_params),
            pubcol(self.published_total_params),
            pubcol(self.published_total_multipliers),
        );
        for note in self.discrepancies() {
            let _ = writeln!(out, "note: {note}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let pubcol = |p: Option<Published>| p.map_or(String::new(), |p| p.text.to_string());
        let mut out = String::from("layer,k,c,d,params,multipliers,bn_params,published_params,published_multipliers\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.layer,
                r.kernel.map_or("-".to_string(), |k| k.to_string()),
                r.channels,
                r.dilation,
                r.params,
                r.multipliers,
                r.norm_params,
                pubcol(r.published_params),
                pubcol(r.published_multipliers),
            );
        }
        let _ = writeln!(
            out,
            "Total,-,-,-,{},{},{},{},{}",
            self.total_params,
            self.total_multipliers,
            self.total_norm_params,
            pubcol(self.published_total_params),
            pubcol(self.published_total_multipliers),
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_model_rows() {
        let fp = footprint(&Variant::StAttNet4.spec());
        let conv = fp.row("conv").unwrap();
        assert_eq!((conv.params, conv.multipliers), (1_920, 188_160));
        let res = fp.row("res x4").unwrap();
        assert_eq!((res.params, res.multipliers), (17_280, 1_693_440));
        let att = fp.row("avg-att").unwrap();
        assert_eq!(att.params, 2_025);
        assert_eq!(att.multipliers, 98 * 45 * 45 + 45 * 45 + 2 * 98 * 45);
        assert_eq!(fp.row("softmax").unwrap().params, 540);
    }

    #[test]
    fn wide_and_deep_rows() {
        let wide = footprint(&Variant::StAttNet4Wide.spec());
        assert_eq!(wide.row("softmax").unwrap().params, 780);
        assert_eq!(wide.row("avg-att").unwrap().params, 4_225);
        assert_eq!(wide.row("conv").unwrap().params, 2_720);
        let deep = footprint(&Variant::StAttNet7.spec());
        let plain = deep.row("res x3").unwrap();
        assert_eq!((plain.params, plain.multipliers), (12_960, 1_270_080));
    }

    #[test]
    fn totals_are_row_sums_and_attention_gap_is_flagged() {
        let fp = footprint(&Variant::StAttNet4.spec());
        assert_eq!(fp.total_params, fp.rows.iter().map(|r| r.params).sum::<u64>());
        let notes = fp.discrepancies();
        assert!(notes.iter().any(|n| n.starts_with("avg-att: params 2,025 vs published 4.3K")));
        assert!(!notes.iter().any(|n| n.starts_with("conv")));
    }

    #[test]
    fn ablation_has_no_reference_and_zero_cost_pooling() {
        let fp = footprint(&Variant::StNet4.spec());
        assert!(fp.discrepancies().is_empty());
        assert_eq!(fp.row("avg-pool").unwrap().params, 0);
    }

    #[test]
    fn digit_grouping() {
        assert_eq!(group_digits(188_160), "188,160");
        assert_eq!(group_digits(540), "540");
        assert_eq!(group_digits(1_693_440), "1,693,440");
    }
}
