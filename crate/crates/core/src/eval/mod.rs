//! Dice scoring, report aggregation and comparison tables.

mod baselines;
mod overlay;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

pub use baselines::{
    image_queries, run_baselines, run_image_baselines, run_video_baselines, BenchConfig, ImageQuery,
};
pub use overlay::{encode_overlay, overlay_rgb, write_overlay, PALETTE};

use crate::synthvideo::Mask;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask dimensions differ: {pred:?} vs {truth:?}")]
    Dimension {
        pred: (usize, usize),
        truth: (usize, usize),
    },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error(transparent)]
    Vos(#[from] crate::vos::VosError),
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
}

/// `2|P ∩ T| / (|P| + |T|)` for one class; 1.0 when both are empty.
pub fn dice(pred: &Mask, truth: &Mask, class: u8) -> Result<f64, EvalError> {
    if pred.dims() != truth.dims() {
        return Err(EvalError::Dimension {
            pred: pred.dims(),
            truth: truth.dims(),
        });
    }
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels().iter().zip(truth.labels()) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        t += ib as usize;
        inter += (ia && ib) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// One prediction/truth pair to score. `group` is the video the item
/// belongs to; `pred` is `None` when the prediction is missing.
#[derive(Debug, Clone)]
pub struct EvalItem<'a> {
    pub group: String,
    pub key: String,
    pub pred: Option<&'a Mask>,
    pub truth: &'a Mask,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiceReport {
    /// Mean Dice per class over the scored items.
    pub per_class: BTreeMap<u8, f64>,
    /// Per group, the mean over classes of that group's per-class means.
    pub per_video: BTreeMap<String, f64>,
    /// Unweighted mean of `per_class`.
    pub macro_dice: f64,
    pub items: usize,
    /// Keys of items without a prediction; excluded from every average.
    pub missing: Vec<String>,
}

impl DiceReport {
    /// Element-wise mean of several reports over the same classes.
    pub fn mean(reports: &[DiceReport]) -> DiceReport {
        let mut out = DiceReport::default();
        if reports.is_empty() {
            return out;
        }
        let n = reports.len() as f64;
        for r in reports {
            for (&c, &v) in &r.per_class {
                *out.per_class.entry(c).or_default() += v / n;
            }
            for (g, &v) in &r.per_video {
                *out.per_video.entry(g.clone()).or_default() += v / n;
            }
            out.macro_dice += r.macro_dice / n;
        }
        out.items = reports[0].items;
        out.missing = reports[0].missing.clone();
        out
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores every item for classes `1..=classes`. With `foreground_only`,
/// a class is scored on an item only when the truth contains it.
pub fn evaluate(
    items: &[EvalItem],
    classes: u8,
    foreground_only: bool,
) -> Result<DiceReport, EvalError> {
    let mut sorted: Vec<&EvalItem> = items.iter().collect();
    sorted.sort_by(|a, b| (&a.group, &a.key).cmp(&(&b.group, &b.key)));
    let mut class_scores: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    let mut group_scores: BTreeMap<&str, BTreeMap<u8, Vec<f64>>> = BTreeMap::new();
    let mut report = DiceReport::default();
    for item in sorted {
        let Some(pred) = item.pred else {
            log::warn!("no prediction for {}; excluded", item.key);
            report.missing.push(item.key.clone());
            continue;
        };
        report.items += 1;
        for c in 1..=classes {
            if foreground_only && item.truth.count(c) == 0 {
                continue;
            }
            let d = dice(pred, item.truth, c)?;
            class_scores.entry(c).or_default().push(d);
            group_scores
                .entry(&item.group)
                .or_default()
                .entry(c)
                .or_default()
                .push(d);
        }
    }
    report.per_class = class_scores
        .iter()
        .filter_map(|(&c, v)| Some((c, mean(v)?)))
        .collect();
    report.per_video = group_scores
        .iter()
        .filter_map(|(g, m)| {
            let per: Vec<f64> = m.values().filter_map(|v| mean(v)).collect();
            Some((g.to_string(), mean(&per)?))
        })
        .collect();
    report.macro_dice =
        mean(&report.per_class.values().copied().collect::<Vec<_>>()).unwrap_or(0.0);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r
                .iter()
                .map(|c| {
                    if c.contains([',', '"', '\n']) {
                        format!("\"{}\"", c.replace('"', "\"\""))
                    } else {
                        c.clone()
                    }
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |cells: &[String], out: &mut String| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| {
                    if i == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&self.header, &mut out);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(&rule, &mut out);
        for r in &self.rows {
            line(r, &mut out);
        }
        out
    }
}

/// One row per named report: macro Dice, per-class Dice, item counts.
pub fn compare(reports: &[(String, DiceReport)]) -> ComparisonTable {
    let mut classes: Vec<u8> = reports
        .iter()
        .flat_map(|(_, r)| r.per_class.keys().copied())
        .collect();
    classes.sort_unstable();
    classes.dedup();
    let mut header = vec!["method".to_string(), "macro_dice".to_string()];
    header.extend(classes.iter().map(|c| format!("class_{c}")));
    header.push("items".into());
    header.push("missing".into());
    let rows = reports
        .iter()
        .map(|(name, r)| {
            let mut row = vec![name.clone(), format!("{:.4}", r.macro_dice)];
            row.extend(classes.iter().map(|c| {
                r.per_class
                    .get(c)
                    .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
            }));
            row.push(r.items.to_string());
            row.push(r.missing.len().to_string());
            row
        })
        .collect();
    ComparisonTable { header, rows }
}
