//! Pixel confusion counts, the five segmentation metrics, and
//! table/CSV reporting.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Class-index mask, row-major `[height, width]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl IndexMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "index_mask",
                format!("{height}x{width} mask with {} entries", data.len()),
            ));
        }
        Ok(IndexMask { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        IndexMask {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// One-vs-rest pixel counts for a single class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(self, o: Self) -> Self {
        ConfusionMatrix {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ConfusionMatrix::default(), |a, b| a + b)
    }
}

/// Counts `positive_class` against every other class. Both masks must
/// have the same shape and only contain indices below `num_classes`.
pub fn confusion(
    pred: &IndexMask,
    truth: &IndexMask,
    positive_class: u8,
    num_classes: u8,
) -> Result<ConfusionMatrix> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::shape(
            "confusion",
            format!(
                "prediction {}x{} against truth {}x{}",
                pred.height, pred.width, truth.height, truth.width
            ),
        ));
    }
    if positive_class >= num_classes {
        return Err(Error::Config(format!(
            "positive class {positive_class} outside 0..{num_classes}"
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (i, (&p, &t)) in pred.data.iter().zip(&truth.data).enumerate() {
        if p >= num_classes || t >= num_classes {
            return Err(Error::Data(format!(
                "class index {} at pixel {i} outside 0..{num_classes}",
                p.max(t)
            )));
        }
        match (p == positive_class, t == positive_class) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (1.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// `(TP+TN)/(TP+TN+FP+FN)`; 0/0 counts as 1.
pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.tp + cm.tn, cm.total()).0
}

/// `TN/(TN+FP)`; 0/0 counts as 1.
pub fn specificity(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.tn, cm.tn + cm.fp).0
}

/// `TP/(TP+FN)`; 0/0 counts as 1.
pub fn sensitivity(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.tp, cm.tp + cm.fn_).0
}

/// `2TP/(2TP+FP+FN)`; 0/0 counts as 1.
pub fn f1(cm: &ConfusionMatrix) -> f64 {
    ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_).0
}

/// `TP/(TP+FP+FN)`, i.e. `|y∩ŷ| / (|y|+|ŷ|−|y∩ŷ|)`; 0/0 counts as 1.
pub fn jaccard(cm: &ConfusionMatrix) -> f64 {
    ratio(cm.tp, cm.tp + cm.fp + cm.fn_).0
}

/// The five metrics in table order, with a flag when any of them hit the
/// 0/0 convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSet {
    pub f1: f64,
    pub se: f64,
    pub sp: f64,
    pub ac: f64,
    pub js: f64,
    pub degenerate: bool,
}

impl MetricSet {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let degenerate = [
            cm.total(),
            cm.tn + cm.fp,
            cm.tp + cm.fn_,
            2 * cm.tp + cm.fp + cm.fn_,
        ]
        .contains(&0);
        MetricSet {
            f1: f1(cm),
            se: sensitivity(cm),
            sp: specificity(cm),
            ac: accuracy(cm),
            js: jaccard(cm),
            degenerate,
        }
    }

    pub fn new(f1: f64, se: f64, sp: f64, ac: f64, js: f64) -> Self {
        MetricSet {
            f1,
            se,
            sp,
            ac,
            js,
            degenerate: false,
        }
    }

    /// Values in table column order F1, SE, SP, AC, JS.
    pub fn values(&self) -> [f64; 5] {
        [self.f1, self.se, self.sp, self.ac, self.js]
    }

    fn mean(sets: &[MetricSet]) -> MetricSet {
        let n = sets.len() as f64;
        let avg = |f: fn(&MetricSet) -> f64| sets.iter().map(f).sum::<f64>() / n;
        MetricSet {
            f1: avg(|m| m.f1),
            se: avg(|m| m.se),
            sp: avg(|m| m.sp),
            ac: avg(|m| m.ac),
            js: avg(|m| m.js),
            degenerate: sets.iter().any(|m| m.degenerate),
        }
    }
}

/// Metrics over a set of images.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMetrics {
    pub per_image: Vec<MetricSet>,
    /// Metrics of the summed confusion matrix.
    pub pooled: MetricSet,
    /// Unweighted mean of the per-image metrics.
    pub mean_per_image: MetricSet,
    pub pooled_confusion: ConfusionMatrix,
}

pub fn evaluate_dataset(
    predictions: &[IndexMask],
    truths: &[IndexMask],
    positive_class: u8,
    num_classes: u8,
) -> Result<DatasetMetrics> {
    if predictions.len() != truths.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} ground-truth masks",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Data("cannot evaluate an empty set of images".into()));
    }
    let cms = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| confusion(p, t, positive_class, num_classes))
        .collect::<Result<Vec<_>>>()?;
    let per_image: Vec<MetricSet> = cms.iter().map(MetricSet::from_confusion).collect();
    let pooled_confusion: ConfusionMatrix = cms.iter().copied().sum();
    Ok(DatasetMetrics {
        pooled: MetricSet::from_confusion(&pooled_confusion),
        mean_per_image: MetricSet::mean(&per_image),
        per_image,
        pooled_confusion,
    })
}

/// Fraction of pixels whose predicted class equals the true class,
/// over all classes.
pub fn pixel_accuracy(predictions: &[IndexMask], truths: &[IndexMask]) -> Result<f64> {
    let mut hit = 0u64;
    let mut total = 0u64;
    if predictions.len() != truths.len() {
        return Err(Error::Data("prediction/truth count mismatch".into()));
    }
    for (p, t) in predictions.iter().zip(truths) {
        if p.data.len() != t.data.len() {
            return Err(Error::shape("pixel_accuracy", "mask sizes differ"));
        }
        hit += p.data.iter().zip(&t.data).filter(|(a, b)| a == b).count() as u64;
        total += p.data.len() as u64;
    }
    if total == 0 {
        return Err(Error::Data("no pixels to score".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// Column names in report order.
pub const COLUMNS: [&str; 5] = ["F1", "SE", "SP", "AC", "JS"];

/// One named report row. `None` marks a metric the caller could not supply.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub values: [Option<f64>; 5],
}

impl ReportRow {
    pub fn new(name: impl Into<String>, m: &MetricSet) -> Self {
        ReportRow {
            name: name.into(),
            values: m.values().map(Some),
        }
    }

    fn complete(&self) -> Result<[f64; 5]> {
        let mut out = [0.0; 5];
        for (i, v) in self.values.iter().enumerate() {
            out[i] = v.ok_or_else(|| {
                Error::Data(format!("row '{}' is missing {}", self.name, COLUMNS[i]))
            })?;
        }
        Ok(out)
    }
}

/// Plain-text table with columns F1, SE, SP, AC, JS at three decimals.
pub fn format_report(rows: &[ReportRow]) -> Result<String> {
    let width = rows
        .iter()
        .map(|r| r.name.chars().count())
        .chain(std::iter::once("Method".len()))
        .max()
        .unwrap_or(6);
    let mut out = String::new();
    write!(out, "{:<width$}", "Method").unwrap();
    for c in COLUMNS {
        write!(out, "  {c:>5}").unwrap();
    }
    out.push('\n');
    for r in rows {
        let vals = r.complete()?;
        write!(out, "{:<width$}", r.name).unwrap();
        for v in vals {
            write!(out, "  {v:>5.3}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// CSV with header `name,f1,se,sp,ac,js`.
pub fn format_csv(rows: &[ReportRow]) -> Result<String> {
    let mut out = String::from("name,f1,se,sp,ac,js\n");
    for r in rows {
        let vals = r.complete()?;
        let name = if r.name.contains([',', '"', '\n']) {
            format!("\"{}\"", r.name.replace('"', "\"\""))
        } else {
            r.name.clone()
        };
        out.push_str(&name);
        for v in vals {
            write!(out, ",{v:.3}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}
