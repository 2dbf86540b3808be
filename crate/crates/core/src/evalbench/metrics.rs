//! Accuracy, per-class precision/recall/F1, support-weighted F1 and the
//! confusion matrix.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::datamodel::LabelSpace;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl MetricReport {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

pub fn compute_metrics(
    predictions: &[usize],
    labels: &[usize],
    space: &LabelSpace,
) -> Result<MetricReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Input("metrics of an empty evaluation set".into()));
    }
    let c = space.len();
    let mut confusion = vec![vec![0usize; c]; c];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= c || y >= c {
            return Err(Error::Input(format!(
                "class id {} outside label space of {c}",
                p.max(y)
            )));
        }
        confusion[y][p] += 1;
    }
    let total = labels.len() as f64;
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
    let mut per_class = Vec::with_capacity(c);
    let mut weighted_f1 = 0.0;
    for k in 0..c {
        let tp = confusion[k][k] as f64;
        let support: usize = confusion[k].iter().sum();
        let predicted: usize = (0..c).map(|r| confusion[r][k]).sum();
        let precision = if predicted > 0 {
            tp / predicted as f64
        } else {
            0.0
        };
        let recall = if support > 0 {
            tp / support as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        weighted_f1 += support as f64 / total * f1;
        per_class.push(ClassMetrics {
            label: space.get(k).expect("dense ids").name.clone(),
            precision,
            recall,
            f1,
            support,
        });
    }
    Ok(MetricReport {
        accuracy: correct as f64 / total,
        weighted_f1,
        per_class,
        confusion,
    })
}

/// One labelled row of a metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub split: String,
    pub report: MetricReport,
}

pub const METRICS_HEADER: &str = "name,split,n,accuracy,weighted_f1";

/// CSV with [`METRICS_HEADER`]; values printed with fixed 6 decimals.
pub fn render_metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.name,
            r.split,
            r.report.total(),
            r.report.accuracy,
            r.report.weighted_f1
        ));
    }
    out
}

pub fn write_csv(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| Error::io(path, e))
}
