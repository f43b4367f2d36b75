//! Micro/macro F1 and per-seed aggregation into experiment reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::Labels;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LabelCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl LabelCounts {
    fn f1(&self) -> Option<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        (denom > 0).then(|| 2.0 * self.tp as f64 / denom as f64)
    }
}

/// How macro-F1 treats a label that is neither present nor predicted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VacuousLabel {
    /// Counts as a perfect F1 of 1.
    #[default]
    One,
    /// Is left out of the average.
    Skip,
}

impl std::str::FromStr for VacuousLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one" => Ok(VacuousLabel::One),
            "skip" => Ok(VacuousLabel::Skip),
            other => Err(Error::Config(format!("unknown vacuous-label rule `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct F1Report {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub counts: Vec<LabelCounts>,
}

pub fn label_counts(y_true: &Labels, y_pred: &Labels) -> Result<Vec<LabelCounts>> {
    if y_true.n() != y_pred.n() || y_true.k() != y_pred.k() {
        return Err(Error::invalid(format!(
            "label shapes differ: {}×{} vs {}×{}",
            y_true.n(),
            y_true.k(),
            y_pred.n(),
            y_pred.k()
        )));
    }
    let k = y_true.k();
    let mut counts = vec![LabelCounts::default(); k];
    for (i, (&t, &p)) in y_true.bits().iter().zip(y_pred.bits()).enumerate() {
        let c = &mut counts[i % k];
        match (t, p) {
            (1, 1) => c.tp += 1,
            (0, 1) => c.fp += 1,
            (1, 0) => c.fn_ += 1,
            _ => {}
        }
    }
    Ok(counts)
}

pub fn f1_report(y_true: &Labels, y_pred: &Labels, vacuous: VacuousLabel) -> Result<F1Report> {
    let counts = label_counts(y_true, y_pred)?;
    let pooled = counts.iter().fold(LabelCounts::default(), |a, c| LabelCounts {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    let micro_f1 = pooled.f1().unwrap_or(0.0);
    let per_label: Vec<f64> = counts
        .iter()
        .filter_map(|c| match (c.f1(), vacuous) {
            (Some(f), _) => Some(f),
            (None, VacuousLabel::One) => Some(1.0),
            (None, VacuousLabel::Skip) => None,
        })
        .collect();
    let macro_f1 = if per_label.is_empty() {
        1.0
    } else {
        per_label.iter().sum::<f64>() / per_label.len() as f64
    };
    Ok(F1Report {
        micro_f1,
        macro_f1,
        counts,
    })
}

pub fn micro_f1(y_true: &Labels, y_pred: &Labels) -> Result<f64> {
    Ok(f1_report(y_true, y_pred, VacuousLabel::One)?.micro_f1)
}

pub fn macro_f1(y_true: &Labels, y_pred: &Labels) -> Result<f64> {
    Ok(f1_report(y_true, y_pred, VacuousLabel::One)?.macro_f1)
}

/// One metric value from one seed of one method under one setting.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetric {
    pub setting: String,
    pub nr: f64,
    pub method: String,
    pub metric: String,
    pub seed: u64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub setting: String,
    pub nr: f64,
    pub method: String,
    pub metric: String,
    /// Mean over seeds, in percent.
    pub mean: f64,
    /// Sample standard deviation over seeds, in percent.
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

const CSV_HEADER: [&str; 7] = ["setting", "nr", "method", "metric", "mean", "std", "n_seeds"];

/// Groups runs by (setting, nr, method, metric) in first-seen order and
/// reports mean and sample standard deviation scaled by 100.
pub fn build_report(runs: &[RunMetric]) -> Result<ExperimentReport> {
    if runs.is_empty() {
        return Err(Error::invalid("cannot build a report from zero runs"));
    }
    let mut groups: Vec<(&RunMetric, Vec<f64>)> = Vec::new();
    for r in runs {
        let same = |g: &&mut (&RunMetric, Vec<f64>)| {
            g.0.setting == r.setting && g.0.nr == r.nr && g.0.method == r.method && g.0.metric == r.metric
        };
        match groups.iter_mut().find(|g| same(g)) {
            Some(g) => g.1.push(r.value),
            None => groups.push((r, vec![r.value])),
        }
    }
    let rows = groups
        .into_iter()
        .map(|(key, values)| {
            let (mean, std) = mean_std(&values);
            ReportRow {
                setting: key.setting.clone(),
                nr: key.nr,
                method: key.method.clone(),
                metric: key.metric.clone(),
                mean: 100.0 * mean,
                std: 100.0 * std,
                n_seeds: values.len(),
            }
        })
        .collect();
    Ok(ExperimentReport { rows })
}

/// Mean and sample (n−1) standard deviation; the deviation of a single value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ExperimentReport {
    pub fn find(&self, setting: &str, nr: f64, method: &str, metric: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.setting == setting && (r.nr - nr).abs() < 1e-12 && r.method == method && r.metric == metric)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::invalid(e.to_string());
        w.write_record(CSV_HEADER).map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.setting.clone(),
                r.nr.to_string(),
                r.method.clone(),
                r.metric.clone(),
                r.mean.to_string(),
                r.std.to_string(),
                r.n_seeds.to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let bad = |e: &dyn std::fmt::Display| Error::format(path, e.to_string());
        let header = reader.headers().map_err(|e| bad(&e))?.clone();
        if header.iter().ne(CSV_HEADER) {
            return Err(Error::format(path, "unexpected report header"));
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| bad(&e))?;
            let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(&e));
            rows.push(ReportRow {
                setting: rec[0].to_string(),
                nr: num(1)?,
                method: rec[2].to_string(),
                metric: rec[3].to_string(),
                mean: num(4)?,
                std: num(5)?,
                n_seeds: rec[6].parse().map_err(|e| bad(&e))?,
            });
        }
        Ok(ExperimentReport { rows })
    }

    /// Aligned columns for reading in a terminal.
    pub fn to_text(&self) -> String {
        let cells: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.setting.clone(),
                    format!("{:.2}", r.nr),
                    r.method.clone(),
                    r.metric.clone(),
                    format!("{:.2} ± {:.2}", r.mean, r.std),
                    r.n_seeds.to_string(),
                ]
            })
            .collect();
        let head = ["setting", "nr", "method", "metric", "mean ± std", "seeds"];
        let mut widths: Vec<usize> = head.iter().map(|h| h.chars().count()).collect();
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, row: &[String]| {
            let parts: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &head.map(String::from));
        for row in &cells {
            line(&mut out, row);
        }
        out
    }
}
