//! Multi-label classification and ranking metrics, plus R² and RMSE.
//!
//! Ranks follow `rank_ij = |{k : P_ik >= P_ij}|`, so ties are pessimistic.
//! Precision or recall of a class with a zero denominator is 0. Rows without
//! a positive label are left out of coverage and LRAP; rows lacking either a
//! positive or a negative are left out of the ranking loss. Both exclusion
//! counts are reported.
//!
//! Everything is accumulated in [`MultiLabelAccumulator`], whose shards merge
//! by plain summation.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KeyValues;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Number of labels scoring at least as high as label `j`, `j` included.
pub fn rank_of(row: &[f64], j: usize) -> usize {
    row.iter().filter(|&&p| p >= row[j]).count()
}

/// `p >= threshold` per element.
pub fn threshold(probs: &[f64], t: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= t)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        harmonic(self.precision(), self.recall())
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Ground truth `y`, scores `p` and thresholded predictions, all `B x K`
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelEval {
    pub n_labels: usize,
    pub y: Vec<u8>,
    pub p: Vec<f64>,
    pub y_hat: Vec<u8>,
}

impl MultiLabelEval {
    pub fn new(n_labels: usize, y: Vec<u8>, p: Vec<f64>, y_hat: Vec<u8>) -> Result<Self> {
        if n_labels == 0 || y.len() % n_labels != 0 || p.len() != y.len() || y_hat.len() != y.len() {
            return Err(Error::dim(
                "metrics",
                format!("K={n_labels} with {} labels, {} scores, {} predictions", y.len(), p.len(), y_hat.len()),
            ));
        }
        if y.iter().chain(&y_hat).any(|&v| v > 1) {
            return Err(Error::Contract("labels and predictions must be 0 or 1".into()));
        }
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("scores must lie in [0, 1]".into()));
        }
        Ok(MultiLabelEval { n_labels, y, p, y_hat })
    }

    /// Predictions from `p >= threshold`.
    pub fn from_probs(n_labels: usize, y: Vec<u8>, p: Vec<f64>, t: f64) -> Result<Self> {
        let y_hat = threshold(&p, t);
        Self::new(n_labels, y, p, y_hat)
    }

    pub fn rows(&self) -> usize {
        self.y.len() / self.n_labels
    }

    pub fn accumulate(&self) -> MultiLabelAccumulator {
        let mut acc = MultiLabelAccumulator::new(self.n_labels);
        let k = self.n_labels;
        for i in 0..self.rows() {
            let r = i * k..(i + 1) * k;
            acc.add_row(&self.y[r.clone()], &self.p[r.clone()], &self.y_hat[r]);
        }
        acc
    }
}

/// Mergeable sufficient statistics for every multi-label metric.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelAccumulator {
    pub counts: Vec<ClassCounts>,
    pub rows: u64,
    pub hamming_sum: f64,
    pub ranking_loss_sum: f64,
    pub ranking_rows: u64,
    pub ranking_excluded: u64,
    pub coverage_sum: f64,
    pub lrap_sum: f64,
    pub positive_rows: u64,
}

impl MultiLabelAccumulator {
    pub fn new(n_labels: usize) -> Self {
        MultiLabelAccumulator {
            counts: vec![ClassCounts::default(); n_labels],
            rows: 0,
            hamming_sum: 0.0,
            ranking_loss_sum: 0.0,
            ranking_rows: 0,
            ranking_excluded: 0,
            coverage_sum: 0.0,
            lrap_sum: 0.0,
            positive_rows: 0,
        }
    }

    pub fn add_row(&mut self, y: &[u8], p: &[f64], y_hat: &[u8]) {
        let k = y.len();
        let mut mismatches = 0;
        for j in 0..k {
            let c = &mut self.counts[j];
            match (y[j], y_hat[j]) {
                (1, 1) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (1, 0) => c.fn_ += 1,
                _ => c.tn += 1,
            }
            if y[j] != y_hat[j] {
                mismatches += 1;
            }
        }
        self.rows += 1;
        self.hamming_sum += mismatches as f64 / k as f64;

        let n_pos = y.iter().filter(|&&v| v == 1).count();
        if n_pos > 0 && n_pos < k {
            let mut wrong = 0usize;
            for j in (0..k).filter(|&j| y[j] == 1) {
                wrong += (0..k).filter(|&m| y[m] == 0 && p[m] >= p[j]).count();
            }
            self.ranking_loss_sum += wrong as f64 / (n_pos * (k - n_pos)) as f64;
            self.ranking_rows += 1;
        } else {
            self.ranking_excluded += 1;
        }
        if n_pos > 0 {
            let ranks: Vec<usize> = (0..k).map(|j| rank_of(p, j)).collect();
            let worst = (0..k).filter(|&j| y[j] == 1).map(|j| ranks[j]).max().unwrap_or(0);
            self.coverage_sum += worst as f64;
            let mut prec = 0.0;
            for j in (0..k).filter(|&j| y[j] == 1) {
                let above = (0..k).filter(|&m| y[m] == 1 && ranks[m] <= ranks[j]).count();
                prec += above as f64 / ranks[j] as f64;
            }
            self.lrap_sum += prec / n_pos as f64;
            self.positive_rows += 1;
        }
    }

    pub fn merge(&mut self, other: &MultiLabelAccumulator) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(Error::dim("metrics merge", "label counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
            a.tn += b.tn;
        }
        self.rows += other.rows;
        self.hamming_sum += other.hamming_sum;
        self.ranking_loss_sum += other.ranking_loss_sum;
        self.ranking_rows += other.ranking_rows;
        self.ranking_excluded += other.ranking_excluded;
        self.coverage_sum += other.coverage_sum;
        self.lrap_sum += other.lrap_sum;
        self.positive_rows += other.positive_rows;
        Ok(())
    }

    pub fn classification(&self) -> ClassificationMetrics {
        let k = self.counts.len() as f64;
        let (mut correct, mut total) = (0u64, 0u64);
        for c in &self.counts {
            correct += c.tp + c.tn;
            total += c.tp + c.tn + c.fp + c.fn_;
        }
        let precision = self.counts.iter().map(ClassCounts::precision).sum::<f64>() / k;
        let recall = self.counts.iter().map(ClassCounts::recall).sum::<f64>() / k;
        ClassificationMetrics {
            accuracy: ratio(correct, total),
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }

    fn mean_or_undefined(sum: f64, n: u64, what: &str) -> Result<f64> {
        if n == 0 {
            Err(Error::Metric(format!("{what}: no eligible rows")))
        } else {
            Ok(sum / n as f64)
        }
    }

    pub fn hamming_loss(&self) -> Result<f64> {
        Self::mean_or_undefined(self.hamming_sum, self.rows, "hamming loss")
    }

    pub fn ranking_loss(&self) -> Result<f64> {
        Self::mean_or_undefined(self.ranking_loss_sum, self.ranking_rows, "ranking loss")
    }

    pub fn coverage(&self) -> Result<f64> {
        Self::mean_or_undefined(self.coverage_sum, self.positive_rows, "coverage")
    }

    pub fn lrap(&self) -> Result<f64> {
        Self::mean_or_undefined(self.lrap_sum, self.positive_rows, "lrap")
    }

    /// Undefined metrics are reported as NaN.
    pub fn report(&self) -> MetricsReport {
        let c = self.classification();
        MetricsReport {
            accuracy: c.accuracy,
            precision_macro: c.precision,
            recall_macro: c.recall,
            f1_macro: c.f1,
            hamming_loss: self.hamming_loss().unwrap_or(f64::NAN),
            ranking_loss: self.ranking_loss().unwrap_or(f64::NAN),
            coverage: self.coverage().unwrap_or(f64::NAN),
            lrap: self.lrap().unwrap_or(f64::NAN),
            r2: None,
            rmse: None,
            excluded_rows: self.rows - self.positive_rows,
            ranking_excluded_rows: self.ranking_excluded,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// Harmonic mean of the macro precision and macro recall.
    pub f1: f64,
}

pub fn classification_metrics(eval: &MultiLabelEval) -> ClassificationMetrics {
    eval.accumulate().classification()
}

pub fn hamming_loss(eval: &MultiLabelEval) -> Result<f64> {
    eval.accumulate().hamming_loss()
}

pub fn ranking_loss(eval: &MultiLabelEval) -> Result<f64> {
    eval.accumulate().ranking_loss()
}

pub fn coverage(eval: &MultiLabelEval) -> Result<f64> {
    eval.accumulate().coverage()
}

pub fn lrap(eval: &MultiLabelEval) -> Result<f64> {
    eval.accumulate().lrap()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionMetrics {
    pub r2: f64,
    pub rmse: f64,
}

/// R² (`1 - SSE/SST`, SST about the target mean) and RMSE of one target.
pub fn regression_metrics(pred: &[f64], target: &[f64]) -> Result<RegressionMetrics> {
    if pred.len() != target.len() || target.len() < 2 {
        return Err(Error::dim(
            "regression metrics",
            format!("{} predictions for {} targets (need >= 2)", pred.len(), target.len()),
        ));
    }
    let n = target.len() as f64;
    let mean = target.iter().sum::<f64>() / n;
    let sst: f64 = target.iter().map(|t| (t - mean).powi(2)).sum();
    let sse: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::Metric("r2 undefined for a constant target".into()));
    }
    Ok(RegressionMetrics {
        r2: 1.0 - sse / sst,
        rmse: (sse / n).sqrt(),
    })
}

/// Column-wise metrics of `B x M` row-major matrices, averaged uniformly over
/// the `M` targets.
pub fn multi_target_regression(pred: &[f64], target: &[f64], m: usize) -> Result<RegressionMetrics> {
    if m == 0 || pred.len() != target.len() || target.len() % m != 0 {
        return Err(Error::dim("regression metrics", "prediction and target matrices differ"));
    }
    let rows = target.len() / m;
    let (mut r2, mut rmse) = (0.0, 0.0);
    for j in 0..m {
        let p: Vec<f64> = (0..rows).map(|i| pred[i * m + j]).collect();
        let t: Vec<f64> = (0..rows).map(|i| target[i * m + j]).collect();
        let r = regression_metrics(&p, &t)?;
        r2 += r.r2;
        rmse += r.rmse;
    }
    Ok(RegressionMetrics {
        r2: r2 / m as f64,
        rmse: rmse / m as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub hamming_loss: f64,
    pub ranking_loss: f64,
    pub coverage: f64,
    pub lrap: f64,
    pub r2: Option<f64>,
    pub rmse: Option<f64>,
    /// Rows without any positive label.
    pub excluded_rows: u64,
    /// Rows without both a positive and a negative label.
    pub ranking_excluded_rows: u64,
}

impl MetricsReport {
    /// Report for a regression-only task; classification fields are NaN.
    pub fn regression(r: RegressionMetrics) -> Self {
        MetricsReport {
            accuracy: f64::NAN,
            precision_macro: f64::NAN,
            recall_macro: f64::NAN,
            f1_macro: f64::NAN,
            hamming_loss: f64::NAN,
            ranking_loss: f64::NAN,
            coverage: f64::NAN,
            lrap: f64::NAN,
            r2: Some(r.r2),
            rmse: Some(r.rmse),
            excluded_rows: 0,
            ranking_excluded_rows: 0,
        }
    }

    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("accuracy", self.accuracy),
            ("precision_macro", self.precision_macro),
            ("recall_macro", self.recall_macro),
            ("f1_macro", self.f1_macro),
            ("hamming_loss", self.hamming_loss),
            ("ranking_loss", self.ranking_loss),
            ("coverage", self.coverage),
            ("lrap", self.lrap),
        ];
        if let Some(r2) = self.r2 {
            v.push(("r2", r2));
        }
        if let Some(rmse) = self.rmse {
            v.push(("rmse", rmse));
        }
        v.push(("excluded_rows", self.excluded_rows as f64));
        v.push(("ranking_excluded_rows", self.ranking_excluded_rows as f64));
        v
    }

    /// `metric=value` lines.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        for (k, v) in self.fields() {
            kv.set(k, v);
        }
        kv
    }

    pub fn csv_header(&self) -> String {
        self.fields().iter().map(|f| f.0).collect::<Vec<_>>().join(",")
    }

    pub fn csv_row(&self) -> String {
        self.fields().iter().map(|f| f.1.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_kv())
    }
}

/// Per-class precision/recall/F1 as CSV.
pub fn per_class_csv(acc: &MultiLabelAccumulator) -> String {
    let mut out = String::from("class,precision,recall,f1,support\n");
    for (j, c) in acc.counts.iter().enumerate() {
        out.push_str(&format!("{j},{},{},{},{}\n", c.precision(), c.recall(), c.f1(), c.tp + c.fn_));
    }
    out
}

fn read_keyed(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::table(path, e))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::table(path, e))?;
        let mut it = rec.iter();
        let id = it.next().ok_or_else(|| Error::table(path, "empty row"))?.to_string();
        rows.push((id, it.map(str::to_string).collect()));
    }
    Ok(rows)
}

/// Scores a predictions CSV (`id,p_0..p_{K-1}`) against a labels CSV
/// (`id,label_0..label_{K-1}`), joined on the id column.
pub fn score_csv(predictions: &Path, labels: &Path, t: f64) -> Result<MetricsReport> {
    let preds = read_keyed(predictions)?;
    let truth: HashMap<String, Vec<String>> = read_keyed(labels)?.into_iter().collect();
    let k = preds
        .first()
        .map(|r| r.1.len())
        .ok_or_else(|| Error::table(predictions, "no prediction rows"))?;
    let (mut y, mut p) = (Vec::new(), Vec::new());
    for (id, cols) in &preds {
        let lab = truth
            .get(id)
            .ok_or_else(|| Error::table(labels, format!("no labels for id {id}")))?;
        if cols.len() != k || lab.len() != k {
            return Err(Error::table(predictions, format!("row {id} does not have {k} columns")));
        }
        for c in cols {
            p.push(c.parse::<f64>().map_err(|e| Error::table(predictions, format!("{id}: {e}")))?);
        }
        for c in lab {
            y.push(c.parse::<u8>().map_err(|e| Error::table(labels, format!("{id}: {e}")))?);
        }
    }
    Ok(MultiLabelEval::from_probs(k, y, p, t)?.accumulate().report())
}
