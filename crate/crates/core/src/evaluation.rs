//! Classification metrics, inception accuracy, repeated-run aggregation and
//! result tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::InferenceRule;
use crate::datasets::{ClassLabel, LabeledExample};
use crate::error::{Error, Result};
use crate::models::Network;
use crate::scalar::Scalar;
use crate::seed::derive_seed_path;
use crate::tensor::Tensor;

/// Binary confusion counts with the minority class B as positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// The same counts with class roles exchanged.
    pub fn relabeled(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }

    /// Fraction of class `c` examples predicted as `c` (0 when the class is absent).
    pub fn recall(&self, c: ClassLabel) -> f64 {
        let (hit, miss) = match c {
            ClassLabel::B => (self.tp, self.fn_),
            ClassLabel::A => (self.tn, self.fp),
        };
        ratio(hit, hit + miss)
    }

    pub fn precision(&self, c: ClassLabel) -> f64 {
        let (hit, false_alarm) = match c {
            ClassLabel::B => (self.tp, self.fp),
            ClassLabel::A => (self.tn, self.fn_),
        };
        ratio(hit, hit + false_alarm)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion(predictions: &[ClassLabel], labels: &[ClassLabel]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (ClassLabel::B, ClassLabel::B) => cm.tp += 1,
            (ClassLabel::B, ClassLabel::A) => cm.fp += 1,
            (ClassLabel::A, ClassLabel::A) => cm.tn += 1,
            (ClassLabel::A, ClassLabel::B) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// F1 of `positive`; 0 when precision + recall = 0.
pub fn f1(cm: &ConfusionMatrix, positive: ClassLabel) -> f64 {
    let p = cm.precision(positive);
    let r = cm.recall(positive);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Average class-specific accuracy: the mean of the two per-class recalls.
pub fn acsa(cm: &ConfusionMatrix) -> f64 {
    0.5 * (cm.recall(ClassLabel::A) + cm.recall(ClassLabel::B))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub f1_minority: f64,
    pub f1_majority: f64,
    pub acsa: f64,
    pub recall_minority: f64,
    pub recall_majority: f64,
    pub confusion: ConfusionMatrix,
}

impl ClassMetrics {
    pub fn from_confusion(cm: ConfusionMatrix) -> Self {
        Self {
            f1_minority: f1(&cm, ClassLabel::B),
            f1_majority: f1(&cm, ClassLabel::A),
            acsa: acsa(&cm),
            recall_minority: cm.recall(ClassLabel::B),
            recall_majority: cm.recall(ClassLabel::A),
            confusion: cm,
        }
    }
}

/// Metric used to pick the best validation epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    Acsa,
    MinorityF1,
}

impl SelectionMetric {
    pub fn of(self, m: &ClassMetrics) -> f64 {
        match self {
            SelectionMetric::Acsa => m.acsa,
            SelectionMetric::MinorityF1 => m.f1_minority,
        }
    }
}

/// Stacks labeled examples into `[N, C, H, W]` plus their labels.
pub fn stack_examples<T: Scalar>(examples: &[LabeledExample<T>]) -> (Tensor<T>, Vec<ClassLabel>) {
    let refs: Vec<&Tensor<T>> = examples.iter().map(|e| &e.image).collect();
    (Tensor::stack(&refs), examples.iter().map(|e| e.label).collect())
}

/// Predicted labels for `images` under `rule`.
pub fn predict<T: Scalar>(classifier: &Network<T>, images: &Tensor<T>, rule: &InferenceRule) -> Vec<ClassLabel> {
    classifier
        .predict_z(images)
        .into_iter()
        .map(|z| rule.predict(z.as_f64()))
        .collect()
}

pub fn evaluate_classifier<T: Scalar>(
    classifier: &Network<T>,
    examples: &[LabeledExample<T>],
    rule: &InferenceRule,
) -> Result<ClassMetrics> {
    if examples.is_empty() {
        return Err(Error::capacity("evaluation", "no examples to evaluate"));
    }
    let (x, labels) = stack_examples(examples);
    let pred = predict(classifier, &x, rule);
    Ok(ClassMetrics::from_confusion(confusion(&pred, &labels)?))
}

/// A classifier admitted for scoring translations because its accuracy on
/// real held-out images reached the configured floor.
#[derive(Clone, Debug)]
pub struct CertifiedProxy<T> {
    network: Network<T>,
    real_accuracy: f64,
}

impl<T: Scalar> CertifiedProxy<T> {
    pub fn certify(network: Network<T>, real: &[LabeledExample<T>], floor: f64) -> Result<Self> {
        let m = evaluate_classifier(&network, real, &InferenceRule::Threshold)?;
        let real_accuracy = m.confusion.accuracy();
        if real_accuracy < floor {
            return Err(Error::Contract(format!(
                "proxy classifier reaches {real_accuracy:.4} accuracy on real held-out images, below the floor {floor:.4}; retrain it before scoring"
            )));
        }
        Ok(Self { network, real_accuracy })
    }

    pub fn real_accuracy(&self) -> f64 {
        self.real_accuracy
    }

    pub fn network(&self) -> &Network<T> {
        &self.network
    }

    /// Fraction of `generated` images the proxy assigns to `target`.
    pub fn inception_accuracy(&self, generated: &Tensor<T>, target: ClassLabel) -> f64 {
        if generated.batch() == 0 {
            return 0.0;
        }
        let pred = predict(&self.network, generated, &InferenceRule::Threshold);
        pred.iter().filter(|&&p| p == target).count() as f64 / pred.len() as f64
    }
}

/// Inception accuracy of both translation directions and their mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InceptionAccuracy {
    pub a_to_b: f64,
    pub b_to_a: f64,
    pub mean: f64,
}

/// Scores `translate_ab` on the majority test images and `translate_ba` on the minority ones.
pub fn inception_accuracy<T: Scalar>(
    proxy: &CertifiedProxy<T>,
    test: &[LabeledExample<T>],
    translate_ab: impl Fn(&Tensor<T>) -> Tensor<T>,
    translate_ba: impl Fn(&Tensor<T>) -> Tensor<T>,
) -> Result<InceptionAccuracy> {
    let of = |c: ClassLabel| -> Vec<LabeledExample<T>> { test.iter().filter(|e| e.label == c).cloned().collect() };
    let (src_a, src_b) = (of(ClassLabel::A), of(ClassLabel::B));
    if src_a.is_empty() || src_b.is_empty() {
        return Err(Error::capacity("inception accuracy", "test set lacks one of the classes"));
    }
    let a_to_b = proxy.inception_accuracy(&translate_ab(&stack_examples(&src_a).0), ClassLabel::B);
    let b_to_a = proxy.inception_accuracy(&translate_ba(&stack_examples(&src_b).0), ClassLabel::A);
    Ok(InceptionAccuracy {
        a_to_b,
        b_to_a,
        mean: 0.5 * (a_to_b + b_to_a),
    })
}

/// Metrics from one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub test: ClassMetrics,
    pub validation: ClassMetrics,
    pub inception: Option<InceptionAccuracy>,
    pub wall_clock_s: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub f1_minority: f64,
    pub f1_majority: f64,
    pub acsa: f64,
    pub recall_minority: f64,
    pub recall_majority: f64,
    pub inception_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub n_majority: usize,
    pub n_minority: usize,
    pub gamma: f64,
    pub run_count: usize,
    pub runs: Vec<RunMetrics>,
    pub mean: MeanMetrics,
}

impl MetricsReport {
    pub fn from_runs(method: &str, n_majority: usize, n_minority: usize, gamma: f64, runs: Vec<RunMetrics>) -> Self {
        let n = runs.len().max(1) as f64;
        let avg = |f: &dyn Fn(&RunMetrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
        let inception_accuracy = if !runs.is_empty() && runs.iter().all(|r| r.inception.is_some()) {
            Some(avg(&|r| r.inception.unwrap().mean))
        } else {
            None
        };
        let mean = MeanMetrics {
            f1_minority: avg(&|r| r.test.f1_minority),
            f1_majority: avg(&|r| r.test.f1_majority),
            acsa: avg(&|r| r.test.acsa),
            recall_minority: avg(&|r| r.test.recall_minority),
            recall_majority: avg(&|r| r.test.recall_majority),
            inception_accuracy,
        };
        Self {
            method: method.to_string(),
            n_majority,
            n_minority,
            gamma,
            run_count: runs.len(),
            runs,
            mean,
        }
    }

    /// A copy with every timing field zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for run in &mut r.runs {
            run.wall_clock_s = 0.0;
        }
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("metrics report: {e}")))
    }

    /// One CSV row per run plus a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "method",
            "n_minority",
            "run",
            "seed",
            "best_epoch",
            "f1_minority",
            "f1_majority",
            "acsa",
            "inception_accuracy",
        ])
        .expect("in-memory write");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        for r in &self.runs {
            w.write_record([
                self.method.clone(),
                self.n_minority.to_string(),
                r.run.to_string(),
                r.seed.to_string(),
                r.best_epoch.to_string(),
                format!("{:.4}", r.test.f1_minority),
                format!("{:.4}", r.test.f1_majority),
                format!("{:.4}", r.test.acsa),
                opt(r.inception.map(|i| i.mean)),
            ])
            .expect("in-memory write");
        }
        w.write_record([
            self.method.clone(),
            self.n_minority.to_string(),
            "mean".into(),
            String::new(),
            String::new(),
            format!("{:.4}", self.mean.f1_minority),
            format!("{:.4}", self.mean.f1_majority),
            format!("{:.4}", self.mean.acsa),
            opt(self.mean.inception_accuracy),
        ])
        .expect("in-memory write");
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// Seed of repeated run `run`.
pub fn run_seed(base_seed: u64, run: usize) -> u64 {
    derive_seed_path(base_seed, &["run", &run.to_string()])
}

/// Runs `experiment(run_index, run_seed)` for each run, possibly in
/// parallel, returning results in run order.
pub fn run_repeated<F>(n_runs: usize, base_seed: u64, experiment: F) -> Result<Vec<RunMetrics>>
where
    F: Fn(usize, u64) -> Result<RunMetrics> + Sync,
{
    if n_runs == 0 {
        return Err(Error::config("runs", "must be at least 1"));
    }
    (0..n_runs)
        .into_par_iter()
        .map(|i| experiment(i, run_seed(base_seed, i)))
        .collect()
}

/// Report column a [`ResultTable`] shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableMetric {
    F1Minority,
    F1Majority,
    Acsa,
    InceptionAccuracy,
}

impl TableMetric {
    fn of(self, r: &MetricsReport) -> Option<f64> {
        match self {
            TableMetric::F1Minority => Some(r.mean.f1_minority),
            TableMetric::F1Majority => Some(r.mean.f1_majority),
            TableMetric::Acsa => Some(r.mean.acsa),
            TableMetric::InceptionAccuracy => r.mean.inception_accuracy,
        }
    }
}

/// Methods as rows, minority training counts as ascending columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub columns: Vec<usize>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl ResultTable {
    /// Rows keep first-appearance order of methods.
    pub fn from_reports(reports: &[MetricsReport], metric: TableMetric) -> Self {
        let columns: Vec<usize> = reports
            .iter()
            .map(|r| r.n_minority)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut rows: Vec<(String, Vec<Option<f64>>)> = Vec::new();
        for r in reports {
            let col = columns.binary_search(&r.n_minority).expect("column exists");
            let row = match rows.iter().position(|(m, _)| *m == r.method) {
                Some(i) => i,
                None => {
                    rows.push((r.method.clone(), vec![None; columns.len()]));
                    rows.len() - 1
                }
            };
            rows[row].1[col] = metric.of(r);
        }
        Self { columns, rows }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string()];
        header.extend(self.columns.iter().map(usize::to_string));
        w.write_record(&header).expect("in-memory write");
        for (method, cells) in &self.rows {
            let mut rec = vec![method.clone()];
            rec.extend(cells.iter().map(|c| c.map(|v| format!("{v:.4}")).unwrap_or_default()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let bad = |e: &dyn std::fmt::Display| Error::Format(format!("table csv: {e}"));
        let header = r.headers().map_err(|e| bad(&e))?.clone();
        let columns = header
            .iter()
            .skip(1)
            .map(|h| h.parse::<usize>().map_err(|e| bad(&e)))
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(&e))?;
            let cells = rec
                .iter()
                .skip(1)
                .map(|c| {
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        c.parse::<f64>().map(Some).map_err(|e| bad(&e))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push((rec.get(0).unwrap_or_default().to_string(), cells));
        }
        Ok(Self { columns, rows })
    }

    /// Fixed-width text rendering with 4-decimal cells.
    pub fn to_text(&self) -> String {
        let mut cells: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["method".to_string()];
        header.extend(self.columns.iter().map(usize::to_string));
        cells.push(header);
        for (m, vals) in &self.rows {
            let mut row = vec![m.clone()];
            row.extend(vals.iter().map(|c| c.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())));
            cells.push(row);
        }
        let ncol = cells[0].len();
        let widths: Vec<usize> = (0..ncol)
            .map(|j| cells.iter().map(|r| r[j].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &cells {
            for (j, c) in row.iter().enumerate() {
                if j == 0 {
                    let _ = write!(out, "{c:<w$}", w = widths[j]);
                } else {
                    let _ = write!(out, "  {c:>w$}", w = widths[j]);
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Inception accuracies per translation model and minority count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InceptionRow {
    pub model: String,
    pub n_minority: usize,
    pub a_to_b: f64,
    pub b_to_a: f64,
    pub mean: f64,
}

pub fn inception_table_csv(rows: &[InceptionRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "n_minority", "a_to_b", "b_to_a", "mean"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.n_minority.to_string(),
            format!("{:.4}", r.a_to_b),
            format!("{:.4}", r.b_to_a),
            format!("{:.4}", r.mean),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}
