//! Selection metrics against generator truth and per-condition summaries.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct SelectionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl SelectionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for SelectionCounts {
    type Output = SelectionCounts;
    fn add(self, o: SelectionCounts) -> SelectionCounts {
        SelectionCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }
}

/// Counts for one side: an entry is selected iff it is exactly nonzero.
pub fn side_counts(estimate: &[f64], truth: &[f64]) -> Result<SelectionCounts> {
    if estimate.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!("{} estimated weights vs {} true", estimate.len(), truth.len())));
    }
    let mut c = SelectionCounts::default();
    for (e, t) in estimate.iter().zip(truth) {
        match (*e != 0.0, *t != 0.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Pooled counts over a and b.
pub fn selection_counts(a: &[f64], b: &[f64], a_true: &[f64], b_true: &[f64]) -> Result<SelectionCounts> {
    Ok(side_counts(a, a_true)? + side_counts(b, b_true)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Classification {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Nothing was selected, so precision is a convention.
    pub empty_selection: bool,
}

/// Zero denominators give 0 for precision, recall and F1.
pub fn classification_metrics(c: &SelectionCounts) -> Classification {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Classification {
        precision,
        recall,
        f1,
        accuracy: ratio(c.tp + c.tn, c.total()),
        empty_selection: c.tp + c.fp == 0,
    }
}

/// What a benchmark keeps from one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateOutcome {
    pub mp_hat: f64,
    pub mp_true: f64,
    pub counts: SelectionCounts,
    pub counts_a: SelectionCounts,
    pub counts_b: SelectionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub condition: String,
    pub mp_mean: f64,
    pub mp_sd: f64,
    pub abs_bias: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub precision_a: f64,
    pub recall_a: f64,
    pub precision_b: f64,
    pub recall_b: f64,
    pub n_replicates: usize,
    pub small_sample: bool,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mu = mean(v);
    (v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Metrics are averaged per replicate; MP summaries are over replicate estimates.
pub fn aggregate_replicates(condition: &str, reps: &[ReplicateOutcome]) -> Result<BenchmarkRow> {
    if reps.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mps: Vec<f64> = reps.iter().map(|r| r.mp_hat).collect();
    let pick = |f: &dyn Fn(&ReplicateOutcome) -> f64| mean(&reps.iter().map(f).collect::<Vec<_>>());
    let mp_mean = mean(&mps);
    Ok(BenchmarkRow {
        condition: condition.to_string(),
        mp_mean,
        mp_sd: sd(&mps),
        abs_bias: (mp_mean - reps[0].mp_true).abs(),
        precision: pick(&|r| classification_metrics(&r.counts).precision),
        recall: pick(&|r| classification_metrics(&r.counts).recall),
        f1: pick(&|r| classification_metrics(&r.counts).f1),
        accuracy: pick(&|r| classification_metrics(&r.counts).accuracy),
        precision_a: pick(&|r| classification_metrics(&r.counts_a).precision),
        recall_a: pick(&|r| classification_metrics(&r.counts_a).recall),
        precision_b: pick(&|r| classification_metrics(&r.counts_b).precision),
        recall_b: pick(&|r| classification_metrics(&r.counts_b).recall),
        n_replicates: reps.len(),
        small_sample: reps.len() < 2,
    })
}
