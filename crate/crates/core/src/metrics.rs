//! Evaluation statistics: AUROC, Cohen's kappa, sensitivity/specificity and
//! seed aggregation. Undefined metrics are reported as errors, never NaN.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores aligned with binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.is_empty() || scores.len() != labels.len() {
            return Err(Error::Domain(format!(
                "scores ({}) and labels ({}) must be equal nonzero lengths",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Domain(format!("score {s} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Domain(format!("label {l} is not binary")));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Binary predictions at the given probability threshold (`>=` is positive).
    pub fn predictions(&self, threshold: f64) -> Vec<u8> {
        threshold_predictions(&self.scores, threshold)
    }
}

pub const DECISION_THRESHOLD: f64 = 0.5;

pub fn threshold_predictions(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s >= threshold)).collect()
}

/// Mann-Whitney AUROC with ties counted as one half, via average ranks.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    mann_whitney(&set.scores, &set.labels)
}

/// AUROC of the probabilities `sigmoid(logits)`, ranked on the logits so that
/// saturated probabilities do not create ties.
pub fn auroc_of_logits(logits: &[f64], labels: &[u8]) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Domain(format!(
            "logits ({}) and labels ({}) must be equal nonzero lengths",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(z) = logits.iter().find(|z| !z.is_finite()) {
        return Err(Error::Domain(format!("logit {z} is not finite")));
    }
    check_binary(labels, "labels")?;
    mann_whitney(logits, labels)
}

fn mann_whitney(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both positive and negative examples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Twice the positive rank sum keeps tied average ranks integral.
    let mut pos_rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share the average (i + j + 2) / 2.
        let twice_avg = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        pos_rank_sum_x2 += twice_avg * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    // U = R_pos - p(p+1)/2, doubled.
    let u_x2 = pos_rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / (2.0 * (p * n) as f64))
}

fn check_binary(v: &[u8], name: &str) -> Result<()> {
    if let Some(x) = v.iter().find(|&&x| x > 1) {
        return Err(Error::Domain(format!("{name} contains non-binary value {x}")));
    }
    Ok(())
}

pub fn cohens_kappa(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Domain(format!(
            "kappa needs equal nonzero lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    check_binary(a, "first prediction vector")?;
    check_binary(b, "second prediction vector")?;
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64;
    let a1 = a.iter().filter(|&&x| x == 1).count() as f64 / n;
    let b1 = b.iter().filter(|&&x| x == 1).count() as f64 / n;
    let p_o = agree / n;
    let p_e = a1 * b1 + (1.0 - a1) * (1.0 - b1);
    if p_e == 1.0 {
        return if p_o == 1.0 {
            Ok(1.0)
        } else {
            Err(Error::UndefinedMetric(
                "kappa is undefined when chance agreement is 1".into(),
            ))
        };
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

pub fn sensitivity_specificity(pred: &[u8], labels: &[u8]) -> Result<(f64, f64)> {
    if pred.len() != labels.len() {
        return Err(Error::Domain(format!(
            "predictions ({}) and labels ({}) differ in length",
            pred.len(),
            labels.len()
        )));
    }
    check_binary(pred, "predictions")?;
    check_binary(labels, "labels")?;
    let mut tp = 0usize;
    let mut fn_ = 0usize;
    let mut tn = 0usize;
    let mut fp = 0usize;
    for (&p, &l) in pred.iter().zip(labels) {
        match (p, l) {
            (1, 1) => tp += 1,
            (0, 1) => fn_ += 1,
            (0, 0) => tn += 1,
            _ => fp += 1,
        }
    }
    if tp + fn_ == 0 || tn + fp == 0 {
        return Err(Error::UndefinedMetric(
            "sensitivity/specificity need both positive and negative labels".into(),
        ));
    }
    Ok((
        tp as f64 / (tp + fn_) as f64,
        tn as f64 / (tn + fp) as f64,
    ))
}

/// Arithmetic mean and sample standard deviation (`n - 1` denominator).
pub fn aggregate_seeds(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Domain("cannot aggregate an empty list".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// One row of a robustness table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset_tag: String,
    pub seed: u64,
    pub auroc: f64,
    pub kappa_vs_original: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl MetricRow {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64, name: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Integrity(format!("{name} {v} outside [0, 1]")))
            }
        };
        unit(self.auroc, "auroc")?;
        unit(self.sensitivity, "sensitivity")?;
        unit(self.specificity, "specificity")?;
        if !(-1.0..=1.0).contains(&self.kappa_vs_original) {
            return Err(Error::Integrity(format!(
                "kappa {} outside [-1, 1]",
                self.kappa_vs_original
            )));
        }
        Ok(())
    }
}

pub const METRIC_CSV_HEADER: [&str; 6] = [
    "dataset_tag",
    "seed",
    "auroc",
    "kappa_vs_original",
    "sensitivity",
    "specificity",
];

pub fn rows_to_csv(rows: &[MetricRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRIC_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.dataset_tag.clone(),
            r.seed.to_string(),
            r.auroc.to_string(),
            r.kappa_vs_original.to_string(),
            r.sensitivity.to_string(),
            r.specificity.to_string(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Domain(format!("csv flush failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRIC_CSV_HEADER {
        return Err(Error::Integrity(format!("unexpected metric header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}
