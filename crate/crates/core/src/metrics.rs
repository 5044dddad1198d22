//! Accuracy, average precision and the evaluation report.
//!
//! The fake class is the positive class. Score ties are ordered by original
//! position, so results do not depend on sort stability.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{FAKE, REAL};
use crate::error::{LtdError, Result};

/// Overall and per-class accuracy; a class absent from the input has no value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: f64,
    pub fake: Option<f64>,
    pub real: Option<f64>,
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(LtdError::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(LtdError::Validation("no scores".into()));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(LtdError::Validation(format!("label {l} is not binary")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(LtdError::Numeric("NaN score".into()));
    }
    Ok(())
}

/// A score above `threshold` predicts fake.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Accuracy> {
    check_inputs(scores, labels)?;
    let mut correct = [0usize; 2];
    let mut total = [0usize; 2];
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = if s > threshold { FAKE } else { REAL };
        total[l as usize] += 1;
        correct[l as usize] += (pred == l) as usize;
    }
    let frac = |c: usize, t: usize| (t > 0).then(|| c as f64 / t as f64);
    Ok(Accuracy {
        overall: (correct[0] + correct[1]) as f64 / scores.len() as f64,
        fake: frac(correct[1], total[1]),
        real: frac(correct[0], total[0]),
    })
}

/// Mean over positives of the precision at each positive's rank.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == FAKE).count();
    if positives == 0 {
        return Err(LtdError::Validation(
            "average precision undefined without positives".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == FAKE {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub path: String,
    /// Probability of fake.
    pub score: f64,
    pub label: u8,
    pub group: String,
}

/// Headline numbers for a set of scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub count: usize,
    pub count_fake: usize,
    pub count_real: usize,
    pub acc_overall: f64,
    pub acc_fake: Option<f64>,
    pub acc_real: Option<f64>,
    /// Absent when there are no fake images.
    pub ap: Option<f64>,
}

impl MetricsSummary {
    pub fn compute(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        let acc = accuracy(scores, labels, threshold)?;
        let count_fake = labels.iter().filter(|&&l| l == FAKE).count();
        Ok(MetricsSummary {
            count: scores.len(),
            count_fake,
            count_real: scores.len() - count_fake,
            acc_overall: acc.overall,
            acc_fake: acc.fake,
            acc_real: acc.real,
            ap: if count_fake > 0 {
                Some(average_precision(scores, labels)?)
            } else {
                None
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    #[serde(flatten)]
    pub summary: MetricsSummary,
    pub groups: BTreeMap<String, MetricsSummary>,
    pub scores: Vec<ScoreEntry>,
}

impl MetricsReport {
    pub fn from_scores(scores: Vec<ScoreEntry>, threshold: f64) -> Result<Self> {
        let s: Vec<f64> = scores.iter().map(|e| e.score).collect();
        let l: Vec<u8> = scores.iter().map(|e| e.label).collect();
        let summary = MetricsSummary::compute(&s, &l, threshold)?;
        let mut by_group: BTreeMap<&str, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
        for e in &scores {
            let g = by_group.entry(e.group.as_str()).or_default();
            g.0.push(e.score);
            g.1.push(e.label);
        }
        let groups = by_group
            .into_iter()
            .map(|(k, (s, l))| Ok((k.to_string(), MetricsSummary::compute(&s, &l, threshold)?)))
            .collect::<Result<_>>()?;
        Ok(MetricsReport {
            threshold,
            summary,
            groups,
            scores,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
