//! Accuracy, ROC AUC and per-domain evaluation reports.

use serde::{Deserialize, Serialize};

use crate::data::{ClassLabel, DomainData, DomainSample};
use crate::error::{Error, Result};
use crate::model::ModelBundle;

/// Fraction of rows whose argmax matches the label. `probs` is row-major
/// `[N, classes]`; ties go to the lower class index.
pub fn accuracy(probs: &[f64], labels: &[usize], classes: usize) -> Result<f64> {
    if labels.is_empty() || classes == 0 {
        return Err(Error::EmptyInput);
    }
    if probs.len() != labels.len() * classes {
        return Err(Error::InvalidSpec(format!(
            "{} probabilities for {} labels of {classes} classes",
            probs.len(),
            labels.len()
        )));
    }
    let correct = probs
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Index of the largest value, first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mann-Whitney AUC: the probability that a positive outscores a negative,
/// ties counting one half. Uses midranks after a single sort.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::InvalidSpec("scores and labels differ in length".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let midrank = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| positive[k]).count();
        pos_rank_sum += midrank * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Quadratic pairwise AUC, the definition the sorted version must match.
pub fn auc_pairwise(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let pos: Vec<f64> = scores.iter().zip(positive).filter(|p| *p.1).map(|p| *p.0).collect();
    let neg: Vec<f64> = scores.iter().zip(positive).filter(|p| !*p.1).map(|p| *p.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::DegenerateLabels);
    }
    let mut wins = 0.0;
    for &sp in &pos {
        for &sn in &neg {
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub name: String,
    pub n: usize,
    pub accuracy: f64,
    pub auc: f64,
}

/// Target-domain metrics with unweighted means. Source metrics are kept
/// alongside but never enter the means or the serialized report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub domains: Vec<DomainMetrics>,
    pub mean_acc: f64,
    pub mean_auc: f64,
    #[serde(skip)]
    pub source: Option<DomainMetrics>,
}

impl MetricsReport {
    pub fn from_domains(all: Vec<(bool, DomainMetrics)>) -> Self {
        let mut source = None;
        let mut domains = Vec::new();
        for (is_source, m) in all {
            if is_source {
                source = Some(m);
            } else {
                domains.push(m);
            }
        }
        let mean = |f: fn(&DomainMetrics) -> f64| {
            if domains.is_empty() {
                0.0
            } else {
                domains.iter().map(f).sum::<f64>() / domains.len() as f64
            }
        };
        let mean_acc = mean(|m| m.accuracy);
        let mean_auc = mean(|m| m.auc);
        Self {
            domains,
            mean_acc,
            mean_auc,
            source,
        }
    }

    /// Every domain in index order, source first when present.
    pub fn all_domains(&self) -> impl Iterator<Item = &DomainMetrics> {
        self.source.iter().chain(&self.domains)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Accuracy and AUC of `model` on labeled samples. AUC scores the narrow
/// class probability with narrow as the positive class.
pub fn score_samples(model: &ModelBundle, name: &str, samples: &[DomainSample]) -> Result<DomainMetrics> {
    let labels: Vec<ClassLabel> = samples
        .iter()
        .map(|s| {
            s.class_label
                .ok_or_else(|| Error::InvalidSpec(format!("unlabeled test sample in {name}")))
        })
        .collect::<Result<_>>()?;
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let probs = model.predict(&images, 64)?;
    let classes = model.spec.num_classes;
    let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let narrow: Vec<f64> = probs.chunks(classes).map(|r| r[ClassLabel::Narrow.index()]).collect();
    let positive: Vec<bool> = labels.iter().map(|&l| l == ClassLabel::Narrow).collect();
    Ok(DomainMetrics {
        name: name.to_string(),
        n: samples.len(),
        accuracy: accuracy(&probs, &idx, classes)?,
        auc: auc(&narrow, &positive)?,
    })
}

/// Scores every domain's test split.
pub fn evaluate(model: &ModelBundle, datasets: &[DomainData]) -> Result<MetricsReport> {
    let all = datasets
        .iter()
        .map(|d| Ok((d.is_source(), score_samples(model, &d.name, &d.test)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_domains(all))
}
