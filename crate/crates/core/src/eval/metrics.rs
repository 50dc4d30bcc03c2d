use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    /// `None` when the class has no positives or no negatives.
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc: f64,
    pub f1: f64,
    pub acc: f64,
    pub n_samples: usize,
    pub per_class: Vec<ClassMetrics>,
    pub warnings: Vec<String>,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One-vs-rest AUC via average ranks (Mann-Whitney U).
pub fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, p)| **p).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Pairwise AUC over every (positive, negative) pair; ties count one half.
pub fn brute_force_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Macro AUC (over classes with both positives and negatives), macro F1 at
/// argmax decisions (over all classes) and accuracy.
pub fn compute_metrics(scores: &[Vec<f64>], labels: &[usize]) -> Result<EvalResult> {
    contract!(
        scores.len() == labels.len(),
        "{} score rows for {} labels",
        scores.len(),
        labels.len()
    );
    if scores.is_empty() {
        return Err(Error::Degenerate("no samples to evaluate".into()));
    }
    let c = scores[0].len();
    contract!(c >= 2, "need at least two classes, got {c}");
    contract!(scores.iter().all(|r| r.len() == c), "score rows differ in length");
    contract!(labels.iter().all(|&l| l < c), "label outside [0, {c})");
    let preds: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
    let mut warnings = Vec::new();
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let positive: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        let col: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let auc = rank_auc(&col, &positive);
        if auc.is_none() {
            let w = format!("class {k}: AUC undefined (needs positives and negatives); excluded from macro AUC");
            log::warn!("{w}");
            warnings.push(w);
        }
        let tp = preds.iter().zip(labels).filter(|(p, l)| **p == k && **l == k).count();
        let predicted = preds.iter().filter(|p| **p == k).count();
        let support = positive.iter().filter(|p| **p).count();
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            class_id: k,
            auc,
            precision,
            recall,
            f1,
            support,
        });
    }
    let aucs: Vec<f64> = per_class.iter().filter_map(|m| m.auc).collect();
    if aucs.is_empty() {
        return Err(Error::Degenerate("AUC is undefined for every class".into()));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(EvalResult {
        auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
        f1: per_class.iter().map(|m| m.f1).sum::<f64>() / c as f64,
        acc: correct as f64 / labels.len() as f64,
        n_samples: labels.len(),
        per_class,
        warnings,
    })
}
