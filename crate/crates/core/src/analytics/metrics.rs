//! Classification and fairness metrics.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fairness ratio: lowest group accuracy over the best group's accuracy.
/// Returns `(F, best_group)`; ties for the best group go to the lowest index.
pub fn fairness_score(group_accuracies: &[f64]) -> Result<(f64, usize)> {
    if group_accuracies.len() < 2 {
        return Err(Error::Argument("fairness needs at least 2 groups".into()));
    }
    if let Some(a) = group_accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Argument(format!("accuracy {a} outside [0, 1]")));
    }
    let mut best = 0;
    for (g, &a) in group_accuracies.iter().enumerate() {
        if a > group_accuracies[best] {
            best = g;
        }
    }
    let top = group_accuracies[best];
    if top == 0.0 {
        return Err(Error::DegenerateGroup("best group accuracy is zero".into()));
    }
    let low = group_accuracies.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((low / top, best))
}

/// Largest difference, over classes and group pairs, between the empirical
/// rates at which groups receive each predicted class.
pub fn demographic_parity_gap(predictions: &[usize], groups: &[usize], num_classes: usize, num_groups: usize) -> Result<f64> {
    if predictions.len() != groups.len() {
        return Err(Error::Argument("predictions and groups must align".into()));
    }
    if num_groups < 2 {
        return Err(Error::Argument("parity gap needs at least 2 groups".into()));
    }
    let mut counts = vec![vec![0usize; num_classes]; num_groups];
    for (&p, &g) in predictions.iter().zip(groups) {
        if p >= num_classes || g >= num_groups {
            return Err(Error::Argument(format!("prediction {p} or group {g} out of range")));
        }
        counts[g][p] += 1;
    }
    let totals: Vec<usize> = counts.iter().map(|c| c.iter().sum()).collect();
    if let Some(g) = totals.iter().position(|&t| t == 0) {
        return Err(Error::Argument(format!("group {g} has no samples")));
    }
    let mut gap: f64 = 0.0;
    for c in 0..num_classes {
        let rates: Vec<f64> = counts.iter().zip(&totals).map(|(row, &t)| row[c] as f64 / t as f64).collect();
        let hi = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
        gap = gap.max(hi - lo);
    }
    Ok(gap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub auc: f64,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
}

/// ROC curve by threshold sweep over the distinct scores, with trapezoidal
/// area. Equal scores move together as one step.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Argument("scores and labels must align".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Argument("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Argument("ROC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (x0, y0) = *points.last().expect("non-empty");
        let x1 = fp as f64 / neg as f64;
        let y1 = tp as f64 / pos as f64;
        auc += (x1 - x0) * (y0 + y1) / 2.0;
        points.push((x1, y1));
    }
    Ok(RocCurve { auc, points })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of classes with support that entered the macro average.
    pub classes_used: usize,
}

/// Accuracy plus macro precision/recall/F1 over classes that occur in `labels`.
pub fn macro_scores(predictions: &[usize], labels: &[usize], num_classes: usize) -> MacroScores {
    let n = labels.len();
    if n == 0 {
        return MacroScores::default();
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fnn = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fnn[y] += 1;
        }
    }
    let mut out = MacroScores {
        accuracy: tp.iter().sum::<usize>() as f64 / n as f64,
        ..Default::default()
    };
    for c in 0..num_classes {
        if tp[c] + fnn[c] == 0 {
            continue;
        }
        let precision = if tp[c] + fp[c] == 0 {
            0.0
        } else {
            tp[c] as f64 / (tp[c] + fp[c]) as f64
        };
        let recall = tp[c] as f64 / (tp[c] + fnn[c]) as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        out.precision += precision;
        out.recall += recall;
        out.f1 += f1;
        out.classes_used += 1;
    }
    let k = out.classes_used.max(1) as f64;
    out.precision /= k;
    out.recall /= k;
    out.f1 /= k;
    out
}

/// Binary AUC for two classes, one-vs-rest average otherwise. Classes whose
/// one-vs-rest problem lacks positives or negatives are left out; `None` when
/// no class qualifies.
pub fn multiclass_auc(scores: ArrayView2<f64>, labels: &[usize]) -> Result<Option<f64>> {
    let k = scores.ncols();
    let candidates: Vec<usize> = if k == 2 { vec![1] } else { (0..k).collect() };
    let mut total = 0.0;
    let mut used = 0;
    for c in candidates {
        let bin: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        if bin.iter().all(|&b| b) || bin.iter().all(|&b| !b) {
            continue;
        }
        let col: Vec<f64> = scores.column(c).to_vec();
        total += roc_auc(&col, &bin)?.auc;
        used += 1;
    }
    Ok((used > 0).then(|| total / used as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: usize,
    pub name: String,
    pub support: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    /// Classes with no samples in this group, left out of the macro average.
    pub excluded_classes: Vec<usize>,
    pub warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub per_group: Vec<GroupMetrics>,
    pub fairness: f64,
    pub best_group: usize,
    pub parity_gap: f64,
    pub overall_accuracy: f64,
    pub warnings: Vec<String>,
}

/// Per-group metrics, fairness ratio and demographic-parity gap.
///
/// `scores` holds one row of class probabilities per sample.
pub fn classification_report(
    predictions: &[usize],
    scores: ArrayView2<f64>,
    labels: &[usize],
    groups: &[usize],
    group_names: &[String],
) -> Result<FairnessReport> {
    let n = labels.len();
    if predictions.len() != n || groups.len() != n || scores.nrows() != n {
        return Err(Error::Argument("predictions, scores, labels and groups must align".into()));
    }
    let num_classes = scores.ncols();
    let num_groups = group_names.len();
    if let Some(&y) = labels.iter().chain(predictions).find(|&&y| y >= num_classes) {
        return Err(Error::Argument(format!("class {y} out of range 0..{num_classes}")));
    }
    let mut per_group = Vec::with_capacity(num_groups);
    let mut warnings = Vec::new();
    for (g, name) in group_names.iter().enumerate() {
        let idx: Vec<usize> = (0..n).filter(|&i| groups[i] == g).collect();
        if idx.is_empty() {
            return Err(Error::Argument(format!("group {g} ({name}) has no samples")));
        }
        let p: Vec<usize> = idx.iter().map(|&i| predictions[i]).collect();
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let s = macro_scores(&p, &y, num_classes);
        let excluded: Vec<usize> = (0..num_classes).filter(|c| !y.contains(c)).collect();
        let sub = scores.select(ndarray::Axis(0), &idx);
        let auc = multiclass_auc(sub.view(), &y)?;
        let warning = !excluded.is_empty() || auc.is_none();
        if !excluded.is_empty() {
            warnings.push(format!("group {g} ({name}): classes {excluded:?} absent, excluded from macro average"));
        }
        if auc.is_none() {
            warnings.push(format!("group {g} ({name}): AUC undefined"));
        }
        per_group.push(GroupMetrics {
            group: g,
            name: name.clone(),
            support: idx.len(),
            accuracy: s.accuracy,
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            auc,
            excluded_classes: excluded,
            warning,
        });
    }
    let accs: Vec<f64> = per_group.iter().map(|m| m.accuracy).collect();
    let (fairness, best_group) = fairness_score(&accs)?;
    let parity_gap = demographic_parity_gap(predictions, groups, num_classes, num_groups)?;
    let overall_accuracy = predictions.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / n as f64;
    Ok(FairnessReport {
        per_group,
        fairness,
        best_group,
        parity_gap,
        overall_accuracy,
        warnings,
    })
}
