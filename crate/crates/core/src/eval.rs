//! Per-task classification metrics and fold aggregation.
//!
//! Macro F1 is the primary metric. One-vs-rest ROC/AUC is reported
//! alongside it. Fold results are summarized as mean, median and sample
//! standard deviation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Task;
use crate::tensor::Matrix;

/// `k x k` counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub task: Task,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(task: Task, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::data("truth and prediction lengths differ"));
        }
        let k = task.class_count();
        let mut counts = vec![vec![0; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(Error::data(format!("{task}: class index outside 0..{}", k - 1)));
            }
            counts[t][p] += 1;
        }
        Ok(Self { task, counts })
    }

    pub fn from_counts(task: Task, counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = task.class_count();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::data(format!("{task} confusion matrix must be {k}x{k}")));
        }
        Ok(Self { task, counts })
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `2TP / (2TP + FP + FN)` per class; 0 when the class never occurs in
    /// either truth or prediction.
    pub fn per_class_f1(&self) -> Vec<f64> {
        let k = self.counts.len();
        (0..k)
            .map(|c| {
                let tp = self.counts[c][c] as f64;
                let fn_: f64 = (0..k).filter(|&j| j != c).map(|j| self.counts[c][j] as f64).sum();
                let fp: f64 = (0..k).filter(|&i| i != c).map(|i| self.counts[i][c] as f64).sum();
                let denom = 2.0 * tp + fp + fn_;
                if denom == 0.0 {
                    0.0
                } else {
                    2.0 * tp / denom
                }
            })
            .collect()
    }
}

/// Unweighted mean of the per-class F1 scores.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let f1 = cm.per_class_f1();
    f1.iter().sum::<f64>() / f1.len() as f64
}

/// One-vs-rest AUC per class from the Mann-Whitney rank statistic, tied
/// scores counting one half. `None` when a class has no positives or no
/// negatives.
pub fn roc_auc_ovr(scores: &Matrix, truth: &[usize]) -> Result<Vec<Option<f64>>> {
    if scores.rows() != truth.len() {
        return Err(Error::data("score rows and truth lengths differ"));
    }
    let column = |c: usize| -> Vec<f64> { (0..scores.rows()).map(|r| scores.get(r, c)).collect() };
    Ok((0..scores.cols())
        .map(|c| {
            let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            binary_auc(&column(c), &positive)
        })
        .collect())
}

/// Mann-Whitney AUC for one binary problem.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of the positives, so tied midranks stay integral
    let mut rank_sum2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the midrank (i + j + 2) / 2
        let midrank2 = (i + j + 2) as u64;
        let pos_in_tie = order[i..=j].iter().filter(|&&o| positive[o]).count() as u64;
        rank_sum2 += midrank2 * pos_in_tie;
        i = j + 1;
    }
    let np = n_pos as u64;
    let u2 = rank_sum2 - np * (np + 1);
    Some(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// One point of an ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points for "score >= threshold" at every distinct score, from the
/// highest threshold down, preceded by the (0, 0) corner at +inf.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Vec<RocPoint> {
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let rate = |count: f64, total: f64| if total > 0.0 { count / total } else { 0.0 };
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            fpr: rate(fp, n_neg),
            tpr: rate(tp, n_pos),
        });
    }
    points
}

/// Mean, median and sample standard deviation of fold values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

pub fn aggregate_folds(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::data("cannot aggregate zero folds"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    };
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(Summary { mean, median, std })
}

/// Metrics of one model on one held-out fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub f1: [f64; Task::COUNT],
    pub auc: [Vec<Option<f64>>; Task::COUNT],
    pub confusion: Vec<ConfusionMatrix>,
}

impl FoldMetrics {
    /// Metrics from per-head probabilities (`n x k_t`, indexed by task) and
    /// the true labels.
    pub fn compute(probabilities: &[Matrix], truth: &crate::data::BatchLabels) -> Result<Self> {
        let mut f1 = [0.0; Task::COUNT];
        let mut auc: [Vec<Option<f64>>; Task::COUNT] = Default::default();
        let mut confusion = Vec::with_capacity(Task::COUNT);
        for t in Task::ALL {
            let p = &probabilities[t.index()];
            let predicted: Vec<usize> = (0..p.rows()).map(|r| p.argmax_row(r)).collect();
            let cm = ConfusionMatrix::new(t, &truth[t.index()], &predicted)?;
            f1[t.index()] = macro_f1(&cm);
            auc[t.index()] = roc_auc_ovr(p, &truth[t.index()])?;
            confusion.push(cm);
        }
        Ok(Self { f1, auc, confusion })
    }

    pub fn mean_f1(&self) -> f64 {
        self.f1.iter().sum::<f64>() / Task::COUNT as f64
    }

    /// Mean of the defined per-class AUCs of one task.
    pub fn auc_macro(&self, task: Task) -> Option<f64> {
        let defined: Vec<f64> = self.auc[task.index()].iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Cross-validated results of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub model: String,
    pub folds: Vec<FoldMetrics>,
}

impl FoldReport {
    pub fn f1_summary(&self, task: Task) -> Result<Summary> {
        let values: Vec<f64> = self.folds.iter().map(|f| f.f1[task.index()]).collect();
        aggregate_folds(&values)
    }

    /// Fold-mean of the per-fold macro AUC.
    pub fn auc_macro(&self, task: Task) -> Option<f64> {
        let values: Vec<f64> = self.folds.iter().filter_map(|f| f.auc_macro(task)).collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }

    pub fn mean_f1(&self) -> f64 {
        self.folds.iter().map(FoldMetrics::mean_f1).sum::<f64>() / self.folds.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_diagonal() {
        let cm = ConfusionMatrix::new(Task::Who4, &[0, 1, 2, 3, 3], &[0, 1, 2, 3, 3]).unwrap();
        assert_eq!(macro_f1(&cm), 1.0);
        assert_eq!(cm.total(), 5);
    }

    #[test]
    fn two_by_two_half() {
        // a 2-class table padded into a 3-class task would add an absent
        // class; compute directly on the per-class values instead
        let cm = ConfusionMatrix::from_counts(Task::Vs, vec![vec![1, 1, 0], vec![1, 1, 0], vec![0, 0, 0]])
            .unwrap();
        let f1 = cm.per_class_f1();
        assert_eq!(&f1[..2], &[0.5, 0.5]);
        assert_eq!(f1[2], 0.0);
    }

    #[test]
    fn absent_class_counts_zero() {
        let cm = ConfusionMatrix::new(Task::Vs, &[0, 1, 1], &[0, 1, 1]).unwrap();
        assert!((macro_f1(&cm) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn auc_separated_and_tied() {
        let scores = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.8, 0.2], vec![0.3, 0.7], vec![0.1, 0.9]]).unwrap();
        let auc = roc_auc_ovr(&scores, &[0, 0, 1, 1]).unwrap();
        assert_eq!(auc, vec![Some(1.0), Some(1.0)]);

        let flat = Matrix::filled(4, 2, 0.5);
        let auc = roc_auc_ovr(&flat, &[0, 1, 0, 1]).unwrap();
        assert_eq!(auc, vec![Some(0.5), Some(0.5)]);
    }

    #[test]
    fn auc_degenerate_is_missing() {
        let scores = Matrix::filled(3, 3, 1.0 / 3.0);
        let auc = roc_auc_ovr(&scores, &[0, 0, 1]).unwrap();
        assert_eq!(auc[2], None);
        assert!(auc[0].is_some());
    }

    #[test]
    fn roc_endpoints() {
        let pts = roc_curve(&[0.9, 0.4, 0.4, 0.1], &[true, false, true, false]);
        assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        let last = pts.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert_eq!(pts.len(), 4);
        assert_eq!((pts[2].fpr, pts[2].tpr), (0.5, 1.0));
    }

    #[test]
    fn aggregates() {
        let s = aggregate_folds(&[0.5; 5]).unwrap();
        assert_eq!((s.mean, s.median, s.std), (0.5, 0.5, 0.0));
        let s = aggregate_folds(&[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert!((s.mean - 0.3).abs() < 1e-15);
        assert!((s.median - 0.3).abs() < 1e-15);
        assert!((s.std - 0.158_113_883_008_418_98).abs() < 1e-12);
        assert_eq!(aggregate_folds(&[0.4, 0.1, 0.3, 0.2]).unwrap().median, 0.25);
        assert!(aggregate_folds(&[]).is_err());
    }
}
