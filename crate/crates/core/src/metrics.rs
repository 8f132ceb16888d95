//! Frame-level evaluation: top-k accuracy, micro precision/recall/F1, micro
//! one-vs-rest AUC and hop distance in the airway tree.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::DistanceMatrix;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(Error::invalid("no frames to evaluate"));
    }
    Ok(())
}

fn check_scores(scores: &Array2<f64>, truth: &[usize]) -> Result<()> {
    check_lengths(scores.nrows(), truth.len())?;
    if let Some(&c) = truth.iter().find(|&&c| c >= scores.ncols()) {
        return Err(Error::invalid(format!(
            "label {c} out of range for {} classes",
            scores.ncols()
        )));
    }
    Ok(())
}

/// Rank of `class` within `row` (0 = best), higher scores first, lower index
/// first among equal scores.
fn rank_of(row: &[f64], class: usize) -> usize {
    let s = row[class];
    row.iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < class))
        .count()
}

/// Fraction of frames whose true label is among the `k` best scores.
pub fn top_k_accuracy(scores: &Array2<f64>, truth: &[usize], k: usize) -> Result<f64> {
    check_scores(scores, truth)?;
    if k == 0 || k > scores.ncols() {
        return Err(Error::invalid(format!(
            "k = {k} outside 1..={}",
            scores.ncols()
        )));
    }
    let hits = scores
        .rows()
        .into_iter()
        .zip(truth)
        .filter(|(row, &t)| rank_of(&row.to_vec(), t) < k)
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Micro-averaged precision, recall and F1 over all classes.
pub fn micro_prf(pred: &[usize], truth: &[usize]) -> Result<(f64, f64, f64)> {
    check_lengths(pred.len(), truth.len())?;
    // per class c: tp_c = pred=c & truth=c, fp_c = pred=c & truth!=c,
    // fn_c = pred!=c & truth=c; a wrong frame adds one fp and one fn
    let tp = pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64;
    let wrong = pred.len() as f64 - tp;
    let (fp, fn_) = (wrong, wrong);
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok((precision, recall, f1))
}

/// Area under the ROC curve of the flattened frame x class indicator problem,
/// computed from average ranks (Mann-Whitney U).
pub fn micro_auc(scores: &Array2<f64>, truth: &[usize]) -> Result<f64> {
    check_scores(scores, truth)?;
    let classes = scores.ncols();
    let mut items: Vec<(f64, bool)> = scores
        .indexed_iter()
        .map(|((n, c), &s)| (s, truth[n] == c))
        .collect();
    let positives = truth.len();
    let negatives = items.len() - positives;
    if positives == 0 || negatives == 0 || classes < 2 {
        return Err(Error::invalid("AUC needs both positive and negative cases"));
    }
    items.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < items.len() {
        let mut j = i;
        while j < items.len() && items[j].0 == items[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        let pos = items[i..j].iter().filter(|x| x.1).count();
        pos_rank_sum += avg * pos as f64;
        i = j;
    }
    let (p, q) = (positives as f64, negatives as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Mean and population standard deviation of the hop distance between
/// predicted and true labels.
pub fn tree_distance_stats(pred: &[usize], truth: &[usize], d: &DistanceMatrix) -> Result<(f64, f64)> {
    check_lengths(pred.len(), truth.len())?;
    let k = d.size();
    if let Some(&c) = pred.iter().chain(truth).find(|&&c| c >= k) {
        return Err(Error::invalid(format!("label {c} out of range for {k} classes")));
    }
    let hops: Vec<f64> = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| f64::from(d.get(p, t)))
        .collect();
    let n = hops.len() as f64;
    let mean = hops.iter().sum::<f64>() / n;
    let var = hops.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// One row of the evaluation table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc1: f64,
    pub acc3: f64,
    pub precision_micro: f64,
    pub recall_micro: f64,
    pub f1_micro: f64,
    pub auc_micro: f64,
    pub tree_dist_mean: f64,
    pub tree_dist_std: f64,
}

impl Metrics {
    /// Evaluates hard predictions `pred` together with the per-class `scores`
    /// they came from. For Acc@3 the predicted label counts as ranked first,
    /// so `acc3 >= acc1` holds even when `pred` is not the per-row argmax
    /// of `scores` (ties in decoded marginals).
    pub fn compute(
        pred: &[usize],
        truth: &[usize],
        scores: &Array2<f64>,
        d: &DistanceMatrix,
    ) -> Result<Self> {
        check_scores(scores, truth)?;
        check_lengths(pred.len(), truth.len())?;
        if d.size() != scores.ncols() {
            return Err(Error::Dimension(format!(
                "{} score columns for a {}-label tree",
                scores.ncols(),
                d.size()
            )));
        }
        let (precision_micro, recall_micro, f1_micro) = micro_prf(pred, truth)?;
        let k = 3.min(scores.ncols());
        let top3 = scores
            .rows()
            .into_iter()
            .zip(pred.iter().zip(truth))
            .filter(|(row, (&p, &t))| p == t || rank_of(&row.to_vec(), t) < k)
            .count();
        let (tree_dist_mean, tree_dist_std) = tree_distance_stats(pred, truth, d)?;
        Ok(Self {
            acc1: precision_micro,
            acc3: top3 as f64 / truth.len() as f64,
            precision_micro,
            recall_micro,
            f1_micro,
            auc_micro: micro_auc(scores, truth)?,
            tree_dist_mean,
            tree_dist_std,
        })
    }

    /// Field-wise mean, matching how an "average" table row is formed.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a Metrics>) -> Option<Metrics> {
        let items: Vec<&Metrics> = items.into_iter().collect();
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let avg = |f: fn(&Metrics) -> f64| items.iter().map(|m| f(m)).sum::<f64>() / n;
        Some(Metrics {
            acc1: avg(|m| m.acc1),
            acc3: avg(|m| m.acc3),
            precision_micro: avg(|m| m.precision_micro),
            recall_micro: avg(|m| m.recall_micro),
            f1_micro: avg(|m| m.f1_micro),
            auc_micro: avg(|m| m.auc_micro),
            tree_dist_mean: avg(|m| m.tree_dist_mean),
            tree_dist_std: avg(|m| m.tree_dist_std),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub id: String,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub average: Metrics,
    pub per_sequence: Vec<SequenceMetrics>,
}

impl EvalReport {
    pub fn new(per_sequence: Vec<SequenceMetrics>) -> Result<Self> {
        let average = Metrics::mean(per_sequence.iter().map(|s| &s.metrics))
            .ok_or_else(|| Error::invalid("no sequences to report"))?;
        Ok(Self {
            average,
            per_sequence,
        })
    }
}

/// Plain-text table, one line per `(sequence, method, metrics)` row.
pub fn render_table(rows: &[(&str, &str, Metrics)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:<12} {:>6} {:>6} {:>9} {:>6} {:>6} {:>6}  D(mean+-std)",
        "seq", "classifier", "Acc@1", "Acc@3", "Precision", "Recall", "F1", "AUC"
    );
    for (seq, method, m) in rows {
        let _ = writeln!(
            out,
            "{:<12} {:<12} {:>6.4} {:>6.4} {:>9.4} {:>6.4} {:>6.4} {:>6.4}  {:.2} +- {:.2}",
            seq,
            method,
            m.acc1,
            m.acc3,
            m.precision_micro,
            m.recall_micro,
            m.f1_micro,
            m.auc_micro,
            m.tree_dist_mean,
            m.tree_dist_std
        );
    }
    out
}
