//! Classifier evaluation: confusion counts, ROC curves, trapezoidal AUC,
//! and pooled cross-imputation reports.
//!
//! AUC is accumulated in integer count space (twice the area times
//! positives times negatives), which makes the trapezoidal value equal to
//! the Mann-Whitney statistic exactly, ties counted one half.

use crate::error::{Error, Result};
use crate::impute::pool_predictions;
use serde::{Deserialize, Serialize};

/// Confusion counts at a fixed probability threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }
}

/// Count predictions against labels; a probability at or above `threshold`
/// predicts the positive class.
pub fn confusion(probs: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch(probs.len(), labels.len()));
    }
    if probs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(&bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::OutOfRange(bad));
    }
    let mut counts = ConfusionCounts {
        true_pos: 0,
        false_pos: 0,
        true_neg: 0,
        false_neg: 0,
    };
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => counts.true_pos += 1,
            (true, false) => counts.false_pos += 1,
            (false, false) => counts.true_neg += 1,
            (false, true) => counts.false_neg += 1,
        }
    }
    Ok(counts)
}

/// ROC polyline from (0,0) to (1,1) plus trapezoidal AUC.
///
/// Thresholds sweep the distinct scores in descending order; tied scores
/// collapse to a single vertex.
pub fn roc_auc(probs: &[f64], labels: &[u8]) -> Result<(Vec<(f64, f64)>, f64)> {
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch(probs.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::OneClassOnly);
    }

    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));

    let mut roc = Vec::with_capacity(probs.len() + 1);
    roc.push((0.0, 0.0));
    let mut tp: u64 = 0;
    let mut fp: u64 = 0;
    // 2 * area * pos * neg, accumulated exactly in integers.
    let mut area2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let score = probs[order[i]];
        let mut dtp: u64 = 0;
        let mut dfp: u64 = 0;
        while i < order.len() && probs[order[i]] == score {
            if labels[order[i]] == 1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        area2 += dfp * (2 * tp + dtp);
        tp += dtp;
        fp += dfp;
        roc.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = area2 as f64 / (2.0 * pos as f64 * neg as f64);
    Ok((roc, auc))
}

/// Full metric report for one model on one evaluation set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
    pub accuracy: f64,
    /// Ratios left as null when their denominator is zero; see `notes`.
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub auc: f64,
    pub roc: Vec<(f64, f64)>,
    pub notes: Vec<String>,
}

fn ratio(num: usize, den: usize, name: &str, notes: &mut Vec<String>) -> Option<f64> {
    if den == 0 {
        notes.push(format!("{name} undefined: empty denominator"));
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Evaluate a single probability vector against labels.
pub fn evaluate(probs: &[f64], labels: &[u8], threshold: f64) -> Result<EvalReport> {
    let counts = confusion(probs, labels, threshold)?;
    let (roc, auc) = roc_auc(probs, labels)?;
    let mut notes = Vec::new();
    let accuracy = (counts.true_pos + counts.true_neg) as f64 / counts.total() as f64;
    let sensitivity = ratio(
        counts.true_pos,
        counts.true_pos + counts.false_neg,
        "sensitivity",
        &mut notes,
    );
    let specificity = ratio(
        counts.true_neg,
        counts.true_neg + counts.false_pos,
        "specificity",
        &mut notes,
    );
    let ppv = ratio(
        counts.true_pos,
        counts.true_pos + counts.false_pos,
        "ppv",
        &mut notes,
    );
    let npv = ratio(
        counts.true_neg,
        counts.true_neg + counts.false_neg,
        "npv",
        &mut notes,
    );
    Ok(EvalReport {
        threshold,
        true_pos: counts.true_pos,
        false_pos: counts.false_pos,
        true_neg: counts.true_neg,
        false_neg: counts.false_neg,
        accuracy,
        sensitivity,
        specificity,
        ppv,
        npv,
        auc,
        roc,
        notes,
    })
}

/// Average the per-imputation probability vectors, then evaluate the
/// pooled predictions.
pub fn evaluate_pooled(
    per_imputation: &[Vec<f64>],
    labels: &[u8],
    threshold: f64,
) -> Result<EvalReport> {
    let pooled = pool_predictions(per_imputation)?;
    evaluate(&pooled, labels, threshold)
}

/// One row of the model-comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedReport {
    pub name: String,
    pub adjusted: bool,
    pub report: EvalReport,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.3}"),
        None => "NA".to_string(),
    }
}

/// Render the comparison table: one row per model, metric columns, the
/// best AUC within the unadjusted and adjusted blocks flagged with `*`.
pub fn format_table2(rows: &[NamedReport]) -> String {
    let best_auc = |adjusted: bool| -> Option<f64> {
        rows.iter()
            .filter(|r| r.adjusted == adjusted)
            .map(|r| r.report.auc)
            .fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.max(v)))
            })
    };
    let best = [best_auc(false), best_auc(true)];
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:>9} {:>9} {:>12} {:>12} {:>7} {:>7}\n",
        "Model", "Accuracy", "AUC", "Sensitivity", "Specificity", "PPV", "NPV"
    ));
    for row in rows {
        let flag = match best[usize::from(row.adjusted)] {
            Some(b) if row.report.auc == b => "*",
            _ => " ",
        };
        out.push_str(&format!(
            "{:<28} {:>9.3} {:>8.3}{} {:>12} {:>12} {:>7} {:>7}\n",
            row.name,
            row.report.accuracy,
            row.report.auc,
            flag,
            fmt_opt(row.report.sensitivity),
            fmt_opt(row.report.specificity),
            fmt_opt(row.report.ppv),
            fmt_opt(row.report.npv),
        ));
    }
    out
}

/// ROC polyline as a `fpr,tpr` CSV body.
pub fn roc_csv(report: &EvalReport) -> String {
    let mut out = String::from("fpr,tpr\n");
    for &(fpr, tpr) in &report.roc {
        out.push_str(&format!("{fpr},{tpr}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    /// O(n^2) pairwise-concordance AUC, ties counted one half.
    fn auc_by_pair_counting(probs: &[f64], labels: &[u8]) -> f64 {
        let mut concordant = 0u64;
        let mut tied = 0u64;
        let mut pairs = 0u64;
        for (i, &yi) in labels.iter().enumerate() {
            if yi != 1 {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj != 0 {
                    continue;
                }
                pairs += 1;
                if probs[i] > probs[j] {
                    concordant += 1;
                } else if probs[i] == probs[j] {
                    tied += 1;
                }
            }
        }
        (concordant as f64 + 0.5 * tied as f64) / pairs as f64
    }

    #[test]
    fn perfect_predictions_are_perfect() {
        let labels = vec![1, 0, 1, 0, 1];
        let probs = vec![1.0, 0.0, 1.0, 0.0, 1.0];
        let report = evaluate(&probs, &labels, 0.5).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.sensitivity, Some(1.0));
        assert_eq!(report.specificity, Some(1.0));
        assert_eq!(report.auc, 1.0);
    }

    #[test]
    fn degenerate_all_positive_predictor() {
        // 70% prevalence, everything predicted positive.
        let labels: Vec<u8> = (0..10).map(|i| u8::from(i < 7)).collect();
        let probs = vec![1.0; 10];
        let report = evaluate(&probs, &labels, 0.5).unwrap();
        assert_eq!(report.sensitivity, Some(1.0));
        assert_eq!(report.specificity, Some(0.0));
        assert!((report.accuracy - 0.70).abs() < 1e-12);
        assert_eq!(report.ppv, Some(0.70));
        assert!(report.npv.is_none());
        assert!(report.notes.iter().any(|n| n.contains("npv")));
    }

    #[test]
    fn probability_at_threshold_counts_positive() {
        let counts = confusion(&[0.5], &[1], 0.5).unwrap();
        assert_eq!(counts.true_pos, 1);
    }

    #[test]
    fn all_tied_scores_give_diagonal_roc() {
        let labels = vec![1, 1, 0, 0, 1];
        let probs = vec![0.3; 5];
        let (roc, auc) = roc_auc(&probs, &labels).unwrap();
        assert_eq!(roc, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(auc, 0.5);
    }

    #[test]
    fn one_class_is_rejected() {
        assert!(matches!(
            roc_auc(&[0.1, 0.9], &[1, 1]),
            Err(Error::OneClassOnly)
        ));
    }

    #[test]
    fn trapezoid_auc_equals_pair_counting_with_ties() {
        let mut rng = stream_rng(8, Stream::Synth, 0);
        for case in 0..30 {
            let n = rng.random_range(10..200);
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            if labels.iter().all(|&y| y == labels[0]) {
                continue;
            }
            // Coarse grid of scores forces plenty of ties.
            let probs: Vec<f64> = (0..n)
                .map(|_| rng.random_range(0..8) as f64 / 7.0)
                .collect();
            let (_, auc) = roc_auc(&probs, &labels).unwrap();
            let oracle = auc_by_pair_counting(&probs, &labels);
            assert_eq!(auc, oracle, "case {case}");
        }
    }

    #[test]
    fn metric_algebra_holds() {
        let mut rng = stream_rng(9, Stream::Synth, 0);
        let n = 300;
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_range(0..10) < 7)).collect();
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let report = evaluate(&probs, &labels, 0.5).unwrap();
        let prevalence = labels.iter().filter(|&&y| y == 1).count() as f64 / n as f64;
        let reconstructed = prevalence * report.sensitivity.unwrap()
            + (1.0 - prevalence) * report.specificity.unwrap();
        assert!((report.accuracy - reconstructed).abs() < 1e-12);
    }

    #[test]
    fn roc_monotone_with_fixed_endpoints() {
        let mut rng = stream_rng(10, Stream::Synth, 0);
        let n = 200;
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
        let (roc, _) = roc_auc(&probs, &labels).unwrap();
        assert_eq!(roc[0], (0.0, 0.0));
        assert_eq!(*roc.last().unwrap(), (1.0, 1.0));
        for w in roc.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn label_flip_symmetry() {
        let mut rng = stream_rng(11, Stream::Synth, 0);
        let n = 150;
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let (_, auc) = roc_auc(&probs, &labels).unwrap();
        let flipped_labels: Vec<u8> = labels.iter().map(|&y| 1 - y).collect();
        let flipped_probs: Vec<f64> = probs.iter().map(|&p| 1.0 - p).collect();
        let (_, auc_flipped) = roc_auc(&flipped_probs, &flipped_labels).unwrap();
        assert!((auc - auc_flipped).abs() < 1e-12);
    }

    #[test]
    fn confusion_point_lies_on_or_below_roc() {
        let mut rng = stream_rng(12, Stream::Synth, 0);
        let n = 120;
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
        let (roc, _) = roc_auc(&probs, &labels).unwrap();
        for threshold in [0.1, 0.3, 0.5, 0.9] {
            let c = confusion(&probs, &labels, threshold).unwrap();
            let fpr = c.false_pos as f64 / (c.false_pos + c.true_neg) as f64;
            let tpr = c.true_pos as f64 / (c.true_pos + c.false_neg) as f64;
            // Interpolate the polyline at fpr.
            let mut roc_tpr = 0.0;
            for w in roc.windows(2) {
                let ((x0, y0), (x1, y1)) = (w[0], w[1]);
                if fpr >= x0 && fpr <= x1 {
                    roc_tpr = if x1 > x0 {
                        y0 + (y1 - y0) * (fpr - x0) / (x1 - x0)
                    } else {
                        y1
                    };
                }
            }
            assert!(tpr <= roc_tpr + 1e-12);
        }
    }

    #[test]
    fn pooled_single_vector_matches_direct() {
        let labels = vec![1, 0, 1, 0];
        let probs = vec![0.9, 0.2, 0.7, 0.4];
        let direct = evaluate(&probs, &labels, 0.5).unwrap();
        let pooled = evaluate_pooled(&[probs.clone()], &labels, 0.5).unwrap();
        assert_eq!(direct.auc, pooled.auc);
        assert_eq!(direct.accuracy, pooled.accuracy);
        let three = evaluate_pooled(&[probs.clone(), probs.clone(), probs], &labels, 0.5).unwrap();
        assert_eq!(direct.auc, three.auc);
    }

    #[test]
    fn pooled_average_is_evaluated_not_per_model() {
        let mut rng = stream_rng(13, Stream::Synth, 0);
        let n = 80;
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|&p| 1.0 - p).collect();
        let pooled = evaluate_pooled(&[a.clone(), b.clone()], &labels, 0.5).unwrap();
        let mean: Vec<f64> = a.iter().zip(&b).map(|(&x, &y)| (x + y) / 2.0).collect();
        let (_, want) = roc_auc(&mean, &labels).unwrap();
        assert_eq!(pooled.auc, want);
    }

    #[test]
    fn table_flags_best_auc_and_roc_csv_endpoints() {
        let labels = vec![1, 0, 1, 0, 1, 0];
        let good = evaluate(&[0.9, 0.1, 0.8, 0.2, 0.7, 0.3], &labels, 0.5).unwrap();
        let bad = evaluate(&[0.6, 0.4, 0.4, 0.6, 0.5, 0.5], &labels, 0.5).unwrap();
        let rows = vec![
            NamedReport {
                name: "model_a".into(),
                adjusted: false,
                report: good.clone(),
            },
            NamedReport {
                name: "model_b".into(),
                adjusted: false,
                report: bad,
            },
        ];
        let table = format_table2(&rows);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains('*'));
        assert!(!lines[2].contains('*'));

        let csv = roc_csv(&good);
        let body: Vec<&str> = csv.lines().collect();
        assert_eq!(body[0], "fpr,tpr");
        assert_eq!(body[1], "0,0");
        assert_eq!(*body.last().unwrap(), "1,1");
    }
}
