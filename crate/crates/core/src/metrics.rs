//! Multi-label metrics: per-class average precision and mAP, class-wise and
//! overall F1, pooled false-positive rate, and Last/Avg report assembly.
//!
//! Average precision is un-interpolated mean precision at positive ranks,
//! with ranking by descending score and ties broken by original index so
//! results are deterministic. Classes with zero positives have no defined
//! AP; callers exclude them and record the exclusion. Per-class F1 uses the
//! zero-denominator → 0 convention.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DdpError, Result};

/// Un-interpolated average precision of one class.
///
/// Scores are ranked descending (ties by original index); AP is the mean of
/// precision-at-rank over the ranks holding positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DdpError::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(DdpError::Domain("non-finite score".to_string()));
    }
    let positives = labels.iter().filter(|l| **l).count();
    if positives == 0 {
        return Err(DdpError::UndefinedAveragePrecision(
            "no positive labels for this class".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores compare")
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

fn check_matrix_shapes(decisions: &[Vec<bool>], labels: &[Vec<bool>]) -> Result<usize> {
    if decisions.len() != labels.len() {
        return Err(DdpError::Shape(format!(
            "{} decision rows but {} label rows",
            decisions.len(),
            labels.len()
        )));
    }
    if decisions.is_empty() {
        return Err(DdpError::Usage("empty decision matrix".to_string()));
    }
    let cols = decisions[0].len();
    if cols == 0 {
        return Err(DdpError::Usage("decision matrix has no classes".to_string()));
    }
    for (d, l) in decisions.iter().zip(labels) {
        if d.len() != cols || l.len() != cols {
            return Err(DdpError::Shape(format!(
                "ragged matrix: expected {cols} columns"
            )));
        }
    }
    Ok(cols)
}

/// Class-wise (macro) and overall (micro) F1 over images × classes decision
/// and label matrices. Classes with zero predicted and zero actual
/// positives contribute F1 = 0.
pub fn f1_scores(decisions: &[Vec<bool>], labels: &[Vec<bool>]) -> Result<(f64, f64)> {
    let cols = check_matrix_shapes(decisions, labels)?;
    let mut class_f1_sum = 0.0;
    let mut pooled_tp = 0usize;
    let mut pooled_fp = 0usize;
    let mut pooled_fn = 0usize;
    for class in 0..cols {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (d, l) in decisions.iter().zip(labels) {
            match (d[class], l[class]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            class_f1_sum += 2.0 * tp as f64 / denom as f64;
        }
        pooled_tp += tp;
        pooled_fp += fp;
        pooled_fn += fn_;
    }
    let cf1 = class_f1_sum / cols as f64;
    let pooled_denom = 2 * pooled_tp + pooled_fp + pooled_fn;
    let of1 = if pooled_denom > 0 {
        2.0 * pooled_tp as f64 / pooled_denom as f64
    } else {
        0.0
    };
    Ok((cf1, of1))
}

/// Pooled false-positive rate: FP / (FP + TN) over every (image, class)
/// pair whose ground truth is negative.
pub fn false_positive_rate(decisions: &[Vec<bool>], labels: &[Vec<bool>]) -> Result<f64> {
    let cols = check_matrix_shapes(decisions, labels)?;
    let mut fp = 0usize;
    let mut tn = 0usize;
    for (d, l) in decisions.iter().zip(labels) {
        for class in 0..cols {
            if !l[class] {
                if d[class] {
                    fp += 1;
                } else {
                    tn += 1;
                }
            }
        }
    }
    if fp + tn == 0 {
        return Err(DdpError::Domain(
            "no ground-truth negatives to pool".to_string(),
        ));
    }
    Ok(fp as f64 / (fp + tn) as f64)
}

/// Metrics of one task evaluation at one operating point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Task index, 0-based.
    pub task: usize,
    /// Cumulative class count evaluated at this task.
    pub classes_evaluated: usize,
    /// Decision-threshold identifier ("base", "hiconf", …).
    pub operating_point: String,
    pub map: f64,
    pub cf1: f64,
    pub of1: f64,
    pub fpr: f64,
    /// Classes skipped in mAP because they had no test positives.
    pub excluded_classes: Vec<usize>,
}

/// One Last or Avg line of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub map: f64,
    pub cf1: f64,
    pub of1: f64,
    pub fpr: f64,
}

/// The full report: every per-task record plus Last/Avg views keyed by
/// operating point, tied to the manifest that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub manifest_hash: String,
    pub records: Vec<MetricsRecord>,
    pub last: BTreeMap<String, MetricsSummary>,
    pub avg: BTreeMap<String, MetricsSummary>,
}

/// Builds a report from per-task records: Last is the final task's record
/// and Avg the arithmetic mean over tasks, per operating point. Every
/// operating point must cover the same contiguous task range exactly once.
pub fn aggregate(records: &[MetricsRecord], manifest_hash: &str) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(DdpError::Usage("no metrics records".to_string()));
    }
    for r in records {
        for (name, v) in [("mAP", r.map), ("CF1", r.cf1), ("OF1", r.of1), ("FPR", r.fpr)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(DdpError::Usage(format!(
                    "task {} {name} = {v} outside [0, 1]",
                    r.task
                )));
            }
        }
    }
    let mut by_point: BTreeMap<String, BTreeMap<usize, &MetricsRecord>> = BTreeMap::new();
    for r in records {
        if by_point
            .entry(r.operating_point.clone())
            .or_default()
            .insert(r.task, r)
            .is_some()
        {
            return Err(DdpError::Usage(format!(
                "duplicate record for task {} at operating point {}",
                r.task, r.operating_point
            )));
        }
    }
    let mut expected_tasks: Option<Vec<usize>> = None;
    let mut last = BTreeMap::new();
    let mut avg = BTreeMap::new();
    for (point, tasks) in &by_point {
        let ids: Vec<usize> = tasks.keys().copied().collect();
        let contiguous: Vec<usize> = (0..ids.len()).collect();
        if ids != contiguous {
            return Err(DdpError::Usage(format!(
                "operating point {point} is missing task records: found {ids:?}"
            )));
        }
        match &expected_tasks {
            None => expected_tasks = Some(ids),
            Some(e) if *e != ids => {
                return Err(DdpError::Usage(format!(
                    "operating point {point} covers different tasks than the others"
                )));
            }
            _ => {}
        }
        let final_task = tasks.values().last().expect("non-empty");
        last.insert(
            point.clone(),
            MetricsSummary {
                map: final_task.map,
                cf1: final_task.cf1,
                of1: final_task.of1,
                fpr: final_task.fpr,
            },
        );
        let n = tasks.len() as f64;
        avg.insert(
            point.clone(),
            MetricsSummary {
                map: tasks.values().map(|r| r.map).sum::<f64>() / n,
                cf1: tasks.values().map(|r| r.cf1).sum::<f64>() / n,
                of1: tasks.values().map(|r| r.of1).sum::<f64>() / n,
                fpr: tasks.values().map(|r| r.fpr).sum::<f64>() / n,
            },
        );
    }
    Ok(MetricsReport {
        manifest_hash: manifest_hash.to_string(),
        records: records.to_vec(),
        last,
        avg,
    })
}

impl MetricsReport {
    /// Deterministic pretty-printed JSON document.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| DdpError::Usage(format!("report serialization failed: {e}")))
    }

    /// Parses a report previously produced by [`MetricsReport::to_json`].
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DdpError::Format {
            section: "report".to_string(),
            offset: 0,
            message: e.to_string(),
        })
    }

    /// Flat CSV of the per-task curves, one row per (task, operating point).
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("task,classes_evaluated,operating_point,map,cf1,of1,fpr\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.task, r.classes_evaluated, r.operating_point, r.map, r.cf1, r.of1, r.fpr
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn perfect_ranking_scores_one() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        assert_eq!(average_precision(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn alternating_ranking_matches_hand_enumeration() {
        let scores = [0.9, 0.8, 0.7, 0.6];
        let labels = [true, false, true, false];
        let ap = average_precision(&scores, &labels).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn single_positive_ranked_last_scores_quarter() {
        let scores = [0.9, 0.8, 0.7, 0.1];
        let labels = [false, false, false, true];
        assert_eq!(average_precision(&scores, &labels).unwrap(), 0.25);
    }

    #[test]
    fn zero_positives_is_undefined() {
        let scores = [0.9, 0.1];
        let labels = [false, false];
        assert!(matches!(
            average_precision(&scores, &labels),
            Err(DdpError::UndefinedAveragePrecision(_))
        ));
    }

    #[test]
    fn ties_break_by_original_index() {
        // Equal scores: the earlier index ranks first, so putting the
        // positive first vs. last changes AP deterministically.
        let scores = [0.5, 0.5, 0.5];
        assert_eq!(
            average_precision(&scores, &[true, false, false]).unwrap(),
            1.0
        );
        let ap_last = average_precision(&scores, &[false, false, true]).unwrap();
        assert!((ap_last - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ap_is_invariant_under_strictly_increasing_transforms() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let n = 2 + rng.next_below(10) as usize;
            let scores: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.4).collect();
            labels[0] = true;
            let cubic: Vec<f64> = scores.iter().map(|s| s.powi(3) + 2.0 * s).collect();
            let tanh: Vec<f64> = scores.iter().map(|s| s.tanh()).collect();
            let base = average_precision(&scores, &labels).unwrap();
            assert_eq!(base, average_precision(&cubic, &labels).unwrap());
            assert_eq!(base, average_precision(&tanh, &labels).unwrap());
        }
    }

    #[test]
    fn exact_decisions_score_one_and_inverted_zero() {
        let labels = vec![vec![true, false], vec![false, true]];
        let (cf1, of1) = f1_scores(&labels, &labels).unwrap();
        assert_eq!((cf1, of1), (1.0, 1.0));
        let inverted: Vec<Vec<bool>> = labels
            .iter()
            .map(|row| row.iter().map(|v| !v).collect())
            .collect();
        let (cf1, of1) = f1_scores(&inverted, &labels).unwrap();
        assert_eq!((cf1, of1), (0.0, 0.0));
    }

    #[test]
    fn confusion_example_matches_hand_arithmetic() {
        // Class A: TP=1 FP=1 FN=0; class B: TP=0 FP=0 FN=1.
        let decisions = vec![vec![true, false], vec![true, false]];
        let labels = vec![vec![true, true], vec![false, false]];
        let (cf1, of1) = f1_scores(&decisions, &labels).unwrap();
        assert!((cf1 - (2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((of1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn silent_class_contributes_zero_f1() {
        // Second class has no predictions and no positives.
        let decisions = vec![vec![true, false]];
        let labels = vec![vec![true, false]];
        let (cf1, of1) = f1_scores(&decisions, &labels).unwrap();
        assert_eq!(cf1, 0.5);
        assert_eq!(of1, 1.0);
    }

    #[test]
    fn fpr_counts_pooled_negatives() {
        // Three ground-truth negatives, one decided positive.
        let decisions = vec![vec![true, true], vec![false, false]];
        let labels = vec![vec![true, false], vec![false, false]];
        let fpr = false_positive_rate(&decisions, &labels).unwrap();
        assert!((fpr - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn fpr_extremes_and_missing_negatives() {
        let all_neg = vec![vec![false, false]];
        assert_eq!(
            false_positive_rate(&vec![vec![false, false]], &all_neg).unwrap(),
            0.0
        );
        assert_eq!(
            false_positive_rate(&vec![vec![true, true]], &all_neg).unwrap(),
            1.0
        );
        let all_pos = vec![vec![true, true]];
        assert!(matches!(
            false_positive_rate(&vec![vec![true, true]], &all_pos),
            Err(DdpError::Domain(_))
        ));
    }

    /// Count-based oracle: AP from pairwise rank counts, no sorting.
    fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let rank_of = |i: usize| -> usize {
            let mut r = 1;
            for j in 0..scores.len() {
                if scores[j] > scores[i] || (scores[j] == scores[i] && j < i) {
                    r += 1;
                }
            }
            r
        };
        let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
        let mut sum = 0.0;
        for &p in &positives {
            let rp = rank_of(p);
            let hits = positives.iter().filter(|&&q| rank_of(q) <= rp).count();
            sum += hits as f64 / rp as f64;
        }
        sum / positives.len() as f64
    }

    /// Confusion-count oracle for CF1/OF1/FPR.
    fn confusion_oracle(
        decisions: &[Vec<bool>],
        labels: &[Vec<bool>],
    ) -> (f64, f64, Option<f64>) {
        let classes = decisions[0].len();
        let count = |class: usize, d: bool, l: bool| -> usize {
            decisions
                .iter()
                .zip(labels)
                .filter(|(dr, lr)| dr[class] == d && lr[class] == l)
                .count()
        };
        let mut cf1 = 0.0;
        let (mut tp_all, mut fp_all, mut fn_all, mut tn_all) = (0, 0, 0, 0);
        for c in 0..classes {
            let (tp, fp, fn_, tn) = (
                count(c, true, true),
                count(c, true, false),
                count(c, false, true),
                count(c, false, false),
            );
            if 2 * tp + fp + fn_ > 0 {
                cf1 += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
            }
            tp_all += tp;
            fp_all += fp;
            fn_all += fn_;
            tn_all += tn;
        }
        cf1 /= classes as f64;
        let of1 = if 2 * tp_all + fp_all + fn_all > 0 {
            2.0 * tp_all as f64 / (2 * tp_all + fp_all + fn_all) as f64
        } else {
            0.0
        };
        let fpr = if fp_all + tn_all > 0 {
            Some(fp_all as f64 / (fp_all + tn_all) as f64)
        } else {
            None
        };
        (of1, cf1, fpr)
    }

    #[test]
    fn random_instances_match_bruteforce_oracles() {
        let mut rng = Rng::new(77);
        for _ in 0..200 {
            let images = 1 + rng.next_below(8) as usize;
            let classes = 1 + rng.next_below(4) as usize;
            let scores: Vec<Vec<f64>> = (0..images)
                .map(|_| {
                    (0..classes)
                        .map(|_| (rng.next_below(20) as f64) / 20.0)
                        .collect()
                })
                .collect();
            let labels: Vec<Vec<bool>> = (0..images)
                .map(|_| (0..classes).map(|_| rng.next_f64() < 0.5).collect())
                .collect();
            let decisions: Vec<Vec<bool>> = scores
                .iter()
                .map(|row| row.iter().map(|s| *s > 0.5).collect())
                .collect();

            for class in 0..classes {
                let col_scores: Vec<f64> = scores.iter().map(|r| r[class]).collect();
                let col_labels: Vec<bool> = labels.iter().map(|r| r[class]).collect();
                if col_labels.iter().any(|l| *l) {
                    let ap = average_precision(&col_scores, &col_labels).unwrap();
                    assert!((ap - ap_oracle(&col_scores, &col_labels)).abs() < 1e-12);
                }
            }
            let (of1_o, cf1_o, fpr_o) = confusion_oracle(&decisions, &labels);
            let (cf1, of1) = f1_scores(&decisions, &labels).unwrap();
            assert!((cf1 - cf1_o).abs() < 1e-12);
            assert!((of1 - of1_o).abs() < 1e-12);
            match (false_positive_rate(&decisions, &labels), fpr_o) {
                (Ok(fpr), Some(o)) => assert!((fpr - o).abs() < 1e-12),
                (Err(DdpError::Domain(_)), None) => {}
                other => panic!("fpr mismatch: {other:?}"),
            }
        }
    }

    fn record(task: usize, point: &str, map: f64) -> MetricsRecord {
        MetricsRecord {
            task,
            classes_evaluated: 4 + 2 * task,
            operating_point: point.to_string(),
            map,
            cf1: 0.5,
            of1: 0.5,
            fpr: 0.1,
            excluded_classes: Vec::new(),
        }
    }

    #[test]
    fn aggregate_averages_per_operating_point() {
        let records = vec![
            record(0, "base", 0.8),
            record(1, "base", 0.6),
            record(0, "hiconf", 0.8),
            record(1, "hiconf", 0.4),
        ];
        let report = aggregate(&records, "hash123").unwrap();
        assert_eq!(report.last["base"].map, 0.6);
        assert!((report.avg["base"].map - 0.7).abs() < 1e-15);
        assert!((report.avg["hiconf"].map - 0.6).abs() < 1e-15);
        assert_eq!(report.manifest_hash, "hash123");
    }

    #[test]
    fn identical_records_make_avg_equal_last() {
        let records = vec![record(0, "base", 0.75), record(1, "base", 0.75)];
        let report = aggregate(&records, "h").unwrap();
        assert_eq!(report.last["base"], report.avg["base"]);
    }

    #[test]
    fn missing_task_record_is_a_usage_error() {
        let records = vec![record(0, "base", 0.8), record(2, "base", 0.6)];
        assert!(matches!(
            aggregate(&records, "h"),
            Err(DdpError::Usage(_))
        ));
        let dup = vec![record(0, "base", 0.8), record(0, "base", 0.6)];
        assert!(matches!(aggregate(&dup, "h"), Err(DdpError::Usage(_))));
        let uneven = vec![
            record(0, "base", 0.8),
            record(1, "base", 0.6),
            record(0, "hiconf", 0.8),
        ];
        assert!(matches!(aggregate(&uneven, "h"), Err(DdpError::Usage(_))));
    }

    #[test]
    fn out_of_range_metric_is_rejected() {
        let mut bad = record(0, "base", 1.2);
        assert!(matches!(
            aggregate(&[bad.clone()], "h"),
            Err(DdpError::Usage(_))
        ));
        bad.map = f64::NAN;
        assert!(matches!(aggregate(&[bad], "h"), Err(DdpError::Usage(_))));
    }

    #[test]
    fn report_round_trips_byte_identically() {
        let records = vec![
            record(0, "base", 0.8125),
            record(1, "base", 0.637),
            record(0, "hiconf", 0.8125),
            record(1, "hiconf", 0.591),
        ];
        let report = aggregate(&records, "abcdef").unwrap();
        let json = report.to_json().unwrap();
        let parsed = MetricsReport::from_json(&json).unwrap();
        assert_eq!(parsed, report);
        assert_eq!(parsed.to_json().unwrap(), json);
        let csv = report.to_csv();
        assert!(csv.starts_with("task,classes_evaluated,operating_point,map,cf1,of1,fpr\n"));
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.contains("0,4,base,0.8125,0.5,0.5,0.1"));
    }
}
