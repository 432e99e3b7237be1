//! Detection metrics (IoU-thresholded matching, precision/recall, AP, mAP)
//! and counting metrics (MAE, cMAE, sMAPE).
//!
//! Matching follows the COCO-style greedy protocol: detections are visited
//! in descending score order and each claims the unmatched same-class
//! ground-truth box of highest IoU, provided that IoU clears the threshold.
//! AP integrates the precision-recall curve with the trapezoidal rule;
//! COCO's 101-point interpolation is available for comparison.
//!
//! Counting errors compare whole-image microbe counts. sMAPE divides each
//! sample's error by the summed count so sparse plates weigh as much as
//! crowded ones, with the `0/0` term defined as zero; cMAE sums per-species
//! MAE so misclassification shows up even when the totals agree.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::model::{ColonyClass, Detection, Label, MICROBE_CLASSES};
use crate::postprocess::ClassCounts;
use crate::scalar::Scalar;

/// Class-labelled ground-truth box, the matcher's view of a [`Label`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth<S = f64> {
    pub class: ColonyClass,
    pub bbox: BBox<S>,
}

impl From<&Label> for GroundTruth<f64> {
    fn from(l: &Label) -> Self {
        Self {
            class: l.class,
            bbox: l.bbox,
        }
    }
}

pub fn ground_truth_of(labels: &[Label]) -> Vec<GroundTruth<f64>> {
    labels.iter().map(GroundTruth::from).collect()
}

/// Confusion tallies for one matching pass. `tn` is kept for completeness
/// and stays zero in detection settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl MatchOutcome {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }
}

/// Greedy matching in descending score order.
///
/// Returns `(det_index, matched_gt_index or None)` pairs in processing
/// order. Score ties break by input position, so the result is
/// deterministic.
pub fn match_detections<S: Scalar>(
    gt: &[GroundTruth<S>],
    dets: &[Detection<S>],
    iou_threshold: S,
) -> Result<Vec<(usize, Option<usize>)>> {
    if !(iou_threshold > S::zero() && iou_threshold <= S::one()) {
        return Err(Error::InvalidThreshold(iou_threshold.to_f64()));
    }

    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut gt_taken = vec![false; gt.len()];
    let mut matches = Vec::with_capacity(dets.len());
    for det_idx in order {
        let det = &dets[det_idx];
        let mut best: Option<(usize, S)> = None;
        for (gt_idx, g) in gt.iter().enumerate() {
            if gt_taken[gt_idx] || g.class != det.class {
                continue;
            }
            let u = iou(&g.bbox, &det.bbox);
            if u >= iou_threshold {
                let beats = match best {
                    None => true,
                    Some((_, bu)) => u > bu,
                };
                if beats {
                    best = Some((gt_idx, u));
                }
            }
        }
        match best {
            Some((gt_idx, _)) => {
                gt_taken[gt_idx] = true;
                matches.push((det_idx, Some(gt_idx)));
            }
            None => matches.push((det_idx, None)),
        }
    }
    Ok(matches)
}

/// Matching reduced to TP/FP/FN tallies.
pub fn match_outcome<S: Scalar>(
    gt: &[GroundTruth<S>],
    dets: &[Detection<S>],
    iou_threshold: S,
) -> Result<MatchOutcome> {
    let matches = match_detections(gt, dets, iou_threshold)?;
    let tp = matches.iter().filter(|(_, m)| m.is_some()).count();
    Ok(MatchOutcome {
        tp,
        fp: dets.len() - tp,
        fn_: gt.len() - tp,
        tn: 0,
    })
}

/// One point of a precision-recall sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PRPoint<S = f64> {
    pub recall: S,
    pub precision: S,
    pub score_cutoff: S,
}

/// Precision-recall curve swept over the distinct detection scores.
///
/// At each cutoff only detections scoring at least the cutoff are matched.
/// With nothing retained precision is defined as 1, so an empty detection
/// set yields the single point (recall 0, precision 1).
pub fn pr_curve<S: Scalar>(
    gt: &[GroundTruth<S>],
    dets: &[Detection<S>],
    iou_threshold: S,
) -> Result<Vec<PRPoint<S>>> {
    if dets.is_empty() {
        return Ok(vec![PRPoint {
            recall: S::zero(),
            precision: S::one(),
            score_cutoff: S::one(),
        }]);
    }

    let mut cutoffs: Vec<S> = dets.iter().map(|d| d.score).collect();
    cutoffs.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    cutoffs.dedup();

    let mut points = Vec::with_capacity(cutoffs.len());
    for cutoff in cutoffs {
        let retained: Vec<Detection<S>> =
            dets.iter().filter(|d| d.score >= cutoff).cloned().collect();
        let outcome = match_outcome(gt, &retained, iou_threshold)?;
        points.push(PRPoint {
            recall: S::from_f64(outcome.recall()),
            precision: S::from_f64(outcome.precision()),
            score_cutoff: cutoff,
        });
    }
    Ok(points)
}

/// How to integrate the PR curve into an AP value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApIntegration {
    /// Trapezoidal rule over the swept points.
    #[default]
    Trapezoid,
    /// COCO-style: precision envelope sampled at 101 recall levels.
    Interpolated101,
}

/// Integrate precision over recall.
///
/// Points are sorted by recall; the gap from recall 0 to the first point is
/// closed at that point's precision, while recall beyond the last point
/// contributes nothing (an empty or truncated detector earns no credit for
/// recall it never reaches).
pub fn average_precision<S: Scalar>(curve: &[PRPoint<S>]) -> S {
    average_precision_with(curve, ApIntegration::Trapezoid)
}

pub fn average_precision_with<S: Scalar>(curve: &[PRPoint<S>], method: ApIntegration) -> S {
    if curve.is_empty() {
        return S::zero();
    }
    let mut pts: Vec<(S, S)> = curve.iter().map(|p| (p.recall, p.precision)).collect();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));

    let ap = match method {
        ApIntegration::Trapezoid => {
            let two = S::from_f64(2.0);
            // start gap: constant precision from recall 0 to the first point
            let mut area = pts[0].0 * pts[0].1;
            for pair in pts.windows(2) {
                let (r0, p0) = pair[0];
                let (r1, p1) = pair[1];
                area = area + (r1 - r0) * (p0 + p1) / two;
            }
            area
        }
        ApIntegration::Interpolated101 => {
            let mut total = S::zero();
            let n = 101;
            for i in 0..n {
                let r = S::from_f64(i as f64 / (n - 1) as f64);
                // precision envelope: best precision at recall >= r
                let mut best = S::zero();
                for &(pr, pp) in &pts {
                    if pr >= r && pp > best {
                        best = pp;
                    }
                }
                total = total + best;
            }
            total / S::from_f64(n as f64)
        }
    };
    ap.max(S::zero()).min(S::one())
}

/// AP at each IoU threshold plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApSeries {
    pub thresholds: Vec<f64>,
    pub ap: Vec<f64>,
    pub mean: f64,
}

/// Per-class and class-averaged AP over a threshold set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub overall: ApSeries,
    pub per_class: BTreeMap<ColonyClass, ApSeries>,
}

/// The COCO threshold sweep 0.50, 0.55, ..., 0.95.
pub fn default_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Pooled mAP report over a dataset.
///
/// Detections are matched within their own sample, then pooled across
/// samples per class for one PR sweep per (class, threshold) — the COCO
/// convention. Classes with no ground truth anywhere are skipped. Samples
/// with ground truth but no prediction entry count as empty predictions;
/// predictions for unknown samples are an error.
pub fn map_report(
    gt_by_sample: &BTreeMap<i64, Vec<Label>>,
    dets_by_sample: &BTreeMap<i64, Vec<Detection>>,
    thresholds: &[f64],
    integration: ApIntegration,
) -> Result<APReport> {
    for sample_id in dets_by_sample.keys() {
        if !gt_by_sample.contains_key(sample_id) {
            return Err(Error::MissingSample {
                sample_id: *sample_id,
            });
        }
    }

    let mut gt_count_per_class: BTreeMap<ColonyClass, usize> = BTreeMap::new();
    for labels in gt_by_sample.values() {
        for l in labels {
            *gt_count_per_class.entry(l.class).or_default() += 1;
        }
    }

    let classes: Vec<ColonyClass> = gt_count_per_class.keys().copied().collect();
    let mut per_class: BTreeMap<ColonyClass, ApSeries> = BTreeMap::new();

    for &class in &classes {
        let total_gt = gt_count_per_class[&class];
        let mut ap_values = Vec::with_capacity(thresholds.len());
        for &thr in thresholds {
            // pool scored TP/FP flags across samples
            let mut flags: Vec<(f64, bool)> = Vec::new();
            for (sample_id, labels) in gt_by_sample {
                let gt: Vec<GroundTruth<f64>> = labels
                    .iter()
                    .filter(|l| l.class == class)
                    .map(GroundTruth::from)
                    .collect();
                let empty = Vec::new();
                let dets_all = dets_by_sample.get(sample_id).unwrap_or(&empty);
                let dets: Vec<Detection> = dets_all
                    .iter()
                    .filter(|d| d.class == class)
                    .cloned()
                    .collect();
                for (det_idx, matched) in match_detections(&gt, &dets, thr)? {
                    flags.push((dets[det_idx].score, matched.is_some()));
                }
            }
            flags.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

            let mut curve = Vec::new();
            let (mut tp, mut fp) = (0usize, 0usize);
            let mut i = 0;
            while i < flags.len() {
                let cutoff = flags[i].0;
                while i < flags.len() && flags[i].0 == cutoff {
                    if flags[i].1 {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                    i += 1;
                }
                curve.push(PRPoint {
                    recall: tp as f64 / total_gt as f64,
                    precision: tp as f64 / (tp + fp) as f64,
                    score_cutoff: cutoff,
                });
            }
            if curve.is_empty() {
                curve.push(PRPoint {
                    recall: 0.0,
                    precision: 1.0,
                    score_cutoff: 1.0,
                });
            }
            ap_values.push(average_precision_with(&curve, integration));
        }
        let mean = ap_values.iter().sum::<f64>() / ap_values.len().max(1) as f64;
        per_class.insert(
            class,
            ApSeries {
                thresholds: thresholds.to_vec(),
                ap: ap_values,
                mean,
            },
        );
    }

    let overall_ap: Vec<f64> = (0..thresholds.len())
        .map(|i| {
            let sum: f64 = per_class.values().map(|s| s.ap[i]).sum();
            sum / per_class.len().max(1) as f64
        })
        .collect();
    let overall_mean = overall_ap.iter().sum::<f64>() / overall_ap.len().max(1) as f64;

    Ok(APReport {
        overall: ApSeries {
            thresholds: thresholds.to_vec(),
            ap: overall_ap,
            mean: overall_mean,
        },
        per_class,
    })
}

/// Mean absolute error between paired counts.
pub fn mae(truth: &[u32], pred: &[u32]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::LengthMismatch {
            left: truth.len(),
            right: pred.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: f64 = truth
        .iter()
        .zip(pred)
        .map(|(&t, &p)| (t as f64 - p as f64).abs())
        .sum();
    Ok(total / truth.len() as f64)
}

/// Symmetric mean absolute percentage error, in percent.
///
/// Each term is `|t - p| / |t + p|`; a term with `t = p = 0` contributes
/// zero (the predicted count is correct).
pub fn smape(truth: &[u32], pred: &[u32]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::LengthMismatch {
            left: truth.len(),
            right: pred.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: f64 = truth
        .iter()
        .zip(pred)
        .map(|(&t, &p)| {
            if t == 0 && p == 0 {
                0.0
            } else {
                (t as f64 - p as f64).abs() / (t as f64 + p as f64)
            }
        })
        .sum();
    Ok(100.0 * total / truth.len() as f64)
}

/// Per-microbe-class MAE values, keyed by class.
pub fn per_class_mae(
    truth: &[ClassCounts],
    pred: &[ClassCounts],
) -> Result<BTreeMap<ColonyClass, f64>> {
    if truth.len() != pred.len() {
        return Err(Error::LengthMismatch {
            left: truth.len(),
            right: pred.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut out = BTreeMap::new();
    for class in MICROBE_CLASSES {
        let t: Vec<u32> = truth.iter().map(|c| c.get(class)).collect();
        let p: Vec<u32> = pred.iter().map(|c| c.get(class)).collect();
        out.insert(class, mae(&t, &p)?);
    }
    Ok(out)
}

/// Cumulative MAE: the sum of MAE over the five microbe classes. Defects
/// and contamination never enter.
pub fn cmae(truth: &[ClassCounts], pred: &[ClassCounts]) -> Result<f64> {
    Ok(per_class_mae(truth, pred)?.values().sum())
}

/// Counting metrics over a set of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub n_samples: usize,
    pub mae: f64,
    /// Percent.
    pub smape: f64,
    pub cmae: f64,
    pub per_class_mae: BTreeMap<ColonyClass, f64>,
    /// Number of microbe classes cMAE sums over.
    pub k: usize,
}

/// Assemble the full counting report from per-sample class counts.
pub fn count_report(truth: &[ClassCounts], pred: &[ClassCounts]) -> Result<CountReport> {
    let totals_t: Vec<u32> = truth.iter().map(ClassCounts::microbe_total).collect();
    let totals_p: Vec<u32> = pred.iter().map(ClassCounts::microbe_total).collect();
    let per_class = per_class_mae(truth, pred)?;
    Ok(CountReport {
        n_samples: truth.len(),
        mae: mae(&totals_t, &totals_p)?,
        smape: smape(&totals_t, &totals_p)?,
        cmae: per_class.values().sum(),
        per_class_mae: per_class,
        k: MICROBE_CLASSES.len(),
    })
}
