//! Fitting the (probability, NMS) filter thresholds on training data.
//!
//! Every grid pair is evaluated by re-filtering the raw merged detections
//! and scoring the resulting whole-image counts. sMAPE is minimized first;
//! pairs within a small band of the minimum (default 0.1 percentage
//! points) are then decided by the lower MAE, and any remaining tie by the
//! lower thresholds, which makes the search deterministic.
//!
//! The double-thresholding policy fits a second, *auxiliary* pair on the
//! crowded subset (more than `switch_count` colonies). At inference the
//! general pair runs first; if it predicts more than `switch_count`
//! colonies the auxiliary pair is applied to the raw detections instead,
//! and its result is final.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mae, smape};
use crate::model::{Detection, SampleAnnotation};
use crate::postprocess::{apply_filters, predict_counts, FilterConfig, NmsConfig, NmsMethod};

/// One candidate filter setting. `nms_threshold` is the IoU threshold for
/// Hard and SoftLinear suppression, and sigma for SoftGaussian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPair {
    pub prob_threshold: f64,
    pub nms_threshold: f64,
}

/// Search space plus the sMAPE tiebreak band, in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub prob_values: Vec<f64>,
    pub nms_values: Vec<f64>,
    pub tiebreak_band: f64,
    /// Interpret the band as a relative fraction of the minimum instead of
    /// absolute percentage points.
    #[serde(default)]
    pub relative_band: bool,
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Inclusive `start..=stop` by `step`, rounded to 1e-6 so grid values
/// compare cleanly against decimal-written scores.
pub fn grid_values(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if step <= 0.0 || step.is_nan() || stop < start {
        return Err(Error::InvalidConfig(format!(
            "bad grid range {start}:{stop}:{step}"
        )));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|k| round6(start + k as f64 * step)).collect())
}

impl Default for GridSpec {
    /// prob 0.05..0.95 step 0.05, NMS 0.1..0.9 step 0.1, band 0.1pp.
    fn default() -> Self {
        Self {
            prob_values: grid_values(0.05, 0.95, 0.05).expect("static range"),
            nms_values: grid_values(0.1, 0.9, 0.1).expect("static range"),
            tiebreak_band: 0.1,
            relative_band: false,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let increasing = |v: &[f64]| v.windows(2).all(|p| p[0] < p[1]);
        if self.prob_values.is_empty() || self.nms_values.is_empty() {
            return Err(Error::InvalidConfig("grid axes must be nonempty".into()));
        }
        if !increasing(&self.prob_values) || !increasing(&self.nms_values) {
            return Err(Error::InvalidConfig(
                "grid axes must be strictly increasing".into(),
            ));
        }
        if self.prob_values.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidConfig("prob grid outside [0, 1]".into()));
        }
        if self.tiebreak_band < 0.0 {
            return Err(Error::InvalidConfig("tiebreak band must be >= 0".into()));
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<ThresholdPair> {
        let mut out = Vec::with_capacity(self.prob_values.len() * self.nms_values.len());
        for &prob_threshold in &self.prob_values {
            for &nms_threshold in &self.nms_values {
                out.push(ThresholdPair {
                    prob_threshold,
                    nms_threshold,
                });
            }
        }
        out
    }
}

/// One countable training sample: its ground-truth colony count and the
/// raw (merged, unfiltered) detections, so filters can be re-applied per
/// grid pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneSample {
    pub truth_count: u32,
    pub raw_detections: Vec<Detection>,
}

impl TuneSample {
    /// Build from an annotation; uncountable and empty samples yield `None`
    /// only when uncountable (empty plates still count, with truth 0).
    pub fn from_annotation(ann: &SampleAnnotation, raw: Vec<Detection>) -> Option<Self> {
        if ann.colonies_number < 0 {
            return None;
        }
        Some(Self {
            truth_count: ann.colonies_number as u32,
            raw_detections: raw,
        })
    }
}

/// Substitute a grid pair into the NMS template: the tuned value lands on
/// `iou_threshold` for Hard/SoftLinear and on `sigma` for SoftGaussian.
pub fn filter_for(pair: ThresholdPair, template: &NmsConfig) -> FilterConfig {
    let mut nms = *template;
    match template.method {
        NmsMethod::Hard | NmsMethod::SoftLinear => nms.iou_threshold = pair.nms_threshold,
        NmsMethod::SoftGaussian => nms.sigma = pair.nms_threshold,
    }
    FilterConfig::new(pair.prob_threshold, nms)
}

fn counts_under<F: Fn(&TuneSample) -> u32>(dataset: &[TuneSample], f: F) -> (Vec<u32>, Vec<u32>) {
    let truth: Vec<u32> = dataset.iter().map(|s| s.truth_count).collect();
    let pred: Vec<u32> = dataset.iter().map(f).collect();
    (truth, pred)
}

/// Filter every sample with the pair and score the resulting counts.
pub fn evaluate_pair(
    pair: ThresholdPair,
    dataset: &[TuneSample],
    template: &NmsConfig,
) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = filter_for(pair, template);
    cfg.validate()?;
    let (truth, pred) = counts_under(dataset, |s| {
        predict_counts(&apply_filters(&s.raw_detections, &cfg)).microbe_total()
    });
    Ok((smape(&truth, &pred)?, mae(&truth, &pred)?))
}

/// Deterministic argmin with the sMAPE band and MAE tiebreak. Exposed so
/// the selection rule can be tested against synthetic metric values.
pub fn select_best(evaluated: &[(ThresholdPair, f64, f64)], grid: &GridSpec) -> ThresholdPair {
    let min_smape = evaluated
        .iter()
        .map(|&(_, s, _)| s)
        .fold(f64::INFINITY, f64::min);
    let cutoff = if grid.relative_band {
        min_smape * (1.0 + grid.tiebreak_band / 100.0)
    } else {
        min_smape + grid.tiebreak_band
    };
    let mut best: Option<(ThresholdPair, f64)> = None;
    for &(pair, s, m) in evaluated {
        if s > cutoff {
            continue;
        }
        let better = match best {
            None => true,
            Some((bp, bm)) => {
                (m, pair.prob_threshold, pair.nms_threshold)
                    < (bm, bp.prob_threshold, bp.nms_threshold)
            }
        };
        if better {
            best = Some((pair, m));
        }
    }
    best.expect("nonempty grid").0
}

/// Evaluate every grid pair and pick the winner.
pub fn grid_search(
    grid: &GridSpec,
    dataset: &[TuneSample],
    template: &NmsConfig,
) -> Result<ThresholdPair> {
    grid.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pairs = grid.pairs();
    let evaluated: Vec<(ThresholdPair, f64, f64)> = pairs
        .par_iter()
        .map(|&pair| {
            let (s, m) = evaluate_pair(pair, dataset, template)?;
            Ok((pair, s, m))
        })
        .collect::<Result<_>>()?;
    Ok(select_best(&evaluated, grid))
}

/// General thresholds plus the auxiliary pair for crowded plates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualPolicy {
    pub general: ThresholdPair,
    pub auxiliary: ThresholdPair,
    pub switch_count: u32,
}

pub const DEFAULT_SWITCH_COUNT: u32 = 50;

/// Fit the general pair on everything and the auxiliary pair on the
/// subset with more than `switch_count` ground-truth colonies.
pub fn fit_dual_policy(
    grid: &GridSpec,
    dataset: &[TuneSample],
    template: &NmsConfig,
    switch_count: u32,
) -> Result<DualPolicy> {
    let general = grid_search(grid, dataset, template)?;
    let crowded: Vec<TuneSample> = dataset
        .iter()
        .filter(|s| s.truth_count > switch_count)
        .cloned()
        .collect();
    if crowded.is_empty() {
        return Err(Error::NoHighCountSamples(switch_count));
    }
    let auxiliary = grid_search(grid, &crowded, template)?;
    Ok(DualPolicy {
        general,
        auxiliary,
        switch_count,
    })
}

/// Filter with the general pair; if its prediction exceeds the switch
/// count, refilter the raw detections with the auxiliary pair. The
/// auxiliary result is final even if it falls back below the switch count.
pub fn apply_dual_policy(
    policy: &DualPolicy,
    raw_dets: &[Detection],
    template: &NmsConfig,
) -> Vec<Detection> {
    let general = apply_filters(raw_dets, &filter_for(policy.general, template));
    if predict_counts(&general).microbe_total() > policy.switch_count {
        apply_filters(raw_dets, &filter_for(policy.auxiliary, template))
    } else {
        general
    }
}

/// Counting metrics of the mixed (general/auxiliary) policy over a dataset.
pub fn evaluate_dual_policy(
    policy: &DualPolicy,
    dataset: &[TuneSample],
    template: &NmsConfig,
) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (truth, pred) = counts_under(dataset, |s| {
        predict_counts(&apply_dual_policy(policy, &s.raw_detections, template)).microbe_total()
    });
    Ok((smape(&truth, &pred)?, mae(&truth, &pred)?))
}

/// On-disk shape of fitted thresholds, consumed by the merge command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdsFile {
    pub method: NmsMethod,
    pub prob_threshold: f64,
    pub nms_threshold: f64,
    #[serde(default)]
    pub priority: crate::postprocess::NmsPriority,
    #[serde(default = "default_score_floor")]
    pub score_floor: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auxiliary: Option<ThresholdPair>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub switch_count: Option<u32>,
}

fn default_score_floor() -> f64 {
    0.001
}

impl ThresholdsFile {
    pub fn template(&self) -> NmsConfig {
        let mut t = NmsConfig {
            method: self.method,
            priority: self.priority,
            score_floor: self.score_floor,
            ..NmsConfig::default()
        };
        match self.method {
            NmsMethod::Hard | NmsMethod::SoftLinear => t.iou_threshold = self.nms_threshold,
            NmsMethod::SoftGaussian => t.sigma = self.nms_threshold,
        }
        t
    }

    pub fn general_pair(&self) -> ThresholdPair {
        ThresholdPair {
            prob_threshold: self.prob_threshold,
            nms_threshold: self.nms_threshold,
        }
    }

    pub fn dual_policy(&self) -> Option<DualPolicy> {
        self.auxiliary.map(|auxiliary| DualPolicy {
            general: self.general_pair(),
            auxiliary,
            switch_count: self.switch_count.unwrap_or(DEFAULT_SWITCH_COUNT),
        })
    }
}
