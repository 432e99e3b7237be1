//! Merging per-window detections into whole-image predictions and filtering
//! them down to one box per colony.
//!
//! Two filters run in sequence: a class-probability threshold, then a
//! non-maximum suppression pass in which the next retained box is the one
//! with the *largest area* rather than the highest score (the Area
//! priority; Score priority gives the classic behaviour). Overlapping boxes
//! of the same class have their scores decayed — hard-dropped, linearly, or
//! with a Gaussian — and are removed once they fall below a score floor.
//! Suppression never crosses classes: mixed-culture plates carry colonies
//! of different species in close contact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::model::{ColonyClass, Detection, ALL_CLASSES};
use crate::scalar::Scalar;
use crate::tiler::{window_to_image, TilingPlan};

/// Detections reported for one window of a tiling plan, in window-local
/// coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowDetections<S = f64> {
    pub window_index: usize,
    pub detections: Vec<Detection<S>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NmsMethod {
    /// Drop any same-class box with IoU at or above the threshold.
    Hard,
    /// Decay scores by `1 - iou` at or above the threshold.
    SoftLinear,
    /// Decay scores by `exp(-iou^2 / sigma)` regardless of threshold.
    SoftGaussian,
}

/// What makes a box win the retention round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmsPriority {
    /// Largest area first.
    #[default]
    Area,
    /// Highest score first (classic NMS ordering).
    Score,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NmsConfig<S = f64> {
    pub method: NmsMethod,
    /// Suppression threshold for Hard and SoftLinear.
    pub iou_threshold: S,
    /// Decay width for SoftGaussian.
    pub sigma: S,
    /// Decayed boxes below this score are removed.
    pub score_floor: S,
    pub priority: NmsPriority,
}

impl<S: Scalar> Default for NmsConfig<S> {
    fn default() -> Self {
        Self {
            method: NmsMethod::SoftGaussian,
            iou_threshold: S::from_f64(0.5),
            sigma: S::from_f64(0.5),
            score_floor: S::from_f64(0.001),
            priority: NmsPriority::Area,
        }
    }
}

impl<S: Scalar> NmsConfig<S> {
    pub fn hard(iou_threshold: S) -> Self {
        Self {
            method: NmsMethod::Hard,
            iou_threshold,
            ..Self::default()
        }
    }

    pub fn soft_linear(iou_threshold: S) -> Self {
        Self {
            method: NmsMethod::SoftLinear,
            iou_threshold,
            ..Self::default()
        }
    }

    pub fn soft_gaussian(sigma: S) -> Self {
        Self {
            method: NmsMethod::SoftGaussian,
            sigma,
            ..Self::default()
        }
    }

    pub fn with_priority(mut self, priority: NmsPriority) -> Self {
        self.priority = priority;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let unit = S::zero()..=S::one();
        match self.method {
            NmsMethod::Hard | NmsMethod::SoftLinear => {
                if !unit.contains(&self.iou_threshold) {
                    return Err(Error::InvalidConfig(format!(
                        "NMS iou_threshold {} outside [0, 1]",
                        self.iou_threshold
                    )));
                }
            }
            NmsMethod::SoftGaussian => {
                if self.sigma <= S::zero() || self.sigma.is_nan() {
                    return Err(Error::InvalidConfig(format!(
                        "NMS sigma {} must be positive",
                        self.sigma
                    )));
                }
            }
        }
        if !unit.contains(&self.score_floor) {
            return Err(Error::InvalidConfig(format!(
                "score_floor {} outside [0, 1]",
                self.score_floor
            )));
        }
        Ok(())
    }
}

/// The two tuned filters: probability threshold, then NMS.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FilterConfig<S = f64> {
    pub prob_threshold: S,
    pub nms: NmsConfig<S>,
}

impl<S: Scalar> FilterConfig<S> {
    pub fn new(prob_threshold: S, nms: NmsConfig<S>) -> Self {
        Self {
            prob_threshold,
            nms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(S::zero()..=S::one()).contains(&self.prob_threshold) {
            return Err(Error::InvalidConfig(format!(
                "prob_threshold {} outside [0, 1]",
                self.prob_threshold
            )));
        }
        self.nms.validate()
    }
}

/// Concatenate per-window detections into whole-image coordinates.
///
/// Boxes reaching into the zero-padding are clipped to the image extent;
/// clips with no remaining area are dropped. No deduplication happens here —
/// duplicated colonies from overlapping windows are left for the NMS pass.
pub fn merge_windows(
    plan: &TilingPlan,
    per_window: &[WindowDetections],
    patch_scale: f64,
) -> Result<Vec<Detection>> {
    let image =
        crate::geometry::BBox::new(0.0, 0.0, plan.image.width as f64, plan.image.height as f64);
    let mut out = Vec::new();
    for wd in per_window {
        let window = plan
            .windows
            .get(wd.window_index)
            .ok_or(Error::UnknownWindowIndex(
                wd.window_index,
                plan.windows.len(),
            ))?;
        for det in &wd.detections {
            let global = window_to_image(window, &det.bbox, patch_scale)?;
            let Some(clipped) = global.intersection(&image) else {
                continue;
            };
            out.push(Detection::new(clipped, det.class, det.score));
        }
    }
    Ok(out)
}

fn cmp_scalar<S: Scalar>(a: S, b: S) -> std::cmp::Ordering {
    a.partial_cmp(&b).unwrap_or(std::cmp::Ordering::Equal)
}

/// True when `a` should be retained before `b`.
///
/// Area priority: larger area, then higher score, then smaller (x, y).
/// Score priority: higher score, then larger area, then smaller (x, y).
/// The positional tail makes retention order, and with it the whole pass,
/// deterministic.
fn retains_before<S: Scalar>(a: &Detection<S>, b: &Detection<S>, priority: NmsPriority) -> bool {
    use std::cmp::Ordering;
    let (primary, secondary) = match priority {
        NmsPriority::Area => ((a.bbox.area(), b.bbox.area()), (a.score, b.score)),
        NmsPriority::Score => ((a.score, b.score), (a.bbox.area(), b.bbox.area())),
    };
    match cmp_scalar(primary.0, primary.1) {
        Ordering::Greater => return true,
        Ordering::Less => return false,
        Ordering::Equal => {}
    }
    match cmp_scalar(secondary.0, secondary.1) {
        Ordering::Greater => return true,
        Ordering::Less => return false,
        Ordering::Equal => {}
    }
    match cmp_scalar(a.bbox.x, b.bbox.x) {
        Ordering::Less => return true,
        Ordering::Greater => return false,
        Ordering::Equal => {}
    }
    cmp_scalar(a.bbox.y, b.bbox.y) == std::cmp::Ordering::Less
}

/// Non-maximum suppression with selectable retention priority and decay.
///
/// Each round retains the best remaining box and decays every other
/// remaining box *of the same class* by its IoU `u` against it:
/// Hard drops at `u >= iou_threshold`, SoftLinear multiplies by `1 - u` at
/// `u >= iou_threshold`, SoftGaussian multiplies by `exp(-u^2 / sigma)`.
/// Decayed boxes falling below `score_floor` are removed. Output scores are
/// the decayed ones, in retention order.
pub fn area_priority_soft_nms<S: Scalar>(
    dets: &[Detection<S>],
    cfg: &NmsConfig<S>,
) -> Vec<Detection<S>> {
    let mut remaining: Vec<Detection<S>> = dets.to_vec();
    let mut retained = Vec::with_capacity(remaining.len());

    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            if retains_before(&remaining[i], &remaining[best], cfg.priority) {
                best = i;
            }
        }
        let winner = remaining.swap_remove(best);

        remaining.retain_mut(|other| {
            if other.class != winner.class {
                return true;
            }
            let u = iou(&winner.bbox, &other.bbox);
            match cfg.method {
                NmsMethod::Hard => {
                    if u >= cfg.iou_threshold {
                        return false;
                    }
                }
                NmsMethod::SoftLinear => {
                    if u >= cfg.iou_threshold {
                        other.score = other.score * (S::one() - u);
                        if other.score < cfg.score_floor {
                            return false;
                        }
                    }
                }
                NmsMethod::SoftGaussian => {
                    other.score = other.score * (-u * u / cfg.sigma).exp();
                    if other.score < cfg.score_floor {
                        return false;
                    }
                }
            }
            true
        });

        retained.push(winner);
    }
    retained
}

/// Probability threshold, then NMS.
pub fn apply_filters<S: Scalar>(dets: &[Detection<S>], cfg: &FilterConfig<S>) -> Vec<Detection<S>> {
    let kept: Vec<Detection<S>> = dets
        .iter()
        .filter(|d| d.score >= cfg.prob_threshold)
        .cloned()
        .collect();
    area_priority_soft_nms(&kept, &cfg.nms)
}

/// Per-class detection counts for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub per_class: BTreeMap<ColonyClass, u32>,
}

impl ClassCounts {
    pub fn get(&self, class: ColonyClass) -> u32 {
        self.per_class.get(&class).copied().unwrap_or(0)
    }

    /// Colony count: microbe classes only, defects and contamination
    /// excluded.
    pub fn microbe_total(&self) -> u32 {
        self.per_class
            .iter()
            .filter(|(c, _)| c.is_microbe())
            .map(|(_, n)| n)
            .sum()
    }
}

/// Count retained detections per class.
pub fn predict_counts<S: Scalar>(dets: &[Detection<S>]) -> ClassCounts {
    let mut per_class: BTreeMap<ColonyClass, u32> = ALL_CLASSES.iter().map(|&c| (c, 0)).collect();
    for d in dets {
        *per_class.get_mut(&d.class).unwrap() += 1;
    }
    ClassCounts { per_class }
}
