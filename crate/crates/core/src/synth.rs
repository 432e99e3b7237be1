//! Seeded synthetic plates and brute-force oracles.
//!
//! Plates carry integer-coordinate ground-truth boxes placed by rejection
//! sampling under a pairwise-IoU cap, a per-sample annotation record, and
//! two simulated detector outputs: `ideal` (exact boxes, score 1) and
//! `noisy` (jittered, dropped, and padded with spurious low-score boxes).
//! Everything is a pure function of the config seed, so fixtures are
//! reproducible and the whole pipeline can be exercised without images or
//! a trained model.
//!
//! The oracles re-derive quantities along independent routes: IoU by
//! counting sub-pixel lattice cells, matching by exhaustive assignment
//! enumeration.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::metrics::GroundTruth;
use crate::model::{ColonyClass, Detection, Label, SampleAnnotation, ALL_BACKGROUNDS};
use crate::tiler::ImageExtent;

/// Colony counts per plate. Samples above 300 become uncountable
/// annotations (`colonies_number = -1`, no labels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountRange {
    /// 4..=38, the dataset's interquartile band.
    Low,
    /// 50..=300, crowded plates.
    High,
    /// Low or High per sample, with the given probability of High.
    Bimodal { high_weight: f64 },
    /// Explicit inclusive range.
    Custom { min: u32, max: u32 },
}

/// Box size regime, as sqrt(area) in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeProfile {
    /// sqrt(area) in [16, 128].
    Small,
    /// sqrt(area) in [64, 512].
    Large,
    /// Explicit sqrt(area) range.
    Range { min: f64, max: f64 },
}

impl SizeProfile {
    fn bounds(self) -> (f64, f64) {
        match self {
            SizeProfile::Small => (16.0, 128.0),
            SizeProfile::Large => (64.0, 512.0),
            SizeProfile::Range { min, max } => (min, max),
        }
    }
}

/// Detector imperfection model. The all-zero default reproduces the ideal
/// detections exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Box corners and sizes perturbed by up to this fraction of the box
    /// dimensions.
    pub jitter_frac: f64,
    /// Probability a true colony goes undetected.
    pub dropout_prob: f64,
    /// Poisson rate of spurious boxes per plate.
    pub spurious_rate: f64,
    /// Gaussian noise on true-detection scores.
    pub score_noise_sd: f64,
    /// Spurious boxes score uniformly in this range.
    pub spurious_score_range: (f64, f64),
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            jitter_frac: 0.0,
            dropout_prob: 0.0,
            spurious_rate: 0.0,
            score_noise_sd: 0.0,
            spurious_score_range: (0.05, 0.5),
        }
    }
}

impl NoiseModel {
    /// A moderately sloppy detector: visible jitter, occasional misses,
    /// about one spurious box per plate.
    pub fn standard() -> Self {
        Self {
            jitter_frac: 0.05,
            dropout_prob: 0.02,
            spurious_rate: 1.0,
            score_noise_sd: 0.05,
            spurious_score_range: (0.05, 0.5),
        }
    }
}

fn default_class_mix() -> BTreeMap<ColonyClass, f64> {
    crate::model::MICROBE_CLASSES
        .iter()
        .map(|&c| (c, 1.0))
        .collect()
}

fn default_extent() -> ImageExtent {
    ImageExtent::new(2048, 2048).expect("static extent")
}

fn default_max_gt_iou() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    #[serde(default = "default_extent")]
    pub plate_extent: ImageExtent,
    pub n_samples: u32,
    pub count_distribution: CountRange,
    /// Relative class weights; microbe classes only.
    #[serde(default = "default_class_mix")]
    pub class_mix: BTreeMap<ColonyClass, f64>,
    pub size_profile: SizeProfile,
    #[serde(default)]
    pub noise: NoiseModel,
    /// Ground-truth boxes are placed with pairwise IoU at most this, so
    /// counting stays well-defined.
    #[serde(default = "default_max_gt_iou")]
    pub max_gt_iou: f64,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.noise.dropout_prob) {
            return Err(Error::InvalidConfig("dropout_prob outside [0, 1]".into()));
        }
        if self.noise.jitter_frac < 0.0 || self.noise.spurious_rate < 0.0 {
            return Err(Error::InvalidConfig(
                "jitter_frac and spurious_rate must be nonnegative".into(),
            ));
        }
        let (lo, hi) = self.noise.spurious_score_range;
        if !(unit.contains(&lo) && unit.contains(&hi) && lo <= hi) {
            return Err(Error::InvalidConfig("bad spurious_score_range".into()));
        }
        if self.class_mix.is_empty()
            || self.class_mix.values().any(|&w| w < 0.0)
            || self.class_mix.values().all(|&w| w == 0.0)
        {
            return Err(Error::InvalidConfig(
                "class_mix needs at least one positive weight".into(),
            ));
        }
        if let Some(c) = self.class_mix.keys().find(|c| !c.is_microbe()) {
            return Err(Error::InvalidConfig(format!(
                "class_mix contains non-microbe class {c}"
            )));
        }
        let (smin, smax) = self.size_profile.bounds();
        if !(smin > 0.0 && smax >= smin) {
            return Err(Error::InvalidConfig("bad size profile bounds".into()));
        }
        if !unit.contains(&self.max_gt_iou) {
            return Err(Error::InvalidConfig("max_gt_iou outside [0, 1]".into()));
        }
        if let CountRange::Bimodal { high_weight } = self.count_distribution {
            if !unit.contains(&high_weight) {
                return Err(Error::InvalidConfig(
                    "bimodal high_weight outside [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One generated plate.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub annotation: SampleAnnotation,
    /// One exact, score-1 detection per microbe label.
    pub ideal_detections: Vec<Detection>,
    pub noisy_detections: Vec<Detection>,
}

const PLACEMENT_ATTEMPTS: u32 = 200;
// Annotation taxonomy cap: plates beyond this many colonies are uncountable.
const COUNTABLE_MAX: u32 = 300;

fn draw_count(rng: &mut ChaCha8Rng, dist: CountRange) -> u32 {
    match dist {
        CountRange::Low => rng.random_range(4..=38),
        CountRange::High => rng.random_range(50..=300),
        CountRange::Bimodal { high_weight } => {
            if rng.random_range(0.0..1.0) < high_weight {
                rng.random_range(50..=300)
            } else {
                rng.random_range(4..=38)
            }
        }
        CountRange::Custom { min, max } => rng.random_range(min..=max),
    }
}

fn draw_class(rng: &mut ChaCha8Rng, mix: &BTreeMap<ColonyClass, f64>) -> ColonyClass {
    let total: f64 = mix.values().sum();
    let mut ticket = rng.random_range(0.0..total);
    for (&class, &w) in mix {
        ticket -= w;
        if ticket < 0.0 {
            return class;
        }
    }
    *mix.keys().next_back().expect("non-empty mix")
}

fn place_boxes(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    count: u32,
) -> Result<Vec<(ColonyClass, BBox<f64>)>> {
    let (smin, smax) = cfg.size_profile.bounds();
    let (pw, ph) = (
        cfg.plate_extent.width as f64,
        cfg.plate_extent.height as f64,
    );
    let mut placed: Vec<(ColonyClass, BBox<f64>)> = Vec::with_capacity(count as usize);

    for _ in 0..count {
        let mut attempts = 0;
        let bbox = loop {
            if attempts >= PLACEMENT_ATTEMPTS {
                return Err(Error::InfeasiblePlacement {
                    requested: count,
                    width: cfg.plate_extent.width,
                    height: cfg.plate_extent.height,
                    max_iou: cfg.max_gt_iou,
                });
            }
            attempts += 1;

            let sqrt_area = rng.random_range(smin..=smax);
            let aspect: f64 = rng.random_range(0.75..=4.0 / 3.0);
            let w = (sqrt_area * aspect.sqrt()).round().max(1.0);
            let h = (sqrt_area / aspect.sqrt()).round().max(1.0);
            if w >= pw || h >= ph {
                continue;
            }
            let x = (rng.random_range(0.0..=(pw - w))).round();
            let y = (rng.random_range(0.0..=(ph - h))).round();
            let candidate = BBox::new(x, y, w, h);
            if placed
                .iter()
                .all(|(_, b)| iou(b, &candidate) <= cfg.max_gt_iou)
            {
                break candidate;
            }
        };
        placed.push((draw_class(rng, &cfg.class_mix), bbox));
    }
    Ok(placed)
}

fn apply_noise(rng: &mut ChaCha8Rng, cfg: &SynthConfig, ideal: &[Detection]) -> Vec<Detection> {
    let n = &cfg.noise;
    let mut out = Vec::with_capacity(ideal.len());
    let score_noise = if n.score_noise_sd > 0.0 {
        Some(Normal::new(0.0, n.score_noise_sd).expect("validated sd"))
    } else {
        None
    };

    for det in ideal {
        if n.dropout_prob > 0.0 && rng.random_range(0.0..1.0) < n.dropout_prob {
            continue;
        }
        let (bbox, penalty) = if n.jitter_frac > 0.0 {
            let b = &det.bbox;
            let jitter = |rng: &mut ChaCha8Rng, extent: f64| -> f64 {
                rng.random_range(-n.jitter_frac..=n.jitter_frac) * extent
            };
            let dx = jitter(rng, b.w);
            let dy = jitter(rng, b.h);
            let dw = jitter(rng, b.w);
            let dh = jitter(rng, b.h);
            let w = (b.w + dw).max(1.0);
            let h = (b.h + dh).max(1.0);
            let penalty =
                (dx.abs() / b.w + dy.abs() / b.h + (w - b.w).abs() / b.w + (h - b.h).abs() / b.h)
                    / 4.0;
            (BBox::new(b.x + dx, b.y + dy, w, h), penalty)
        } else {
            (det.bbox, 0.0)
        };
        let noise = score_noise.map(|d| d.sample(rng)).unwrap_or(0.0);
        let score = (1.0 - penalty + noise).clamp(0.0, 1.0);
        out.push(Detection::new(bbox, det.class, score));
    }

    if n.spurious_rate > 0.0 {
        let k = Poisson::new(n.spurious_rate)
            .expect("validated rate")
            .sample(rng) as u32;
        let (smin, smax) = cfg.size_profile.bounds();
        let (pw, ph) = (
            cfg.plate_extent.width as f64,
            cfg.plate_extent.height as f64,
        );
        for _ in 0..k {
            let s = rng.random_range(smin..=smax).min(pw - 1.0).min(ph - 1.0);
            let x = rng.random_range(0.0..=(pw - s));
            let y = rng.random_range(0.0..=(ph - s));
            let class = draw_class(rng, &cfg.class_mix);
            let (lo, hi) = n.spurious_score_range;
            let score = if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            };
            out.push(Detection::new(BBox::new(x, y, s, s), class, score));
        }
    }
    out
}

/// Generate the configured number of plates, deterministically in the seed.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.n_samples as usize);
    for i in 0..cfg.n_samples {
        // per-sample sub-seed keeps samples independent of each other
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let background = ALL_BACKGROUNDS[i as usize % ALL_BACKGROUNDS.len()];
        let count = draw_count(&mut rng, cfg.count_distribution);

        if count > COUNTABLE_MAX {
            samples.push(SynthSample {
                annotation: SampleAnnotation {
                    sample_id: i as i64 + 1,
                    background,
                    classes: vec![],
                    colonies_number: -1,
                    labels: vec![],
                    extra: Default::default(),
                },
                ideal_detections: vec![],
                noisy_detections: vec![],
            });
            continue;
        }

        let placed = place_boxes(&mut rng, cfg, count)?;
        let labels: Vec<Label> = placed
            .iter()
            .enumerate()
            .map(|(id, &(class, bbox))| Label::new(id as i64, class, bbox))
            .collect();
        let mut species: Vec<String> = labels
            .iter()
            .map(|l| l.class.canonical_name().to_string())
            .collect();
        species.sort();
        species.dedup();

        let ideal: Vec<Detection> = labels
            .iter()
            .map(|l| Detection::new(l.bbox, l.class, 1.0))
            .collect();
        let noisy = apply_noise(&mut rng, cfg, &ideal);

        samples.push(SynthSample {
            annotation: SampleAnnotation {
                sample_id: i as i64 + 1,
                background,
                classes: species,
                colonies_number: count as i64,
                labels,
                extra: Default::default(),
            },
            ideal_detections: ideal,
            noisy_detections: noisy,
        });
    }
    Ok(samples)
}

/// Count lattice cell centers of pitch `step` falling in `[lo, hi)`.
fn count_centers(lo: f64, hi: f64, step: f64) -> u64 {
    if hi <= lo {
        return 0;
    }
    let first = (lo / step).floor() as i64 - 1;
    let last = (hi / step).ceil() as i64 + 1;
    let mut n = 0;
    for i in first..=last {
        let center = (i as f64 + 0.5) * step;
        if center >= lo && center < hi {
            n += 1;
        }
    }
    n
}

/// Rasterized IoU: cells whose centers fall inside both boxes over cells
/// inside either, on a lattice of pitch `grid_step`. Converges to the
/// continuous-area IoU as the step shrinks; an independent check of the
/// geometric implementation.
pub fn oracle_iou(a: &BBox<f64>, b: &BBox<f64>, grid_step: f64) -> f64 {
    assert!(grid_step > 0.0, "grid step must be positive");
    let cells = |r: &BBox<f64>| {
        count_centers(r.x, r.right(), grid_step) * count_centers(r.y, r.bottom(), grid_step)
    };

    let in_a = cells(a);
    let in_b = cells(b);
    let lo_x = a.x.max(b.x);
    let hi_x = a.right().min(b.right());
    let lo_y = a.y.max(b.y);
    let hi_y = a.bottom().min(b.bottom());
    let in_both = count_centers(lo_x, hi_x, grid_step) * count_centers(lo_y, hi_y, grid_step);
    let in_either = in_a + in_b - in_both;
    if in_either == 0 {
        return 0.0;
    }
    in_both as f64 / in_either as f64
}

const ORACLE_MATCH_LIMIT: usize = 64;

/// Maximum achievable TP count over all one-to-one same-class assignments
/// with IoU at or above the threshold, by exhaustive search. Only for tiny
/// instances.
pub fn oracle_best_matching(
    gt: &[GroundTruth<f64>],
    dets: &[Detection],
    iou_threshold: f64,
) -> Result<usize> {
    if gt.len() * dets.len() > ORACLE_MATCH_LIMIT {
        return Err(Error::TooLarge {
            gt: gt.len(),
            dets: dets.len(),
        });
    }

    let feasible: Vec<Vec<bool>> = dets
        .iter()
        .map(|d| {
            gt.iter()
                .map(|g| g.class == d.class && iou(&g.bbox, &d.bbox) >= iou_threshold)
                .collect()
        })
        .collect();

    fn search(det: usize, used: u32, feasible: &[Vec<bool>]) -> usize {
        if det == feasible.len() {
            return 0;
        }
        // leave this detection unmatched
        let mut best = search(det + 1, used, feasible);
        for (g, &ok) in feasible[det].iter().enumerate() {
            if ok && used & (1 << g) == 0 {
                best = best.max(1 + search(det + 1, used | (1 << g), feasible));
            }
        }
        best
    }

    Ok(search(0, 0, &feasible))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ColonyClass::{EColi, SAureus};
    use crate::model::CountabilityStatus;

    fn base_config() -> SynthConfig {
        SynthConfig {
            seed: 11,
            plate_extent: ImageExtent::new(2048, 2048).unwrap(),
            n_samples: 4,
            count_distribution: CountRange::Low,
            class_mix: default_class_mix(),
            size_profile: SizeProfile::Small,
            noise: NoiseModel::default(),
            max_gt_iou: 0.1,
        }
    }

    #[test]
    fn zero_samples_gives_empty() {
        let cfg = SynthConfig {
            n_samples: 0,
            ..base_config()
        };
        assert!(generate(&cfg).unwrap().is_empty());
    }

    #[test]
    fn zero_noise_reproduces_ideal() {
        let samples = generate(&base_config()).unwrap();
        for s in &samples {
            assert_eq!(s.noisy_detections, s.ideal_detections);
            assert_eq!(s.ideal_detections.len(), s.annotation.microbe_label_count());
            assert!(s.ideal_detections.iter().all(|d| d.score == 1.0));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            noise: NoiseModel::standard(),
            ..base_config()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn annotation_invariants_hold() {
        let samples = generate(&base_config()).unwrap();
        for s in &samples {
            assert_eq!(
                s.annotation.colonies_number as usize,
                s.annotation.microbe_label_count()
            );
            assert_eq!(s.annotation.status(), CountabilityStatus::Countable);
            let plate = BBox::new(0.0, 0.0, 2048.0, 2048.0);
            for l in &s.annotation.labels {
                assert!(l.bbox.contained_in(&plate));
                assert_eq!(l.bbox.x.fract(), 0.0);
                assert_eq!(l.bbox.w.fract(), 0.0);
            }
        }
    }

    #[test]
    fn placement_respects_overlap_cap() {
        let cfg = SynthConfig {
            count_distribution: CountRange::Custom { min: 30, max: 30 },
            ..base_config()
        };
        let samples = generate(&cfg).unwrap();
        for s in &samples {
            let boxes: Vec<_> = s.annotation.labels.iter().map(|l| l.bbox).collect();
            for i in 0..boxes.len() {
                for j in (i + 1)..boxes.len() {
                    assert!(iou(&boxes[i], &boxes[j]) <= 0.1 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn counts_above_cap_become_uncountable() {
        let cfg = SynthConfig {
            count_distribution: CountRange::Custom { min: 301, max: 320 },
            ..base_config()
        };
        let samples = generate(&cfg).unwrap();
        for s in &samples {
            assert_eq!(s.annotation.colonies_number, -1);
            assert_eq!(s.annotation.status(), CountabilityStatus::Uncountable);
            assert!(s.annotation.labels.is_empty());
            assert!(s.ideal_detections.is_empty());
        }
    }

    #[test]
    fn infeasible_density_is_an_error() {
        let cfg = SynthConfig {
            plate_extent: ImageExtent::new(128, 128).unwrap(),
            count_distribution: CountRange::Custom { min: 60, max: 60 },
            size_profile: SizeProfile::Range {
                min: 30.0,
                max: 40.0,
            },
            ..base_config()
        };
        assert!(matches!(
            generate(&cfg),
            Err(Error::InfeasiblePlacement { .. })
        ));
    }

    #[test]
    fn noise_adds_spurious_and_drops() {
        let cfg = SynthConfig {
            n_samples: 20,
            noise: NoiseModel {
                dropout_prob: 0.3,
                spurious_rate: 2.0,
                ..NoiseModel::default()
            },
            ..base_config()
        };
        let samples = generate(&cfg).unwrap();
        let drops: usize = samples
            .iter()
            .map(|s| {
                s.ideal_detections.len()
                    - s.noisy_detections.iter().filter(|d| d.score == 1.0).count()
            })
            .sum();
        assert!(drops > 0);
        let spurious: usize = samples
            .iter()
            .map(|s| s.noisy_detections.iter().filter(|d| d.score < 1.0).count())
            .sum();
        assert!(spurious > 0);
    }

    #[test]
    fn oracle_iou_identity_and_disjoint() {
        let a = BBox::new(3.0, 4.0, 10.0, 12.0);
        assert_eq!(oracle_iou(&a, &a, 0.1), 1.0);
        let b = BBox::new(100.0, 100.0, 5.0, 5.0);
        assert_eq!(oracle_iou(&a, &b, 0.1), 0.0);
    }

    #[test]
    fn oracle_iou_matches_hand_value() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 0.0, 10.0, 10.0);
        let v = oracle_iou(&a, &b, 0.01);
        assert!((v - 1.0 / 3.0).abs() <= 1e-3);
    }

    #[test]
    fn oracle_iou_converges_with_step() {
        let a = BBox::new(0.3, 0.7, 7.3, 5.1);
        let b = BBox::new(2.9, 2.2, 6.4, 6.6);
        let exact = iou(&a, &b);
        let coarse = (oracle_iou(&a, &b, 0.1) - exact).abs();
        let fine = (oracle_iou(&a, &b, 0.01) - exact).abs();
        assert!(fine <= coarse);
        assert!(fine < 1e-3);
    }

    fn gt(x: f64, y: f64, class: ColonyClass) -> GroundTruth<f64> {
        GroundTruth {
            class,
            bbox: BBox::new(x, y, 10.0, 10.0),
        }
    }

    fn det(x: f64, y: f64, class: ColonyClass) -> Detection {
        Detection::new(BBox::new(x, y, 10.0, 10.0), class, 0.9)
    }

    #[test]
    fn oracle_matching_bijection() {
        let gts = vec![gt(0.0, 0.0, EColi), gt(50.0, 0.0, SAureus)];
        let dets = vec![det(0.0, 0.0, EColi), det(50.0, 0.0, SAureus)];
        assert_eq!(oracle_best_matching(&gts, &dets, 0.5).unwrap(), 2);
    }

    #[test]
    fn oracle_matching_no_feasible_pair() {
        let gts = vec![gt(0.0, 0.0, EColi)];
        let dets = vec![det(100.0, 0.0, EColi), det(0.0, 0.0, SAureus)];
        assert_eq!(oracle_best_matching(&gts, &dets, 0.5).unwrap(), 0);
    }

    #[test]
    fn oracle_matching_crossed_pairs() {
        // two GT boxes, two detections, each detection overlapping both GT
        // well enough: both assignments feasible, max matching is 2
        let gts = vec![gt(0.0, 0.0, EColi), gt(2.0, 0.0, EColi)];
        let dets = vec![det(1.0, 0.0, EColi), det(1.5, 0.0, EColi)];
        assert_eq!(oracle_best_matching(&gts, &dets, 0.5).unwrap(), 2);
    }

    #[test]
    fn oracle_matching_rejects_large_instances() {
        let gts: Vec<_> = (0..9).map(|i| gt(20.0 * i as f64, 0.0, EColi)).collect();
        let dets: Vec<_> = (0..9).map(|i| det(20.0 * i as f64, 0.0, EColi)).collect();
        assert!(matches!(
            oracle_best_matching(&gts, &dets, 0.5),
            Err(Error::TooLarge { .. })
        ));
    }
}
