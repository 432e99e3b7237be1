//! Splitting whole-plate images into fixed-size patches.
//!
//! Two regimes:
//!
//! * **Train** — randomized patches, each placed so it fully contains a
//!   randomly chosen not-yet-covered box, repeated until every box is
//!   covered, then topped up with a few percent of patches containing no
//!   box area at all.
//! * **Test** — a deterministic sliding-window grid with an overlap of 1/8
//!   of the patch side (stride 448 for the default 512 side). The image is
//!   conceptually zero-padded on the right/bottom so every window is
//!   full-size and the stride stays uniform; the pad extent is recorded on
//!   each window.
//!
//! Planning never touches pixels. A plan serializes to a JSON manifest so
//! external inference code can cut the actual crops and report detections
//! keyed by window index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transform_box, BBox};
use crate::model::Label;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_PATCH_SIDE: u32 = 512;

/// Whole-image pixel extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageExtent {
    pub width: u32,
    pub height: u32,
}

impl ImageExtent {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "image extent must be positive, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    fn as_box(&self) -> BBox<f64> {
        BBox::new(0.0, 0.0, self.width as f64, self.height as f64)
    }
}

/// One square window in padded-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchWindow {
    pub x0: u32,
    pub y0: u32,
    pub side: u32,
    /// Zero-padding the window reads past the right image edge.
    pub pad_right: u32,
    /// Zero-padding past the bottom edge.
    pub pad_bottom: u32,
}

impl PatchWindow {
    fn at(x0: u32, y0: u32, side: u32, extent: ImageExtent) -> Self {
        Self {
            x0,
            y0,
            side,
            pad_right: (x0 + side).saturating_sub(extent.width),
            pad_bottom: (y0 + side).saturating_sub(extent.height),
        }
    }

    /// Window rectangle in image coordinates (including any pad region).
    pub fn as_box(&self) -> BBox<f64> {
        BBox::new(
            self.x0 as f64,
            self.y0 as f64,
            self.side as f64,
            self.side as f64,
        )
    }

    /// True when `b` (in image coordinates) lies entirely inside the window.
    pub fn contains(&self, b: &BBox<f64>) -> bool {
        b.contained_in(&self.as_box())
    }

    /// True when `b` has positive overlap area with the window.
    pub fn overlaps(&self, b: &BBox<f64>) -> bool {
        b.intersection(&self.as_box()).is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TilingMode {
    Train,
    Test,
}

/// A planned set of windows over one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TilingPlan {
    /// Id of the image the plan belongs to; set by the caller when writing
    /// manifests for external inference.
    pub sample_id: i64,
    pub image: ImageExtent,
    pub mode: TilingMode,
    pub seed: Option<u64>,
    pub empty_fraction: Option<f64>,
    pub windows: Vec<PatchWindow>,
}

/// Manifest shape: windows stored as `[x0, y0, side]`; pads are derived
/// from the extent on load.
#[derive(Serialize, Deserialize)]
struct PlanRepr {
    sample_id: i64,
    width: u32,
    height: u32,
    mode: TilingMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    empty_fraction: Option<f64>,
    windows: Vec<[u32; 3]>,
}

impl TilingPlan {
    pub fn to_manifest_json(&self) -> String {
        let repr = PlanRepr {
            sample_id: self.sample_id,
            width: self.image.width,
            height: self.image.height,
            mode: self.mode,
            seed: self.seed,
            empty_fraction: self.empty_fraction,
            windows: self.windows.iter().map(|w| [w.x0, w.y0, w.side]).collect(),
        };
        serde_json::to_string_pretty(&repr).expect("plan serialization cannot fail")
    }

    pub fn from_manifest_json(text: &str) -> Result<Self> {
        let repr: PlanRepr = serde_json::from_str(text)?;
        let image = ImageExtent::new(repr.width, repr.height)?;
        Ok(Self {
            sample_id: repr.sample_id,
            image,
            mode: repr.mode,
            seed: repr.seed,
            empty_fraction: repr.empty_fraction,
            windows: repr
                .windows
                .into_iter()
                .map(|[x0, y0, side]| PatchWindow::at(x0, y0, side, image))
                .collect(),
        })
    }
}

/// Deterministic sliding-window grid covering the whole image.
///
/// Stride is `side - overlap`; origins sit at multiples of the stride until
/// a window's far edge reaches or passes the image edge. Trailing windows
/// read zero padding instead of shifting to hug the edge, which keeps the
/// offsets uniform for merging.
pub fn plan_test_windows(extent: ImageExtent, side: u32, overlap: u32) -> Result<TilingPlan> {
    if side == 0 || overlap >= side {
        return Err(Error::InvalidGeometry { side, overlap });
    }
    let stride = side - overlap;

    let count = |length: u32| -> u32 {
        if length <= side {
            1
        } else {
            // smallest n with stride*(n-1) + side >= length
            1 + (length - side).div_ceil(stride)
        }
    };

    let cols = count(extent.width);
    let rows = count(extent.height);
    let mut windows = Vec::with_capacity((cols * rows) as usize);
    for j in 0..rows {
        for i in 0..cols {
            windows.push(PatchWindow::at(i * stride, j * stride, side, extent));
        }
    }

    Ok(TilingPlan {
        sample_id: 0,
        image: extent,
        mode: TilingMode::Test,
        seed: None,
        empty_fraction: None,
        windows,
    })
}

/// Default test grid: 512 px side, 1/8-side (64 px) overlap.
pub fn plan_test_windows_default(extent: ImageExtent) -> Result<TilingPlan> {
    plan_test_windows(extent, DEFAULT_PATCH_SIDE, DEFAULT_PATCH_SIDE / 8)
}

/// What to do with a box larger than the patch side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OversizedPolicy {
    /// Fail planning.
    #[default]
    Reject,
    /// Center a window on the box; the box will only be partially covered.
    CenterAndClip,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub side: u32,
    pub seed: u64,
    /// Empty patches appended, as a fraction of the occupied patches.
    pub empty_fraction: f64,
    pub oversized: OversizedPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            side: DEFAULT_PATCH_SIDE,
            seed: 0,
            empty_fraction: 0.05,
            oversized: OversizedPolicy::Reject,
        }
    }
}

/// Non-fatal planning issues.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TilerWarning {
    /// Fewer empty patches than requested could be placed.
    NotEnoughEmptyRegions { requested: u32, placed: u32 },
}

impl std::fmt::Display for TilerWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TilerWarning::NotEnoughEmptyRegions { requested, placed } => write!(
                f,
                "requested {requested} empty patches but only {placed} box-free origins were found"
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub plan: TilingPlan,
    pub warnings: Vec<TilerWarning>,
}

// Consecutive rejection-sampling misses before concluding that no box-free
// window origin exists.
const EMPTY_SEARCH_ATTEMPTS: u32 = 1000;

/// Randomized training patches covering every annotated box.
///
/// While unmarked boxes remain: pick one uniformly at random, pick a window
/// origin uniformly among all origins whose window fully contains it
/// (clamped to image bounds), emit the window, and mark every box fully
/// contained in it. Afterwards `round(empty_fraction * emitted)` windows
/// with zero box area are appended, sampled uniformly among box-free
/// origins. Identical seeds give identical plans.
pub fn plan_train_patches(
    extent: ImageExtent,
    boxes: &[BBox<f64>],
    cfg: &TrainConfig,
) -> Result<PlanOutcome> {
    if cfg.side == 0 {
        return Err(Error::InvalidConfig("patch side must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.empty_fraction) {
        return Err(Error::InvalidConfig(format!(
            "empty_fraction {} outside [0, 1]",
            cfg.empty_fraction
        )));
    }
    let side = cfg.side;
    let image_box = extent.as_box();
    for b in boxes {
        if !b.is_valid() {
            return Err(Error::InvalidBox { w: b.w, h: b.h });
        }
        if !b.contained_in(&image_box) {
            return Err(Error::InvalidConfig(format!(
                "box at ({}, {}) extends outside the {}x{} image",
                b.x, b.y, extent.width, extent.height
            )));
        }
        let oversized = b.w > side as f64 || b.h > side as f64;
        if oversized && cfg.oversized == OversizedPolicy::Reject {
            return Err(Error::OversizedBox {
                w: b.w,
                h: b.h,
                side,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_ox = extent.width.saturating_sub(side);
    let max_oy = extent.height.saturating_sub(side);

    let mut unmarked: Vec<usize> = (0..boxes.len()).collect();
    let mut windows: Vec<PatchWindow> = Vec::new();

    while !unmarked.is_empty() {
        let pick = rng.random_range(0..unmarked.len());
        let target = unmarked[pick];
        let b = &boxes[target];

        let origin_range = |lo_edge: f64, hi_edge: f64, max_origin: u32| -> Option<(u32, u32)> {
            // window [o, o+side] must contain [lo_edge, hi_edge]
            let lo = (hi_edge - side as f64).ceil().max(0.0) as u32;
            let hi = lo_edge.floor().min(max_origin as f64);
            if hi < 0.0 || lo as f64 > hi {
                None
            } else {
                Some((lo, hi as u32))
            }
        };

        let xr = origin_range(b.x, b.right(), max_ox);
        let yr = origin_range(b.y, b.bottom(), max_oy);
        let window = match (xr, yr) {
            (Some((xlo, xhi)), Some((ylo, yhi))) => {
                let ox = rng.random_range(xlo..=xhi);
                let oy = rng.random_range(ylo..=yhi);
                PatchWindow::at(ox, oy, side, extent)
            }
            _ => {
                // oversized in at least one axis: center the window on the box
                let (cx, cy) = b.center();
                let center_origin = |c: f64, max_origin: u32| -> u32 {
                    (c - side as f64 / 2.0)
                        .round()
                        .clamp(0.0, max_origin as f64) as u32
                };
                PatchWindow::at(
                    center_origin(cx, max_ox),
                    center_origin(cy, max_oy),
                    side,
                    extent,
                )
            }
        };

        unmarked.retain(|&i| i != target && !window.contains(&boxes[i]));
        windows.push(window);
    }

    let mut warnings = Vec::new();
    let requested = (cfg.empty_fraction * windows.len() as f64).round() as u32;
    let mut placed = 0;
    let mut misses = 0;
    while placed < requested && misses < EMPTY_SEARCH_ATTEMPTS {
        let ox = rng.random_range(0..=max_ox);
        let oy = rng.random_range(0..=max_oy);
        let w = PatchWindow::at(ox, oy, side, extent);
        if boxes.iter().any(|b| w.overlaps(b)) {
            misses += 1;
        } else {
            windows.push(w);
            placed += 1;
            misses = 0;
        }
    }
    if placed < requested {
        warnings.push(TilerWarning::NotEnoughEmptyRegions { requested, placed });
    }

    Ok(PlanOutcome {
        plan: TilingPlan {
            sample_id: 0,
            image: extent,
            mode: TilingMode::Train,
            seed: Some(cfg.seed),
            empty_fraction: Some(cfg.empty_fraction),
            windows,
        },
        warnings,
    })
}

/// Partial-box handling when projecting labels into a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClipPolicy {
    /// Keep only boxes entirely inside the window.
    #[default]
    FullContainmentOnly,
    /// Intersect boxes with the window; keep clips retaining at least 25%
    /// of the original area.
    ClipPartial,
}

const CLIP_KEEP_FRACTION: f64 = 0.25;

/// Project labels into window-local coordinates.
pub fn clip_labels_to_window(
    labels: &[Label],
    window: &PatchWindow,
    policy: ClipPolicy,
) -> Vec<Label> {
    let win = window.as_box();
    let mut out = Vec::new();
    for l in labels {
        let local = match policy {
            ClipPolicy::FullContainmentOnly => {
                if !l.bbox.contained_in(&win) {
                    continue;
                }
                l.bbox
            }
            ClipPolicy::ClipPartial => {
                let Some(clipped) = l.bbox.intersection(&win) else {
                    continue;
                };
                if clipped.area() < CLIP_KEEP_FRACTION * l.bbox.area() {
                    continue;
                }
                clipped
            }
        };
        out.push(Label {
            id: l.id,
            class: l.class,
            bbox: BBox::new(local.x - win.x, local.y - win.y, local.w, local.h),
            extra: l.extra.clone(),
        });
    }
    out
}

/// Map a window-local detection box back to whole-image coordinates.
///
/// `patch_scale` is the ratio between the network input size and the window
/// side (1 when patches go in un-resized).
pub fn window_to_image(
    window: &PatchWindow,
    local_box: &BBox<f64>,
    patch_scale: f64,
) -> Result<BBox<f64>> {
    if patch_scale <= 0.0 || !patch_scale.is_finite() {
        return Err(Error::NonPositiveScale(patch_scale));
    }
    transform_box(
        local_box,
        1.0 / patch_scale,
        (window.x0 as f64, window.y0 as f64),
    )
}

/// Inverse of [`window_to_image`]: project a whole-image box into
/// window-local coordinates.
pub fn image_to_window(
    window: &PatchWindow,
    global_box: &BBox<f64>,
    patch_scale: f64,
) -> Result<BBox<f64>> {
    if patch_scale <= 0.0 || !patch_scale.is_finite() {
        return Err(Error::NonPositiveScale(patch_scale));
    }
    transform_box(
        global_box,
        patch_scale,
        (
            -(window.x0 as f64) * patch_scale,
            -(window.y0 as f64) * patch_scale,
        ),
    )
}
