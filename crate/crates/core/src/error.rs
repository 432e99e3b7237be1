//! Error type shared across the crate.

use crate::model::ColonyClass;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed JSON: {0}")]
    MalformedJson(#[from] serde_json::Error),

    #[error("missing field `{0}`")]
    MissingField(String),

    #[error("unknown class name `{0}`")]
    UnknownClass(String),

    #[error("unknown background category `{0}`")]
    UnknownBackground(String),

    #[error(
        "sample {sample_id}: colonies_number is {declared} but {found} microbe labels are present"
    )]
    CountMismatch {
        sample_id: i64,
        declared: i64,
        found: usize,
    },

    #[error("unknown field(s) rejected in strict mode: {0}")]
    UnknownFields(String),

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("duplicate sample_id {0}")]
    DuplicateSampleId(i64),

    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),

    #[error("invalid bounding box: w={w}, h={h} (both must be positive and finite)")]
    InvalidBox { w: f64, h: f64 },

    #[error("box ({w} x {h}) does not fit in a {side} px patch")]
    OversizedBox { w: f64, h: f64, side: u32 },

    #[error("invalid tiling geometry: overlap {overlap} must be smaller than side {side}")]
    InvalidGeometry { side: u32, overlap: u32 },

    #[error("detections reference window index {0}, but the plan has {1} windows")]
    UnknownWindowIndex(usize, usize),

    #[error("IoU threshold must be in (0, 1], got {0}")]
    InvalidThreshold(f64),

    #[error("length mismatch: {left} truth values vs {right} predictions")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("no sample has more than {0} colonies; cannot fit auxiliary thresholds")]
    NoHighCountSamples(u32),

    #[error("predictions reference sample {sample_id}, which is absent from the ground truth")]
    MissingSample { sample_id: i64 },

    #[error(
        "could not place {requested} colonies on a {width}x{height} plate (overlap cap {max_iou})"
    )]
    InfeasiblePlacement {
        requested: u32,
        width: u32,
        height: u32,
        max_iou: f64,
    },

    #[error("instance too large for exhaustive matching: {gt} ground truth x {dets} detections")]
    TooLarge { gt: usize, dets: usize },

    #[error("no instances of class {0:?}")]
    NoInstances(ColonyClass),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
