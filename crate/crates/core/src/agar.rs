//! AGAR-style annotation JSON: one file per sample.
//!
//! The on-disk layout is
//!
//! ```json
//! {   "background": "dark",
//!     "classes": ["S.aureus"],
//!     "colonies_number": 3,
//!     "labels": [
//!         { "id": 0, "class": "S.aureus",
//!           "height": 40, "width": 41, "x": 1210, "y": 880 }
//!     ],
//!     "sample_id": 17
//! }
//! ```
//!
//! `colonies_number` is the total number of colonies excluding defects and
//! contamination, or -1 for uncountable samples. Ground truth carries
//! integer coordinates; writing emits integers whenever a coordinate is
//! integral so round-tripped files stay in that shape.

use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::fmt;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{AliasTable, BackgroundCategory, Label, SampleAnnotation};

/// How forgiving parsing should be. Lenient is the default: the dataset's
/// annotators are known to have missed the odd colony, so count mismatches
/// are surfaced as warnings rather than hard failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    Strict,
    #[default]
    Lenient,
}

#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    pub strictness: Strictness,
    pub aliases: AliasTable,
}

/// Non-fatal issues found while parsing in lenient mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseWarning {
    CountMismatch {
        sample_id: i64,
        declared: i64,
        found: usize,
    },
    DuplicateLabelId {
        sample_id: i64,
        id: i64,
    },
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseWarning::CountMismatch {
                sample_id,
                declared,
                found,
            } => write!(
                f,
                "sample {sample_id}: colonies_number is {declared} but {found} microbe labels are present"
            ),
            ParseWarning::DuplicateLabelId { sample_id, id } => {
                write!(f, "sample {sample_id}: duplicate label id {id}")
            }
        }
    }
}

/// A parsed sample plus any lenient-mode warnings.
#[derive(Debug, Clone)]
pub struct Parsed {
    pub sample: SampleAnnotation,
    pub warnings: Vec<ParseWarning>,
}

#[derive(Deserialize)]
struct RawLabel {
    id: Option<i64>,
    class: Option<String>,
    height: Option<f64>,
    width: Option<f64>,
    x: Option<f64>,
    y: Option<f64>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Deserialize)]
struct RawSample {
    background: Option<String>,
    classes: Option<Vec<String>>,
    colonies_number: Option<i64>,
    labels: Option<Vec<RawLabel>>,
    sample_id: Option<i64>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

fn require<T>(v: Option<T>, name: &str) -> Result<T> {
    v.ok_or_else(|| Error::MissingField(name.to_string()))
}

/// Parse one annotation file with lenient defaults, discarding warnings.
pub fn parse_agar(json_text: &str) -> Result<SampleAnnotation> {
    parse_agar_with(json_text, &ParseOptions::default()).map(|p| p.sample)
}

/// Parse one annotation file.
pub fn parse_agar_with(json_text: &str, opts: &ParseOptions) -> Result<Parsed> {
    let raw: RawSample = serde_json::from_str(json_text)?;
    let strict = opts.strictness == Strictness::Strict;

    let sample_id = require(raw.sample_id, "sample_id")?;
    let background_name = require(raw.background, "background")?;
    let background = BackgroundCategory::from_name(&background_name)?;
    let classes = require(raw.classes, "classes")?;
    let colonies_number = require(raw.colonies_number, "colonies_number")?;
    if colonies_number < -1 {
        return Err(Error::InvalidAnnotation(format!(
            "sample {sample_id}: colonies_number {colonies_number} below -1"
        )));
    }

    let mut unknown_keys: Vec<String> = raw.extra.keys().cloned().collect();
    let mut labels = Vec::new();
    for (i, raw_label) in require(raw.labels, "labels")?.into_iter().enumerate() {
        let ctx = |name: &str| format!("labels[{i}].{name}");
        let id = require(raw_label.id, &ctx("id"))?;
        let class = opts
            .aliases
            .resolve(&require(raw_label.class, &ctx("class"))?)?;
        let bbox = BBox::checked(
            require(raw_label.x, &ctx("x"))?,
            require(raw_label.y, &ctx("y"))?,
            require(raw_label.width, &ctx("width"))?,
            require(raw_label.height, &ctx("height"))?,
        )?;
        unknown_keys.extend(raw_label.extra.keys().map(|k| format!("labels[{i}].{k}")));
        labels.push(Label {
            id,
            class,
            bbox,
            extra: raw_label.extra,
        });
    }

    if strict && !unknown_keys.is_empty() {
        return Err(Error::UnknownFields(unknown_keys.join(", ")));
    }

    let mut warnings = Vec::new();

    let mut ids: Vec<i64> = labels.iter().map(|l| l.id).collect();
    ids.sort_unstable();
    for pair in ids.windows(2) {
        if pair[0] == pair[1] {
            let w = ParseWarning::DuplicateLabelId {
                sample_id,
                id: pair[0],
            };
            if strict {
                return Err(Error::InvalidAnnotation(w.to_string()));
            }
            warnings.push(w);
        }
    }

    let sample = SampleAnnotation {
        sample_id,
        background,
        classes,
        colonies_number,
        labels,
        extra: raw.extra,
    };

    let microbe_count = sample.microbe_label_count();
    if sample.colonies_number >= 0 && sample.colonies_number as usize != microbe_count {
        if strict {
            return Err(Error::CountMismatch {
                sample_id,
                declared: sample.colonies_number,
                found: microbe_count,
            });
        }
        warnings.push(ParseWarning::CountMismatch {
            sample_id,
            declared: sample.colonies_number,
            found: microbe_count,
        });
    }

    Ok(Parsed { sample, warnings })
}

/// Emit a pixel coordinate as an integer when it is integral, so files
/// keep the ground-truth shape.
fn ser_px<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.fract() == 0.0 && v.abs() <= 2f64.powi(53) {
        s.serialize_i64(*v as i64)
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Serialize)]
struct LabelOut<'a> {
    id: i64,
    class: &'static str,
    #[serde(serialize_with = "ser_px")]
    height: f64,
    #[serde(serialize_with = "ser_px")]
    width: f64,
    #[serde(serialize_with = "ser_px")]
    x: f64,
    #[serde(serialize_with = "ser_px")]
    y: f64,
    #[serde(flatten)]
    extra: &'a Map<String, Value>,
}

#[derive(Serialize)]
struct SampleOut<'a> {
    background: &'static str,
    classes: &'a [String],
    colonies_number: i64,
    labels: Vec<LabelOut<'a>>,
    sample_id: i64,
    #[serde(flatten)]
    extra: &'a Map<String, Value>,
}

/// Serialize a sample back to annotation JSON with canonical key order and
/// canonical class spellings. `parse_agar(write_agar(s))` returns a sample
/// structurally equal to `s`.
pub fn write_agar(sample: &SampleAnnotation) -> String {
    let out = SampleOut {
        background: sample.background.canonical_name(),
        classes: &sample.classes,
        colonies_number: sample.colonies_number,
        labels: sample
            .labels
            .iter()
            .map(|l| LabelOut {
                id: l.id,
                class: l.class.canonical_name(),
                height: l.bbox.h,
                width: l.bbox.w,
                x: l.bbox.x,
                y: l.bbox.y,
                extra: &l.extra,
            })
            .collect(),
        sample_id: sample.sample_id,
        extra: &sample.extra,
    };
    serde_json::to_string_pretty(&out).expect("annotation serialization cannot fail")
}
