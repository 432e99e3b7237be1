//! Domain types: colony classes, sample annotations, detections.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;

/// The seven annotation classes: five microbe species plus two non-colony
/// classes (agar surface defects and environmental contamination) that are
/// excluded from colony counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ColonyClass {
    SAureus,
    BSubtilis,
    PAeruginosa,
    EColi,
    CAlbicans,
    Defect,
    Contamination,
}

/// All seven classes, in canonical (category id) order.
pub const ALL_CLASSES: [ColonyClass; 7] = [
    ColonyClass::SAureus,
    ColonyClass::BSubtilis,
    ColonyClass::PAeruginosa,
    ColonyClass::EColi,
    ColonyClass::CAlbicans,
    ColonyClass::Defect,
    ColonyClass::Contamination,
];

/// The five microbe species; the `K = 5` classes counting metrics run over.
pub const MICROBE_CLASSES: [ColonyClass; 5] = [
    ColonyClass::SAureus,
    ColonyClass::BSubtilis,
    ColonyClass::PAeruginosa,
    ColonyClass::EColi,
    ColonyClass::CAlbicans,
];

impl ColonyClass {
    /// True for actual microbes; false for Defect/Contamination.
    pub fn is_microbe(self) -> bool {
        !matches!(self, ColonyClass::Defect | ColonyClass::Contamination)
    }

    /// Canonical name emitted on write.
    pub fn canonical_name(self) -> &'static str {
        match self {
            ColonyClass::SAureus => "S.aureus",
            ColonyClass::BSubtilis => "B.subtilis",
            ColonyClass::PAeruginosa => "P.aeruginosa",
            ColonyClass::EColi => "E.coli",
            ColonyClass::CAlbicans => "C.albicans",
            ColonyClass::Defect => "Defect",
            ColonyClass::Contamination => "Contamination",
        }
    }
}

impl fmt::Display for ColonyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

/// Normalization applied to class and background names before lookup:
/// case folding plus removal of separators, so "S. aureus", "s_aureus" and
/// "S.aureus" all resolve to the same key.
fn normalize_name(raw: &str) -> String {
    raw.trim()
        .chars()
        .filter(|c| !matches!(c, ' ' | '.' | '-' | '_'))
        .flat_map(char::to_lowercase)
        .collect()
}

/// Class-name lookup table. The annotation files in the wild are not
/// consistent about spelling, so the table is configurable; the default
/// covers abbreviated and full species names.
#[derive(Debug, Clone)]
pub struct AliasTable {
    map: HashMap<String, ColonyClass>,
}

impl Default for AliasTable {
    fn default() -> Self {
        let mut t = Self {
            map: HashMap::new(),
        };
        for class in ALL_CLASSES {
            t.insert(class.canonical_name(), class);
        }
        t.insert("Staphylococcus aureus", ColonyClass::SAureus);
        t.insert("Bacillus subtilis", ColonyClass::BSubtilis);
        t.insert("Pseudomonas aeruginosa", ColonyClass::PAeruginosa);
        t.insert("Escherichia coli", ColonyClass::EColi);
        t.insert("Candida albicans", ColonyClass::CAlbicans);
        t.insert("defects", ColonyClass::Defect);
        t.insert("contaminations", ColonyClass::Contamination);
        t
    }
}

impl AliasTable {
    /// Register an extra spelling for a class.
    pub fn insert(&mut self, alias: &str, class: ColonyClass) {
        self.map.insert(normalize_name(alias), class);
    }

    pub fn resolve(&self, raw: &str) -> Result<ColonyClass> {
        self.map
            .get(&normalize_name(raw))
            .copied()
            .ok_or_else(|| Error::UnknownClass(raw.to_string()))
    }
}

impl Serialize for ColonyClass {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.canonical_name())
    }
}

impl<'de> Deserialize<'de> for ColonyClass {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        AliasTable::default()
            .resolve(&raw)
            .map_err(serde::de::Error::custom)
    }
}

/// Image acquisition subgroup a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BackgroundCategory {
    Bright,
    Dark,
    Vague,
    LowerResolution,
}

pub const ALL_BACKGROUNDS: [BackgroundCategory; 4] = [
    BackgroundCategory::Bright,
    BackgroundCategory::Dark,
    BackgroundCategory::Vague,
    BackgroundCategory::LowerResolution,
];

impl BackgroundCategory {
    pub fn canonical_name(self) -> &'static str {
        match self {
            BackgroundCategory::Bright => "bright",
            BackgroundCategory::Dark => "dark",
            BackgroundCategory::Vague => "vague",
            BackgroundCategory::LowerResolution => "lower-resolution",
        }
    }

    pub fn from_name(raw: &str) -> Result<Self> {
        match normalize_name(raw).as_str() {
            "bright" => Ok(BackgroundCategory::Bright),
            "dark" => Ok(BackgroundCategory::Dark),
            "vague" => Ok(BackgroundCategory::Vague),
            "lowerresolution" | "lowerres" => Ok(BackgroundCategory::LowerResolution),
            _ => Err(Error::UnknownBackground(raw.to_string())),
        }
    }
}

impl fmt::Display for BackgroundCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical_name())
    }
}

impl Serialize for BackgroundCategory {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.canonical_name())
    }
}

impl<'de> Deserialize<'de> for BackgroundCategory {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        Self::from_name(&raw).map_err(serde::de::Error::custom)
    }
}

/// One annotated bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct Label {
    /// Annotation id, unique within a sample.
    pub id: i64,
    pub class: ColonyClass,
    /// Box in whole-image pixel coordinates. Stored as reals even though
    /// ground truth files carry integers, so one geometry path serves both
    /// annotations and predictions.
    pub bbox: BBox<f64>,
    /// Unknown label fields, preserved for round-tripping.
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Label {
    pub fn new(id: i64, class: ColonyClass, bbox: BBox<f64>) -> Self {
        Self {
            id,
            class,
            bbox,
            extra: Default::default(),
        }
    }
}

/// One Petri-dish photo's annotation record.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleAnnotation {
    pub sample_id: i64,
    pub background: BackgroundCategory,
    /// Names of the species inoculated on the dish, as written in the file.
    /// Not necessarily a superset of the label classes (inoculated microbes
    /// sometimes fail to grow), so no cross-check is enforced.
    pub classes: Vec<String>,
    /// Total number of colonies excluding defects and contamination;
    /// -1 marks an uncountable sample.
    pub colonies_number: i64,
    pub labels: Vec<Label>,
    /// Unknown top-level fields, preserved for round-tripping.
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// Sample taxonomy derived from the count and labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountabilityStatus {
    Empty,
    Countable,
    Uncountable,
}

impl SampleAnnotation {
    /// Number of labels whose class is a microbe (defects and
    /// contamination excluded).
    pub fn microbe_label_count(&self) -> usize {
        self.labels.iter().filter(|l| l.class.is_microbe()).count()
    }

    pub fn status(&self) -> CountabilityStatus {
        if self.colonies_number == -1 {
            CountabilityStatus::Uncountable
        } else if self.colonies_number == 0 && self.microbe_label_count() == 0 {
            CountabilityStatus::Empty
        } else {
            CountabilityStatus::Countable
        }
    }
}

/// A predicted box with class label and confidence score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection<S = f64> {
    pub bbox: BBox<S>,
    pub class: ColonyClass,
    pub score: S,
}

impl<S: Scalar> Detection<S> {
    pub fn new(bbox: BBox<S>, class: ColonyClass, score: S) -> Self {
        Self { bbox, class, score }
    }

    /// Validating constructor: score must lie in [0, 1].
    pub fn checked(bbox: BBox<S>, class: ColonyClass, score: S) -> Result<Self> {
        if !(score >= S::zero() && score <= S::one()) {
            return Err(Error::InvalidConfig(format!(
                "detection score {score} outside [0, 1]"
            )));
        }
        Ok(Self { bbox, class, score })
    }
}
