//! COCO-style export of annotation sets.
//!
//! One document holds every sample: `images`, `annotations` with
//! `[x, y, w, h]` boxes and `category_id`s, and the seven `categories`.
//! Each image record additionally carries the acquisition `background`
//! category, which plain COCO has no slot for.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SampleAnnotation, ALL_CLASSES};

#[derive(Debug, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: i64,
    pub file_name: String,
    /// Extra key: acquisition background category of the plate photo.
    pub background: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: i64,
    pub image_id: i64,
    pub category_id: i64,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: i64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: i64,
    pub name: String,
    pub supercategory: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CocoDocument {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

fn category_id(class: crate::model::ColonyClass) -> i64 {
    ALL_CLASSES.iter().position(|&c| c == class).unwrap() as i64 + 1
}

fn categories() -> Vec<CocoCategory> {
    ALL_CLASSES
        .iter()
        .map(|&c| CocoCategory {
            id: category_id(c),
            name: c.canonical_name().to_string(),
            supercategory: if c.is_microbe() {
                "microbe"
            } else {
                "artifact"
            }
            .to_string(),
        })
        .collect()
}

/// Build the COCO document for a set of samples.
pub fn to_coco_document(samples: &[SampleAnnotation]) -> Result<CocoDocument> {
    let mut seen = std::collections::HashSet::new();
    for s in samples {
        if !seen.insert(s.sample_id) {
            return Err(Error::DuplicateSampleId(s.sample_id));
        }
    }

    let images = samples
        .iter()
        .map(|s| CocoImage {
            id: s.sample_id,
            file_name: format!("{}.jpg", s.sample_id),
            background: s.background.canonical_name().to_string(),
        })
        .collect();

    let mut annotations = Vec::new();
    let mut next_id = 1;
    for s in samples {
        for l in &s.labels {
            annotations.push(CocoAnnotation {
                id: next_id,
                image_id: s.sample_id,
                category_id: category_id(l.class),
                bbox: [l.bbox.x, l.bbox.y, l.bbox.w, l.bbox.h],
                area: l.bbox.area(),
                iscrowd: 0,
            });
            next_id += 1;
        }
    }

    Ok(CocoDocument {
        images,
        annotations,
        categories: categories(),
    })
}

/// Serialize a set of samples to COCO JSON.
pub fn to_coco(samples: &[SampleAnnotation]) -> Result<String> {
    let doc = to_coco_document(samples)?;
    Ok(serde_json::to_string_pretty(&doc).expect("COCO serialization cannot fail"))
}

/// Structural check of a COCO document: referenced ids resolve, ids are
/// unique, boxes have positive extent, and the seven categories are present.
pub fn validate_coco(json_text: &str) -> Result<CocoDocument> {
    let doc: CocoDocument = serde_json::from_str(json_text)?;

    let mut image_ids = std::collections::HashSet::new();
    for img in &doc.images {
        if !image_ids.insert(img.id) {
            return Err(Error::InvalidAnnotation(format!(
                "duplicate image id {} in COCO document",
                img.id
            )));
        }
    }

    let category_ids: std::collections::HashSet<i64> =
        doc.categories.iter().map(|c| c.id).collect();
    if category_ids.len() != doc.categories.len() {
        return Err(Error::InvalidAnnotation(
            "duplicate category ids in COCO document".into(),
        ));
    }
    for class in ALL_CLASSES {
        if !doc
            .categories
            .iter()
            .any(|c| c.name == class.canonical_name())
        {
            return Err(Error::InvalidAnnotation(format!(
                "COCO document lacks category {}",
                class.canonical_name()
            )));
        }
    }

    let mut ann_ids = std::collections::HashSet::new();
    for ann in &doc.annotations {
        if !ann_ids.insert(ann.id) {
            return Err(Error::InvalidAnnotation(format!(
                "duplicate annotation id {}",
                ann.id
            )));
        }
        if !image_ids.contains(&ann.image_id) {
            return Err(Error::InvalidAnnotation(format!(
                "annotation {} references missing image {}",
                ann.id, ann.image_id
            )));
        }
        if !category_ids.contains(&ann.category_id) {
            return Err(Error::InvalidAnnotation(format!(
                "annotation {} references missing category {}",
                ann.id, ann.category_id
            )));
        }
        let [_, _, w, h] = ann.bbox;
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::InvalidAnnotation(format!(
                "annotation {} has non-positive box extent",
                ann.id
            )));
        }
    }

    Ok(doc)
}
