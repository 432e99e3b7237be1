//! Detection interchange records: one JSON object per line.
//!
//! `{"sample_id": 7, "window_index": 3, "class": "E.coli", "score": 0.93,
//!   "x": 120.5, "y": 80.0, "w": 31.0, "h": 29.5}`
//!
//! `window_index` is present for window-local detections (it refers into
//! the sample's tiling-plan manifest) and absent for whole-image ones.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{ColonyClass, Detection};
use crate::postprocess::WindowDetections;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub sample_id: i64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub window_index: Option<usize>,
    pub class: ColonyClass,
    pub score: f64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl DetectionRecord {
    pub fn from_detection(sample_id: i64, window_index: Option<usize>, det: &Detection) -> Self {
        Self {
            sample_id,
            window_index,
            class: det.class,
            score: det.score,
            x: det.bbox.x,
            y: det.bbox.y,
            w: det.bbox.w,
            h: det.bbox.h,
        }
    }

    pub fn detection(&self) -> Result<Detection> {
        Detection::checked(
            BBox::checked(self.x, self.y, self.w, self.h)?,
            self.class,
            self.score,
        )
    }
}

/// Parse a JSONL document; blank lines are skipped.
pub fn read_jsonl(text: &str) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

pub fn write_jsonl(records: &[DetectionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serialization cannot fail"));
        out.push('\n');
    }
    out
}

/// Group whole-image records by sample. Records carrying a window index do
/// not belong in a whole-image file and are rejected.
pub fn whole_image_by_sample(records: &[DetectionRecord]) -> Result<BTreeMap<i64, Vec<Detection>>> {
    let mut out: BTreeMap<i64, Vec<Detection>> = BTreeMap::new();
    for r in records {
        if r.window_index.is_some() {
            return Err(Error::InvalidAnnotation(format!(
                "sample {}: window-local record in a whole-image detection file",
                r.sample_id
            )));
        }
        out.entry(r.sample_id).or_default().push(r.detection()?);
    }
    Ok(out)
}

/// Group window-local records by sample, then by window index. Every record
/// must carry a window index.
pub fn windowed_by_sample(
    records: &[DetectionRecord],
) -> Result<BTreeMap<i64, Vec<WindowDetections>>> {
    let mut per_sample: BTreeMap<i64, BTreeMap<usize, Vec<Detection>>> = BTreeMap::new();
    for r in records {
        let idx = r.window_index.ok_or_else(|| {
            Error::InvalidAnnotation(format!(
                "sample {}: record lacks window_index in a window-local detection file",
                r.sample_id
            ))
        })?;
        per_sample
            .entry(r.sample_id)
            .or_default()
            .entry(idx)
            .or_default()
            .push(r.detection()?);
    }
    Ok(per_sample
        .into_iter()
        .map(|(sample_id, windows)| {
            (
                sample_id,
                windows
                    .into_iter()
                    .map(|(window_index, detections)| WindowDetections {
                        window_index,
                        detections,
                    })
                    .collect(),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ColonyClass::EColi;

    #[test]
    fn jsonl_round_trip() {
        let records = vec![
            DetectionRecord {
                sample_id: 1,
                window_index: Some(0),
                class: EColi,
                score: 0.9,
                x: 1.5,
                y: 2.0,
                w: 10.0,
                h: 11.0,
            },
            DetectionRecord {
                sample_id: 2,
                window_index: None,
                class: ColonyClass::Defect,
                score: 0.4,
                x: 0.0,
                y: 0.0,
                w: 3.0,
                h: 3.0,
            },
        ];
        let text = write_jsonl(&records);
        assert_eq!(text.lines().count(), 2);
        assert!(!text.lines().nth(1).unwrap().contains("window_index"));
        assert_eq!(read_jsonl(&text).unwrap(), records);
    }

    #[test]
    fn grouping_enforces_window_index_presence() {
        let with_idx = DetectionRecord {
            sample_id: 1,
            window_index: Some(0),
            class: EColi,
            score: 0.9,
            x: 0.0,
            y: 0.0,
            w: 5.0,
            h: 5.0,
        };
        let without_idx = DetectionRecord {
            window_index: None,
            ..with_idx.clone()
        };
        assert!(whole_image_by_sample(std::slice::from_ref(&with_idx)).is_err());
        assert!(whole_image_by_sample(std::slice::from_ref(&without_idx)).is_ok());
        assert!(windowed_by_sample(&[with_idx]).is_ok());
        assert!(windowed_by_sample(&[without_idx]).is_err());
    }

    #[test]
    fn invalid_geometry_is_rejected_on_ingest() {
        let r = DetectionRecord {
            sample_id: 1,
            window_index: None,
            class: EColi,
            score: 0.9,
            x: 0.0,
            y: 0.0,
            w: 0.0,
            h: 5.0,
        };
        assert!(whole_image_by_sample(&[r]).is_err());
    }
}
