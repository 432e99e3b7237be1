//! Dataset statistics: subgroup breakdowns, instance counts, box size
//! buckets, spatial heatmaps, and per-image count histograms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    BackgroundCategory, ColonyClass, CountabilityStatus, Label, SampleAnnotation, ALL_BACKGROUNDS,
    ALL_CLASSES,
};
use crate::tiler::ImageExtent;

/// Boxes bucketed by the square root of their area. The middle interval is
/// closed on both sides: a box at exactly 128 or 512 px falls inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SizeBuckets {
    pub below_128: u64,
    pub between_128_512: u64,
    pub above_512: u64,
}

impl SizeBuckets {
    pub fn total(&self) -> u64 {
        self.below_128 + self.between_128_512 + self.above_512
    }
}

/// Bucket microbe boxes by sqrt(w*h); defects and contamination are
/// excluded.
pub fn size_buckets(labels: &[Label]) -> SizeBuckets {
    let mut out = SizeBuckets::default();
    for l in labels {
        if !l.class.is_microbe() {
            continue;
        }
        let s = l.bbox.sqrt_area();
        if s < 128.0 {
            out.below_128 += 1;
        } else if s <= 512.0 {
            out.between_128_512 += 1;
        } else {
            out.above_512 += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StatusBreakdown {
    pub empty: u64,
    pub countable: u64,
    pub uncountable: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_samples: u64,
    pub per_background: BTreeMap<BackgroundCategory, StatusBreakdown>,
    pub per_class_instances: BTreeMap<ColonyClass, u64>,
    /// Histogram of colonies_number over countable samples, bucket width 10,
    /// keyed by bucket start.
    pub count_histogram: BTreeMap<u32, u64>,
    /// Annotated colonies: microbe labels only. Defect and contamination
    /// labels appear in `per_class_instances` but are not colonies.
    pub total_annotations: u64,
}

/// Aggregate the whole-dataset summary.
pub fn summarize(samples: &[SampleAnnotation]) -> DatasetSummary {
    let mut per_background: BTreeMap<BackgroundCategory, StatusBreakdown> = ALL_BACKGROUNDS
        .iter()
        .map(|&b| (b, StatusBreakdown::default()))
        .collect();
    let mut per_class_instances: BTreeMap<ColonyClass, u64> =
        ALL_CLASSES.iter().map(|&c| (c, 0)).collect();
    let mut total_annotations = 0u64;

    for s in samples {
        let slot = per_background.get_mut(&s.background).unwrap();
        match s.status() {
            CountabilityStatus::Empty => slot.empty += 1,
            CountabilityStatus::Countable => slot.countable += 1,
            CountabilityStatus::Uncountable => slot.uncountable += 1,
        }
        for l in &s.labels {
            *per_class_instances.get_mut(&l.class).unwrap() += 1;
            if l.class.is_microbe() {
                total_annotations += 1;
            }
        }
    }

    DatasetSummary {
        n_samples: samples.len() as u64,
        per_background,
        per_class_instances,
        count_histogram: count_histogram(samples, 10)
            .expect("bucket width 10 is valid")
            .buckets,
        total_annotations,
    }
}

/// How boxes deposit mass into heatmap cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapAccumulation {
    /// One unit at the box center.
    #[default]
    Center,
    /// Box area spread over the cells it overlaps.
    Area,
}

/// Spatial occupancy of one class over the plate, normalized so the hottest
/// cell is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// Row-major `resolution x resolution` grid, values in [0, 1].
    pub grid: Vec<Vec<f64>>,
    pub resolution: u32,
    pub class: ColonyClass,
    /// Peak raw cell value before normalization; 0 when the class is absent.
    pub normalization_max: f64,
}

/// Accumulate all boxes of `class` over a square grid.
///
/// Box coordinates are normalized by `plate_extent` per sample, so plates
/// of different sizes overlay. A class with no instances yields a zero grid
/// with `normalization_max` 0.
#[allow(clippy::needless_range_loop)]
pub fn heatmap(
    labels_by_sample: &[(ImageExtent, Vec<Label>)],
    class: ColonyClass,
    resolution: u32,
    mode: HeatmapAccumulation,
) -> Result<Heatmap> {
    if resolution == 0 {
        return Err(Error::InvalidConfig(
            "heatmap resolution must be >= 1".into(),
        ));
    }
    let res = resolution as usize;
    let mut grid = vec![vec![0.0f64; res]; res];

    let cell_of = |coord: f64, extent: f64| -> usize {
        let c = (coord / extent * resolution as f64).floor();
        (c.max(0.0) as usize).min(res - 1)
    };

    for (extent, labels) in labels_by_sample {
        let (w, h) = (extent.width as f64, extent.height as f64);
        for l in labels {
            if l.class != class {
                continue;
            }
            match mode {
                HeatmapAccumulation::Center => {
                    let (cx, cy) = l.bbox.center();
                    grid[cell_of(cy, h)][cell_of(cx, w)] += 1.0;
                }
                HeatmapAccumulation::Area => {
                    let x_lo = cell_of(l.bbox.x, w);
                    let x_hi = cell_of(l.bbox.right(), w);
                    let y_lo = cell_of(l.bbox.y, h);
                    let y_hi = cell_of(l.bbox.bottom(), h);
                    for gy in y_lo..=y_hi {
                        for gx in x_lo..=x_hi {
                            let cell = crate::geometry::BBox::new(
                                gx as f64 * w / resolution as f64,
                                gy as f64 * h / resolution as f64,
                                w / resolution as f64,
                                h / resolution as f64,
                            );
                            if let Some(overlap) = l.bbox.intersection(&cell) {
                                grid[gy][gx] += overlap.area();
                            }
                        }
                    }
                }
            }
        }
    }

    let max = grid
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0f64, |a, &b| a.max(b));
    if max > 0.0 {
        for row in &mut grid {
            for v in row {
                *v /= max;
            }
        }
    }

    Ok(Heatmap {
        grid,
        resolution,
        class,
        normalization_max: max,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountHistogram {
    pub bucket_width: u32,
    /// Keyed by bucket start (0, width, 2*width, ...); absent buckets are
    /// empty.
    pub buckets: BTreeMap<u32, u64>,
    pub n_countable: u64,
    pub q1: Option<f64>,
    pub median: Option<f64>,
    pub q3: Option<f64>,
}

fn median_of(sorted: &[u32]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
    }
}

/// Quartiles by the inclusive median-of-halves rule: each half contains the
/// middle element when the sample size is odd.
fn quartiles(sorted: &[u32]) -> (f64, f64, f64) {
    let n = sorted.len();
    let lower = &sorted[..n.div_ceil(2)];
    let upper = &sorted[n / 2..];
    (median_of(lower), median_of(sorted), median_of(upper))
}

/// Histogram of colonies_number over countable samples, plus quartiles.
pub fn count_histogram(samples: &[SampleAnnotation], bucket_width: u32) -> Result<CountHistogram> {
    if bucket_width == 0 {
        return Err(Error::InvalidConfig("bucket width must be >= 1".into()));
    }
    let mut counts: Vec<u32> = samples
        .iter()
        .filter(|s| s.status() == CountabilityStatus::Countable)
        .map(|s| s.colonies_number as u32)
        .collect();
    counts.sort_unstable();

    let mut buckets: BTreeMap<u32, u64> = BTreeMap::new();
    for &c in &counts {
        *buckets.entry(c / bucket_width * bucket_width).or_default() += 1;
    }

    let (q1, median, q3) = if counts.is_empty() {
        (None, None, None)
    } else {
        let (a, b, c) = quartiles(&counts);
        (Some(a), Some(b), Some(c))
    };

    Ok(CountHistogram {
        bucket_width,
        buckets,
        n_countable: counts.len() as u64,
        q1,
        median,
        q3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::model::ColonyClass::{Defect, EColi, SAureus};

    fn label(class: ColonyClass, side: f64) -> Label {
        Label::new(0, class, BBox::new(0.0, 0.0, side, side))
    }

    fn sample(
        id: i64,
        background: BackgroundCategory,
        colonies_number: i64,
        labels: Vec<Label>,
    ) -> SampleAnnotation {
        SampleAnnotation {
            sample_id: id,
            background,
            classes: vec![],
            colonies_number,
            labels,
            extra: Default::default(),
        }
    }

    #[test]
    fn buckets_by_sqrt_area_with_closed_middle() {
        let labels = vec![
            label(EColi, 100.0),
            label(EColi, 200.0),
            label(EColi, 600.0),
            label(EColi, 128.0),  // boundary: middle bucket
            label(EColi, 512.0),  // boundary: middle bucket
            label(Defect, 600.0), // excluded
        ];
        let b = size_buckets(&labels);
        assert_eq!(
            b,
            SizeBuckets {
                below_128: 1,
                between_128_512: 3,
                above_512: 1
            }
        );
        assert_eq!(b.total(), 5);
    }

    #[test]
    fn summary_aggregates_backgrounds_and_classes() {
        let mut twelve: Vec<Label> = (0..12)
            .map(|i| Label::new(i, EColi, BBox::new(30.0 * i as f64, 0.0, 10.0, 10.0)))
            .collect();
        twelve.push(Label::new(12, Defect, BBox::new(500.0, 0.0, 10.0, 10.0)));
        let samples = vec![
            sample(1, BackgroundCategory::Dark, 12, twelve),
            sample(2, BackgroundCategory::Dark, 0, vec![]),
            sample(3, BackgroundCategory::Bright, -1, vec![]),
        ];
        let s = summarize(&samples);
        assert_eq!(s.n_samples, 3);
        let dark = &s.per_background[&BackgroundCategory::Dark];
        assert_eq!((dark.countable, dark.empty, dark.uncountable), (1, 1, 0));
        assert_eq!(s.per_background[&BackgroundCategory::Bright].uncountable, 1);
        assert_eq!(s.per_class_instances[&EColi], 12);
        assert_eq!(s.per_class_instances[&Defect], 1);
        // annotated colonies: the defect label does not count
        assert_eq!(s.total_annotations, 12);
        assert_eq!(s.count_histogram[&10], 1);
    }

    #[test]
    fn summary_of_empty_dataset_is_all_zeros() {
        let s = summarize(&[]);
        assert_eq!(s.total_annotations, 0);
        assert!(s.count_histogram.is_empty());
        assert!(s.per_class_instances.values().all(|&v| v == 0));
    }

    #[test]
    fn heatmap_single_centered_box() {
        let extent = ImageExtent::new(1000, 1000).unwrap();
        let labels = vec![Label::new(0, EColi, BBox::new(495.0, 495.0, 10.0, 10.0))];
        let m = heatmap(&[(extent, labels)], EColi, 8, HeatmapAccumulation::Center).unwrap();
        assert_eq!(m.normalization_max, 1.0);
        assert_eq!(m.grid[4][4], 1.0);
        let total: f64 = m.grid.iter().flatten().sum();
        assert_eq!(total, 1.0);
    }

    #[test]
    fn heatmap_two_boxes_same_cell() {
        let extent = ImageExtent::new(800, 800).unwrap();
        let labels = vec![
            Label::new(0, EColi, BBox::new(10.0, 10.0, 10.0, 10.0)),
            Label::new(1, EColi, BBox::new(30.0, 30.0, 10.0, 10.0)),
            Label::new(2, EColi, BBox::new(700.0, 700.0, 10.0, 10.0)),
        ];
        let m = heatmap(&[(extent, labels)], EColi, 8, HeatmapAccumulation::Center).unwrap();
        assert_eq!(m.grid[0][0], 1.0);
        assert_eq!(m.grid[7][7], 0.5);
        assert_eq!(m.normalization_max, 2.0);
    }

    #[test]
    fn heatmap_absent_class_is_zero_grid() {
        let extent = ImageExtent::new(800, 800).unwrap();
        let labels = vec![Label::new(0, EColi, BBox::new(10.0, 10.0, 10.0, 10.0))];
        let m = heatmap(&[(extent, labels)], SAureus, 4, HeatmapAccumulation::Center).unwrap();
        assert_eq!(m.normalization_max, 0.0);
        assert!(m.grid.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn heatmap_area_mode_peaks_at_one() {
        let extent = ImageExtent::new(100, 100).unwrap();
        let labels = vec![Label::new(0, EColi, BBox::new(0.0, 0.0, 60.0, 60.0))];
        let m = heatmap(&[(extent, labels)], EColi, 2, HeatmapAccumulation::Area).unwrap();
        assert_eq!(m.grid[0][0], 1.0); // 50x50 of the box
        assert!((m.grid[0][1] - 500.0 / 2500.0).abs() < 1e-12);
        assert!((m.grid[1][1] - 100.0 / 2500.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_two_point_quartiles() {
        let mk = |id: i64, n: i64| {
            let labels = (0..n)
                .map(|i| Label::new(i, EColi, BBox::new(20.0 * i as f64, 0.0, 5.0, 5.0)))
                .collect();
            sample(id, BackgroundCategory::Dark, n, labels)
        };
        let h = count_histogram(&[mk(1, 4), mk(2, 38)], 10).unwrap();
        assert_eq!(h.q1, Some(4.0));
        assert_eq!(h.q3, Some(38.0));
        assert_eq!(h.buckets[&0], 1);
        assert_eq!(h.buckets[&30], 1);
    }

    #[test]
    fn histogram_ignores_empty_and_uncountable() {
        let samples = vec![
            sample(1, BackgroundCategory::Dark, 0, vec![]),
            sample(2, BackgroundCategory::Dark, -1, vec![]),
        ];
        let h = count_histogram(&samples, 10).unwrap();
        assert_eq!(h.n_countable, 0);
        assert!(h.buckets.is_empty());
        assert_eq!(h.q1, None);
    }

    #[test]
    fn histogram_all_zero_counts_single_bucket() {
        // colonies_number 0 with a microbe label present is Countable by the
        // taxonomy, so a count-zero histogram is representable
        let s = sample(
            1,
            BackgroundCategory::Dark,
            0,
            vec![Label::new(0, EColi, BBox::new(0.0, 0.0, 5.0, 5.0))],
        );
        let h = count_histogram(&[s.clone(), s], 10).unwrap();
        assert_eq!(h.buckets.len(), 1);
        assert_eq!(h.buckets[&0], 2);
    }

    #[test]
    fn quartile_rule_inclusive_halves() {
        assert_eq!(quartiles(&[1, 2, 3, 4]), (1.5, 2.5, 3.5));
        assert_eq!(quartiles(&[1, 2, 3, 4, 5]), (2.0, 3.0, 4.0));
        assert_eq!(quartiles(&[7]), (7.0, 7.0, 7.0));
    }
}
