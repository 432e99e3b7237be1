//! Property tests for the crate's structural invariants.

use std::collections::BTreeMap;

use proptest::prelude::*;

use plate_core::agar::{parse_agar, write_agar};
use plate_core::geometry::{iou, transform_box, BBox};
use plate_core::metrics::{self, match_detections, match_outcome, pr_curve, GroundTruth};
use plate_core::model::{
    BackgroundCategory, ColonyClass, Detection, Label, SampleAnnotation, ALL_BACKGROUNDS,
    ALL_CLASSES, MICROBE_CLASSES,
};
use plate_core::postprocess::{
    apply_filters, area_priority_soft_nms, predict_counts, ClassCounts, FilterConfig, NmsConfig,
};
use plate_core::stats;
use plate_core::synth::oracle_iou;
use plate_core::tiler::{self, ImageExtent, TrainConfig};

fn arb_bbox() -> impl Strategy<Value = BBox<f64>> {
    (
        -50.0..500.0f64,
        -50.0..500.0f64,
        0.5..120.0f64,
        0.5..120.0f64,
    )
        .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
}

/// Two boxes likely to overlap: the second is the first shifted by less
/// than its extent.
fn arb_bbox_pair() -> impl Strategy<Value = (BBox<f64>, BBox<f64>)> {
    (arb_bbox(), -1.5..1.5f64, -1.5..1.5f64, 0.3..3.0f64).prop_map(|(a, fx, fy, fs)| {
        let b = BBox::new(a.x + fx * a.w, a.y + fy * a.h, a.w * fs, a.h * fs);
        (a, b)
    })
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded((a, b) in arb_bbox_pair()) {
        let ab = iou(&a, &b);
        let ba = iou(&b, &a);
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn iou_identity_exact(a in arb_bbox()) {
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_zero_iff_empty_intersection((a, b) in arb_bbox_pair()) {
        let disjoint = a.intersection(&b).is_none();
        prop_assert_eq!(iou(&a, &b) == 0.0, disjoint);
    }

    #[test]
    fn iou_agrees_with_raster_oracle((a, b) in arb_bbox_pair()) {
        // detector output carries about two decimals of pixel precision;
        // on that grid the 0.01-px raster count is exact
        let q = |v: f64| (v * 100.0).round() / 100.0;
        let qbox = |r: &BBox<f64>| BBox::new(q(r.x), q(r.y), q(r.w).max(0.01), q(r.h).max(0.01));
        let (a, b) = (qbox(&a), qbox(&b));
        prop_assert!((iou(&a, &b) - oracle_iou(&a, &b, 0.01)).abs() <= 1e-3);
    }

    #[test]
    fn transform_round_trip(b in arb_bbox(), s in 0.05..20.0f64, ox in -300.0..300.0f64, oy in -300.0..300.0f64) {
        let fwd = transform_box(&b, s, (ox, oy)).unwrap();
        let back = transform_box(&fwd, 1.0 / s, (-ox / s, -oy / s)).unwrap();
        prop_assert!((back.x - b.x).abs() < 1e-9);
        prop_assert!((back.y - b.y).abs() < 1e-9);
        prop_assert!((back.w - b.w).abs() < 1e-9);
        prop_assert!((back.h - b.h).abs() < 1e-9);
    }
}

fn arb_class() -> impl Strategy<Value = ColonyClass> {
    prop::sample::select(ALL_CLASSES.to_vec())
}

fn arb_background() -> impl Strategy<Value = BackgroundCategory> {
    prop::sample::select(ALL_BACKGROUNDS.to_vec())
}

fn arb_label_box() -> impl Strategy<Value = BBox<f64>> {
    // half integral (ground-truth style), half fractional
    prop_oneof![
        (0..3000i64, 0..3000i64, 1..400i64, 1..400i64)
            .prop_map(|(x, y, w, h)| BBox::new(x as f64, y as f64, w as f64, h as f64)),
        (0.0..3000.0f64, 0.0..3000.0f64, 0.5..400.0f64, 0.5..400.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h)),
    ]
}

fn arb_extra() -> impl Strategy<Value = serde_json::Map<String, serde_json::Value>> {
    prop::collection::btree_map("x_[a-z]{1,8}", "[ -~]{0,12}", 0..3).prop_map(|m| {
        m.into_iter()
            .map(|(k, v)| (k, serde_json::Value::String(v)))
            .collect()
    })
}

prop_compose! {
    fn arb_sample()(
        sample_id in 0..1_000_000i64,
        background in arb_background(),
        classes in prop::collection::vec("[ -~]{1,16}", 0..4),
        boxes in prop::collection::vec((arb_class(), arb_label_box(), arb_extra()), 0..40),
        extra in arb_extra(),
        uncountable in prop::bool::weighted(0.15),
    ) -> SampleAnnotation {
        let labels: Vec<Label> = boxes
            .into_iter()
            .enumerate()
            .map(|(i, (class, bbox, extra))| Label { id: i as i64, class, bbox, extra })
            .collect();
        let microbe = labels.iter().filter(|l| l.class.is_microbe()).count() as i64;
        let (colonies_number, labels) = if uncountable {
            (-1, vec![])
        } else {
            (microbe, labels)
        };
        SampleAnnotation { sample_id, background, classes, colonies_number, labels, extra }
    }
}

proptest! {
    #[test]
    fn parse_write_identity(sample in arb_sample()) {
        let text = write_agar(&sample);
        let parsed = parse_agar(&text).unwrap();
        prop_assert_eq!(&parsed, &sample);
        // and the serialized form is a fixed point
        prop_assert_eq!(write_agar(&parsed), text);
    }

    #[test]
    fn countability_derivation(sample in arb_sample()) {
        use plate_core::model::CountabilityStatus::*;
        match sample.status() {
            Uncountable => prop_assert_eq!(sample.colonies_number, -1),
            Empty => {
                prop_assert_eq!(sample.colonies_number, 0);
                prop_assert_eq!(sample.microbe_label_count(), 0);
            }
            Countable => prop_assert!(sample.colonies_number >= 0),
        }
    }
}

fn arb_train_boxes(extent: u32) -> impl Strategy<Value = Vec<BBox<f64>>> {
    let max_pos = (extent - 130) as f64;
    prop::collection::vec(
        (0.0..max_pos, 0.0..max_pos, 5.0..128.0f64, 5.0..128.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x.floor(), y.floor(), w.floor(), h.floor())),
        0..25,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn train_plan_covers_every_box(boxes in arb_train_boxes(2048), seed in any::<u64>()) {
        let cfg = TrainConfig { seed, empty_fraction: 0.1, ..Default::default() };
        let extent = ImageExtent::new(2048, 2048).unwrap();
        let outcome = tiler::plan_train_patches(extent, &boxes, &cfg).unwrap();
        for b in &boxes {
            prop_assert!(outcome.plan.windows.iter().any(|w| w.contains(b)));
        }
        // determinism
        let again = tiler::plan_train_patches(extent, &boxes, &cfg).unwrap();
        prop_assert_eq!(outcome.plan, again.plan);
    }

    #[test]
    fn test_plan_covers_and_overlaps_uniformly(w in 512u32..3000, h in 512u32..3000) {
        let extent = ImageExtent::new(w, h).unwrap();
        let plan = tiler::plan_test_windows_default(extent).unwrap();
        let xs: Vec<u32> = {
            let mut v: Vec<u32> = plan.windows.iter().map(|win| win.x0).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let ys: Vec<u32> = {
            let mut v: Vec<u32> = plan.windows.iter().map(|win| win.y0).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        // full coverage: first window starts at 0, last reaches the edge
        prop_assert_eq!(xs[0], 0);
        prop_assert!(xs.last().unwrap() + 512 >= w);
        prop_assert!(ys.last().unwrap() + 512 >= h);
        // uniform overlap of exactly 64 px between adjacent windows
        for pair in xs.windows(2) {
            prop_assert_eq!(pair[0] + 512 - pair[1], 64);
        }
        for pair in ys.windows(2) {
            prop_assert_eq!(pair[0] + 512 - pair[1], 64);
        }
        // pads stay below the side
        for win in &plan.windows {
            prop_assert!(win.pad_right < 512 && win.pad_bottom < 512);
        }
    }
}

fn arb_detections() -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec(
        (arb_bbox_pair(), arb_class(), 0.0..=1.0f64)
            .prop_map(|((a, _), class, score)| Detection::new(a, class, score)),
        0..25,
    )
}

proptest! {
    #[test]
    fn nms_never_increases_scores_or_count(dets in arb_detections(), hard in any::<bool>(), thr in 0.1..0.9f64) {
        let cfg = if hard { NmsConfig::hard(thr) } else { NmsConfig::soft_gaussian(thr) };
        let out = area_priority_soft_nms(&dets, &cfg);
        prop_assert!(out.len() <= dets.len());
        // every output box is an input box with a score no higher than it had
        for o in &out {
            prop_assert!(dets.iter().any(|d| d.bbox == o.bbox && d.class == o.class && o.score <= d.score));
        }
    }

    #[test]
    fn nms_is_class_independent(dets in arb_detections(), thr in 0.1..0.9f64) {
        // running per class and concatenating keeps exactly the same boxes
        let cfg = NmsConfig::hard(thr);
        let all = area_priority_soft_nms(&dets, &cfg);
        let mut per_class = Vec::new();
        for class in ALL_CLASSES {
            let subset: Vec<Detection> = dets.iter().filter(|d| d.class == class).cloned().collect();
            per_class.extend(area_priority_soft_nms(&subset, &cfg));
        }
        let key = |d: &Detection| (d.class, d.bbox.x.to_bits(), d.bbox.y.to_bits(), d.bbox.w.to_bits(), d.bbox.h.to_bits());
        let mut a: Vec<_> = all.iter().map(key).collect();
        let mut b: Vec<_> = per_class.iter().map(key).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn filters_monotone_in_prob_threshold(dets in arb_detections(), t1 in 0.0..=1.0f64, t2 in 0.0..=1.0f64) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let n_lo = apply_filters(&dets, &FilterConfig::new(lo, NmsConfig::hard(0.5))).len();
        let n_hi = apply_filters(&dets, &FilterConfig::new(hi, NmsConfig::hard(0.5))).len();
        prop_assert!(n_hi <= n_lo);
    }
}

fn arb_counts() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..300, 1..30)
}

fn arb_count_pair() -> impl Strategy<Value = (Vec<u32>, Vec<u32>)> {
    arb_counts().prop_flat_map(|t| {
        let n = t.len();
        (Just(t), prop::collection::vec(0u32..300, n))
    })
}

proptest! {
    #[test]
    fn smape_symmetric_and_bounded((t, p) in arb_count_pair()) {
        let a = metrics::smape(&t, &p).unwrap();
        let b = metrics::smape(&p, &t).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=100.0).contains(&a));
    }

    #[test]
    fn mae_scales_linearly((t, p) in arb_count_pair(), c in 0u32..5) {
        let base = metrics::mae(&t, &p).unwrap();
        let ct: Vec<u32> = t.iter().map(|&v| v * c).collect();
        let cp: Vec<u32> = p.iter().map(|&v| v * c).collect();
        let scaled = metrics::mae(&ct, &cp).unwrap();
        prop_assert!((scaled - c as f64 * base).abs() < 1e-9);
    }
}

fn counts_of(per: &[(ColonyClass, u32)]) -> ClassCounts {
    let mut dets = Vec::new();
    for &(class, n) in per {
        for i in 0..n {
            dets.push(Detection::new(
                BBox::new(20.0 * i as f64, 0.0, 5.0, 5.0),
                class,
                1.0,
            ));
        }
    }
    predict_counts(&dets)
}

proptest! {
    #[test]
    fn cmae_dominates_total_mae(
        rows in prop::collection::vec(
            (prop::collection::vec(0u32..40, 5), prop::collection::vec(0u32..40, 5)),
            1..12
        )
    ) {
        // per-class error sums are never smaller than the error of summed
        // counts (triangle inequality)
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for (t, p) in &rows {
            let t_pairs: Vec<(ColonyClass, u32)> =
                MICROBE_CLASSES.iter().copied().zip(t.iter().copied()).collect();
            let p_pairs: Vec<(ColonyClass, u32)> =
                MICROBE_CLASSES.iter().copied().zip(p.iter().copied()).collect();
            truth.push(counts_of(&t_pairs));
            pred.push(counts_of(&p_pairs));
        }
        let report = metrics::count_report(&truth, &pred).unwrap();
        prop_assert!(report.cmae + 1e-9 >= report.mae);
    }
}

// Score-ordered fixtures where each detection overlaps exactly one ground
// truth box: greedy matching is optimal by construction and must equal the
// exhaustive-assignment oracle.
proptest! {
    #[test]
    fn greedy_equals_oracle_on_separated_fixtures(
        n in 1usize..6,
        jitters in prop::collection::vec((0.0..0.35f64, 0.0..0.35f64), 6),
        thr in prop::sample::select(vec![0.3, 0.5]),
    ) {
        let mut gt = Vec::new();
        let mut dets = Vec::new();
        for i in 0..n {
            let bbox = BBox::new(200.0 * i as f64, 0.0, 20.0, 20.0);
            gt.push(GroundTruth { class: MICROBE_CLASSES[i % 5], bbox });
            let (jx, jy) = jitters[i];
            dets.push(Detection::new(
                BBox::new(bbox.x + jx * bbox.w, bbox.y + jy * bbox.h, bbox.w, bbox.h),
                MICROBE_CLASSES[i % 5],
                0.9 - 0.05 * i as f64,
            ));
        }
        let greedy = match_outcome(&gt, &dets, thr).unwrap().tp;
        let oracle = plate_core::synth::oracle_best_matching(&gt, &dets, thr).unwrap();
        prop_assert_eq!(greedy, oracle);
    }
}

// Random matching instances: greedy TP never exceeds the exhaustive
// optimum, and per-class tallies are conserved.
proptest! {
    #[test]
    fn greedy_matching_bounded_by_oracle(
        gt_boxes in prop::collection::vec((arb_bbox_pair(), arb_class()), 0..6),
        thr in prop::sample::select(vec![0.3, 0.5, 0.75]),
    ) {
        let gt: Vec<GroundTruth<f64>> = gt_boxes
            .iter()
            .map(|((a, _), class)| GroundTruth { class: *class, bbox: *a })
            .collect();
        // detections: the jittered partner boxes with scores
        let dets: Vec<Detection> = gt_boxes
            .iter()
            .enumerate()
            .map(|(i, ((_, b), class))| Detection::new(*b, *class, 0.5 + 0.4 * (i as f64 % 2.0)))
            .collect();

        let outcome = match_outcome(&gt, &dets, thr).unwrap();
        let best = plate_core::synth::oracle_best_matching(&gt, &dets, thr).unwrap();
        prop_assert!(outcome.tp <= best);
        prop_assert_eq!(outcome.tp + outcome.fn_, gt.len());
        prop_assert_eq!(outcome.tp + outcome.fp, dets.len());

        // PR points stay in range
        for pt in pr_curve(&gt, &dets, thr).unwrap() {
            prop_assert!((0.0..=1.0).contains(&pt.recall));
            prop_assert!((0.0..=1.0).contains(&pt.precision));
        }

        // matching is exclusive: no GT claimed twice
        let matches = match_detections(&gt, &dets, thr).unwrap();
        let mut claimed: Vec<usize> = matches.iter().filter_map(|(_, m)| *m).collect();
        let before = claimed.len();
        claimed.sort_unstable();
        claimed.dedup();
        prop_assert_eq!(claimed.len(), before);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn summary_is_permutation_invariant(samples in prop::collection::vec(arb_sample(), 0..12), seed in any::<u64>()) {
        let summary = stats::summarize(&samples);
        let mut shuffled = samples.clone();
        // deterministic shuffle
        let mut state = seed;
        for i in (1..shuffled.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let j = (state >> 33) as usize % (i + 1);
            shuffled.swap(i, j);
        }
        prop_assert_eq!(stats::summarize(&shuffled), summary);

        // bucket totals equal the number of microbe labels
        let all_labels: Vec<Label> = samples.iter().flat_map(|s| s.labels.clone()).collect();
        let buckets = stats::size_buckets(&all_labels);
        let microbe = all_labels.iter().filter(|l| l.class.is_microbe()).count() as u64;
        prop_assert_eq!(buckets.total(), microbe);
    }

    #[test]
    fn heatmap_normalized(samples in prop::collection::vec(arb_sample(), 1..8), class in arb_class()) {
        let extent = ImageExtent::new(3500, 3500).unwrap();
        let data: Vec<(ImageExtent, Vec<Label>)> = samples
            .iter()
            .map(|s| (extent, s.labels.clone()))
            .collect();
        let m = stats::heatmap(&data, class, 16, stats::HeatmapAccumulation::Center).unwrap();
        let peak = m.grid.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
        let has_instances = samples.iter().flat_map(|s| &s.labels).any(|l| l.class == class);
        if has_instances {
            prop_assert_eq!(peak, 1.0);
        } else {
            prop_assert_eq!(m.normalization_max, 0.0);
        }
        prop_assert!(m.grid.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }
}

/// End-to-end identity: well-separated ground truth, projected into every
/// containing test window as perfect detections, merged and deduplicated
/// with hard NMS, equals the ground truth exactly.
#[test]
fn zero_noise_round_trip_recovers_ground_truth() {
    use plate_core::postprocess::{merge_windows, WindowDetections};

    let extent = ImageExtent::new(1024, 1024).unwrap();
    let plan = tiler::plan_test_windows_default(extent).unwrap();

    let mut gt = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            gt.push(Detection::new(
                BBox::new(
                    60.0 + 230.0 * i as f64,
                    60.0 + 230.0 * j as f64,
                    40.0 + i as f64,
                    40.0 + j as f64,
                ),
                MICROBE_CLASSES[(i + j) % 5],
                1.0,
            ));
        }
    }

    let mut per_window = Vec::new();
    for (idx, window) in plan.windows.iter().enumerate() {
        let mut dets = Vec::new();
        for d in &gt {
            if window.contains(&d.bbox) {
                let local = tiler::image_to_window(window, &d.bbox, 1.0).unwrap();
                dets.push(Detection::new(local, d.class, 1.0));
            }
        }
        if !dets.is_empty() {
            per_window.push(WindowDetections {
                window_index: idx,
                detections: dets,
            });
        }
    }

    let merged = merge_windows(&plan, &per_window, 1.0).unwrap();
    assert!(merged.len() >= gt.len()); // duplicates exist before NMS

    let cfg = FilterConfig::new(0.5, NmsConfig::hard(0.5));
    let filtered = apply_filters(&merged, &cfg);
    assert_eq!(filtered.len(), gt.len());
    for d in &gt {
        assert!(
            filtered
                .iter()
                .any(|f| f.bbox == d.bbox && f.class == d.class),
            "colony at ({}, {}) lost in the round trip",
            d.bbox.x,
            d.bbox.y
        );
    }

    let mut expected: BTreeMap<ColonyClass, u32> = BTreeMap::new();
    for d in &gt {
        *expected.entry(d.class).or_default() += 1;
    }
    let counts = predict_counts(&filtered);
    for (class, n) in expected {
        assert_eq!(counts.get(class), n);
    }
}

/// AP should not increase with the IoU threshold on noisy fixtures.
#[test]
fn ap_monotone_in_iou_threshold_on_seeded_fixtures() {
    use plate_core::synth::{generate, CountRange, NoiseModel, SizeProfile, SynthConfig};

    for seed in [3u64, 17, 99, 2024] {
        let cfg = SynthConfig {
            seed,
            plate_extent: ImageExtent::new(2048, 2048).unwrap(),
            n_samples: 6,
            count_distribution: CountRange::Low,
            class_mix: MICROBE_CLASSES.iter().map(|&c| (c, 1.0)).collect(),
            size_profile: SizeProfile::Small,
            noise: NoiseModel {
                jitter_frac: 0.08,
                dropout_prob: 0.05,
                spurious_rate: 2.0,
                score_noise_sd: 0.05,
                spurious_score_range: (0.05, 0.5),
            },
            max_gt_iou: 0.1,
        };
        let samples = generate(&cfg).unwrap();
        let gt: BTreeMap<i64, Vec<Label>> = samples
            .iter()
            .map(|s| (s.annotation.sample_id, s.annotation.labels.clone()))
            .collect();
        let dets: BTreeMap<i64, Vec<Detection>> = samples
            .iter()
            .map(|s| (s.annotation.sample_id, s.noisy_detections.clone()))
            .collect();
        let report = metrics::map_report(
            &gt,
            &dets,
            &metrics::default_iou_thresholds(),
            metrics::ApIntegration::Trapezoid,
        )
        .unwrap();
        for pair in report.overall.ap.windows(2) {
            assert!(
                pair[0] + 1e-9 >= pair[1],
                "AP increased across IoU thresholds: {:?}",
                report.overall.ap
            );
        }
    }
}
