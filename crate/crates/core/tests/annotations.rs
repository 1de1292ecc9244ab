use std::path::PathBuf;

use headplan::annotations::{
    dataset_stats, load_bdd, load_coco, nearest_rank, Dataset, ImageRecord, LoadOptions, ObjectBox,
    SourceFormat,
};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

#[test]
fn bdd_fixture_matches_hand_tally() {
    // f1: 3 boxes (one clamped at x1) + 1 polygon label; f2: 2 kept (truck clamped),
    // 1 entirely right of the image; f3: 2 kept, 1 entirely above-left.
    let loaded = load_bdd(&fixture("bdd_three_frames.json"), &LoadOptions::default()).unwrap();
    let per_image: Vec<usize> = loaded
        .dataset
        .images
        .iter()
        .map(|im| im.boxes.len())
        .collect();
    assert_eq!(per_image, vec![3, 2, 2]);
    let s = loaded.summary;
    assert_eq!(s.raw_labels, 10);
    assert_eq!(s.skipped_no_box, 1);
    assert_eq!(s.clamped, 2);
    assert_eq!(s.dropped_degenerate, 2);
    assert_eq!(s.kept, 7);
    assert_eq!(
        loaded.dataset.object_count(),
        s.raw_labels - s.skipped_no_box - s.filtered - s.dropped_degenerate
    );
    assert_eq!(
        loaded.dataset.images[1].boxes[1],
        ObjectBox::new("truck", 1250.0, 700.0, 1280.0, 720.0)
    );
    for (im, b) in loaded.dataset.boxes() {
        assert!(b.x1 >= 0.0 && b.x2 <= f64::from(im.width) && b.x1 < b.x2);
        assert!(b.y1 >= 0.0 && b.y2 <= f64::from(im.height) && b.y1 < b.y2);
        assert!(loaded.dataset.categories.contains(&b.category));
    }
}

#[test]
fn bdd_allow_list_counts_filtered() {
    let opts = LoadOptions {
        categories: Some(["car".to_string()].into()),
        ..LoadOptions::default()
    };
    let loaded = load_bdd(&fixture("bdd_three_frames.json"), &opts).unwrap();
    assert_eq!(loaded.dataset.object_count(), 3);
    assert_eq!(loaded.summary.filtered, 5);
    assert_eq!(loaded.summary.dropped_degenerate, 1);
    assert_eq!(loaded.dataset.categories.len(), 1);
}

#[test]
fn coco_fixture_matches_hand_tally() {
    let loaded = load_coco(&fixture("coco_five_images.json"), &LoadOptions::default()).unwrap();
    let per_image: Vec<usize> = loaded
        .dataset
        .images
        .iter()
        .map(|im| im.boxes.len())
        .collect();
    assert_eq!(per_image, vec![3, 0, 4, 2, 3]);
    assert_eq!(loaded.summary.raw_labels, 12);
    assert_eq!(loaded.summary.clamped, 2);
    assert_eq!(loaded.dataset.source_format, SourceFormat::Coco);
    let bus = &loaded.dataset.images[2].boxes[0];
    assert_eq!((bus.category.as_str(), bus.area()), ("bus", 4096.0));
}

#[test]
fn missing_file_is_io_error() {
    let err = load_bdd(&fixture("nope.json"), &LoadOptions::default()).unwrap_err();
    assert!(err.to_string().contains("nope.json"));
}

#[test]
fn normalized_round_trip() {
    let loaded = load_bdd(&fixture("bdd_three_frames.json"), &LoadOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("norm.json");
    loaded.dataset.save_normalized(&path).unwrap();
    assert_eq!(Dataset::load_normalized(&path).unwrap(), loaded.dataset);
}

/// Smallest value `v` with at least `ceil(q * n)` elements `<= v` (and at least one).
fn quantile_oracle(values: &[f64], q: f64) -> f64 {
    let n = values.len();
    let need = ((q * n as f64).ceil() as usize).max(1);
    let mut candidates = values.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    *candidates
        .iter()
        .find(|&&v| values.iter().filter(|&&x| x <= v).count() >= need)
        .unwrap()
}

#[test]
fn stats_quantiles_match_counting_oracle() {
    let sides = [
        (3.0, 4.0),
        (10.0, 10.0),
        (1.0, 2.0),
        (7.0, 3.0),
        (50.0, 20.0),
        (5.0, 5.0),
        (2.0, 2.0),
        (9.0, 11.0),
        (30.0, 31.0),
        (4.0, 6.0),
        (6.0, 4.0),
        (12.0, 12.0),
        (100.0, 80.0),
        (15.0, 2.0),
        (8.0, 8.0),
        (1.0, 1.0),
        (40.0, 40.0),
        (3.0, 3.0),
        (20.0, 25.0),
        (16.0, 16.0),
    ];
    let boxes: Vec<ObjectBox> = sides
        .iter()
        .map(|&(w, h)| ObjectBox::new(if w > h { "wide" } else { "tall" }, 0.0, 0.0, w, h))
        .collect();
    let areas: Vec<f64> = boxes.iter().map(ObjectBox::area).collect();
    let d = Dataset {
        images: vec![ImageRecord {
            image_id: "x".into(),
            width: 1000,
            height: 1000,
            boxes,
        }],
        categories: ["wide".to_string(), "tall".to_string()].into(),
        source_format: SourceFormat::Bdd,
    };
    let s = dataset_stats(&d);
    assert_eq!(s.boxes, 20);
    assert_eq!(s.boxes_per_category.values().sum::<usize>(), 20);
    for (q, v) in s.area_quantiles.unwrap() {
        assert_eq!(v, quantile_oracle(&areas, q), "q={q}");
    }
}

proptest! {
    #[test]
    fn clamping_is_idempotent(
        x1 in -500.0f64..2000.0, y1 in -500.0f64..2000.0,
        w in 0.0f64..1500.0, h in 0.0f64..1500.0,
        iw in 1u32..2000, ih in 1u32..2000,
    ) {
        let b = ObjectBox::new("c", x1, y1, x1 + w, y1 + h);
        let once = b.clamped(iw, ih);
        prop_assert_eq!(once.clamped(iw, ih), once);
    }

    #[test]
    fn nearest_rank_matches_oracle(mut values in prop::collection::vec(0.0f64..1e4, 1..60), q in 0.0f64..=1.0) {
        let oracle = quantile_oracle(&values, q);
        values.sort_by(f64::total_cmp);
        prop_assert_eq!(nearest_rank(&values, q), Some(oracle));
    }
}
