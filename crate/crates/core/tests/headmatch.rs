use headplan::annotations::{Dataset, ImageRecord, ObjectBox, SourceFormat};
use headplan::headmatch::{
    match_histogram, recommend_cross_scale, scale_ranges, sweep_resolutions, Head, HeadConfig,
    MatchHistogram,
};
use num_rational::Ratio;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `ceil(2^i * w_o / w_in)^2` in exact rational arithmetic.
fn rational_bounds(width_o: u64, width_in: u64) -> [u64; 5] {
    let mut out = [0; 5];
    for (slot, b) in out.iter_mut().enumerate() {
        let r = Ratio::new(2u64.pow(slot as u32 + 1) * width_o, width_in);
        let side = r.ceil().to_integer();
        *b = side * side;
    }
    out
}

/// Highest head whose rational lower bound the area reaches.
fn brute_force_bucket(area: f64, width_o: u64, width_in: u64) -> Option<usize> {
    let bounds = rational_bounds(width_o, width_in);
    (0..5).rev().find(|&i| area >= bounds[i] as f64)
}

fn brute_force_histogram(d: &Dataset, width_in: u64) -> ([usize; 5], usize) {
    let mut counts = [0; 5];
    let mut residual = 0;
    for im in &d.images {
        for b in &im.boxes {
            match brute_force_bucket(b.area(), u64::from(im.width), width_in) {
                Some(i) => counts[i] += 1,
                None => residual += 1,
            }
        }
    }
    (counts, residual)
}

fn random_dataset(seed: u64, n_boxes: usize, max_area: f64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = [640u32, 1280, 1920];
    let mut images: Vec<ImageRecord> = (0..10)
        .map(|i| ImageRecord {
            image_id: i.to_string(),
            width: widths[i % 3],
            height: 20_000,
            boxes: Vec::new(),
        })
        .collect();
    for k in 0..n_boxes {
        let area: f64 = rng.gen_range(1.0..=max_area);
        // width 1 keeps the area exact and inside every image
        images[k % 10]
            .boxes
            .push(ObjectBox::new("obj", 0.0, 0.0, 1.0, area));
    }
    Dataset {
        images,
        categories: ["obj".to_string()].into(),
        source_format: SourceFormat::Coco,
    }
}

fn uniform_dataset(width_o: u32, areas: &[f64]) -> Dataset {
    Dataset {
        images: vec![ImageRecord {
            image_id: "u".into(),
            width: width_o,
            height: 20_000,
            boxes: areas
                .iter()
                .map(|&a| ObjectBox::new("obj", 0.0, 0.0, 1.0, a))
                .collect(),
        }],
        categories: ["obj".to_string()].into(),
        source_format: SourceFormat::Bdd,
    }
}

#[test]
fn scale_ranges_match_rational_oracle_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let w_o = rng.gen_range(1..5000);
        let w_in = rng.gen_range(1..5000);
        assert_eq!(
            scale_ranges(w_o, w_in).unwrap().bounds,
            rational_bounds(w_o, w_in),
            "({w_o}, {w_in})"
        );
    }
}

#[test]
fn documented_tables() {
    assert_eq!(rational_bounds(1280, 800), [16, 49, 169, 676, 2704]);
    assert_eq!(rational_bounds(1280, 416), [49, 169, 625, 2500, 9801]);
    assert_eq!(
        scale_ranges(1280, 416).unwrap().bounds,
        rational_bounds(1280, 416)
    );
}

#[test]
fn histogram_matches_brute_force_on_1000_boxes() {
    let d = random_dataset(5, 1000, 10_000.0);
    for w_in in [416, 800, 1504] {
        let h = match_histogram(&d, w_in).unwrap();
        let (counts, residual) = brute_force_histogram(&d, w_in);
        assert_eq!(h.counts, counts);
        assert_eq!(h.residual_small, residual);
        assert_eq!(h.total, 1000);
        let sum: f64 = h.ratios().iter().sum::<f64>() + h.residual_ratio();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn sweep_equals_individual_histograms() {
    let d = random_dataset(8, 300, 50_000.0);
    let widths = [416, 800, 1504];
    let sweep = sweep_resolutions(&d, &widths).unwrap();
    for (w, h) in sweep {
        assert_eq!(h, match_histogram(&d, w).unwrap());
    }
}

#[test]
fn large_uniform_boxes_shift_to_higher_heads() {
    // at 1280 wide every 10000-px box reaches b_5 from 416 onward: b_5 = 9801, 2704, 784
    let d = uniform_dataset(1280, &[10_000.0; 8]);
    for w in [416, 800, 1504] {
        assert_eq!(match_histogram(&d, w).unwrap().count(Head::H5), 8);
    }
    // a mid-size box climbs monotonically as the input grows
    let mut last = 0;
    for w in [160, 256, 416, 640, 800, 1024, 1504, 2048] {
        let h = match_histogram(&uniform_dataset(1280, &[900.0]), w).unwrap();
        let bucket = Head::ALL
            .iter()
            .position(|&hd| h.count(hd) == 1)
            .map_or(0, |p| p + 1);
        assert!(bucket >= last, "width {w}");
        last = bucket;
    }
    assert_eq!(last, 5);
}

#[test]
fn merging_partials_is_order_independent() {
    let a = MatchHistogram::from_counts([1, 2, 3, 4, 5], 6);
    let b = MatchHistogram::from_counts([6, 5, 4, 3, 2], 1);
    assert_eq!(a.merge(&b), b.merge(&a));
    assert_eq!(a.merge(&b).total, 42);
}

proptest! {
    #[test]
    fn rational_oracle_agrees(w_o in 1u64..100_000, w_in in 1u64..100_000) {
        prop_assert_eq!(scale_ranges(w_o, w_in).unwrap().bounds, rational_bounds(w_o, w_in));
    }

    #[test]
    fn bounds_non_increasing_in_input_width(w_o in 1u64..4000, w_in in 1u64..4000, step in 1u64..500) {
        let small = scale_ranges(w_o, w_in).unwrap().bounds;
        let large = scale_ranges(w_o, w_in + step).unwrap().bounds;
        for i in 0..5 {
            prop_assert!(large[i] <= small[i]);
        }
        for w in small.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn bounds_strictly_increasing_when_downscaling(w_in in 1u64..2000, extra in 0u64..4000) {
        let b = scale_ranges(w_in + extra, w_in).unwrap().bounds;
        for w in b.windows(2) {
            prop_assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn conservation_and_deep_head_monotonicity(seed in 0u64..1000, w_in in 100u64..2000, step in 1u64..400) {
        let d = random_dataset(seed, 200, 20_000.0);
        let h1 = match_histogram(&d, w_in).unwrap();
        let h2 = match_histogram(&d, w_in + step).unwrap();
        prop_assert_eq!(h1.counts.iter().sum::<usize>() + h1.residual_small, d.object_count());
        let deep = |h: &MatchHistogram| h.count(Head::H4) + h.count(Head::H5);
        prop_assert!(deep(&h2) >= deep(&h1));
    }

    #[test]
    fn scale_equivariance(seed in 0u64..500, k in 1u32..6, pick in 0usize..4) {
        // w_in divides 2 * w_o, so every ceil argument is integral
        let base = random_dataset(seed, 120, 5000.0);
        let w_in = [320u64, 640, 1280, 2560][pick];
        let scaled = Dataset {
            images: base.images.iter().map(|im| ImageRecord {
                image_id: im.image_id.clone(),
                width: 1280 * k,
                height: im.height * k,
                boxes: im.boxes.iter().map(|b| ObjectBox::new(
                    b.category.clone(), b.x1 * f64::from(k), b.y1 * f64::from(k),
                    b.x2 * f64::from(k), b.y2 * f64::from(k))).collect(),
            }).collect(),
            ..base.clone()
        };
        let base = Dataset {
            images: base.images.into_iter().map(|im| ImageRecord { width: 1280, ..im }).collect(),
            ..base
        };
        let a = match_histogram(&base, w_in).unwrap();
        let b = match_histogram(&scaled, w_in).unwrap();
        prop_assert_eq!(a.ratios(), b.ratios());
    }

    #[test]
    fn cross_scale_is_pair_subset(lo in 1u32..5, len in 2u32..6) {
        let hi = (lo + len - 1).min(5);
        prop_assume!(hi > lo);
        let span = HeadConfig::span(
            Head::from_index(lo).unwrap(),
            Head::from_index(hi).unwrap(),
            headplan::Rationale::MatchedStrategy,
        ).unwrap();
        let pair = recommend_cross_scale(&span).unwrap();
        prop_assert_eq!(pair.heads().len(), 2);
        prop_assert!(pair.heads().iter().all(|h| span.contains(*h)));
    }
}
