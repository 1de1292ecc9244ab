//! Ground-truth box loading for BDD-style and COCO-style label files.
//!
//! Both loaders normalize into [`Dataset`]: corner-form boxes in original image
//! pixels. Boxes are clamped to the image bounds and boxes left with zero width or
//! height are dropped. Every adjustment is tallied in a [`LoadSummary`] so that the
//! downstream ratios can be audited against the raw file.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Image size assumed for BDD frames that do not carry their own dimensions.
pub const BDD_DEFAULT_SIZE: (u32, u32) = (1280, 720);

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed annotation document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("frame #{index} has no name")]
    MissingFrameName { index: usize },
    #[error("image {image_id} has invalid size {width}x{height}")]
    InvalidImageSize {
        image_id: String,
        width: u32,
        height: u32,
    },
    #[error("annotation #{index} references unknown image_id {image_id}")]
    UnknownImage { index: usize, image_id: i64 },
    #[error("annotation #{index} references unknown category_id {category_id}")]
    UnknownCategory { index: usize, category_id: i64 },
    #[error("annotation #{index} has negative bbox size ({width} x {height})")]
    NegativeBbox {
        index: usize,
        width: f64,
        height: f64,
    },
    #[error("annotation #{index} bbox must have 4 numbers, got {len}")]
    BboxArity { index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, AnnotationError>;

/// One ground-truth box in original-image pixels, corner form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub category: String,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl ObjectBox {
    pub fn new(category: impl Into<String>, x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            category: category.into(),
            x1,
            y1,
            x2,
            y2,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Clamp every coordinate into `[0, width] x [0, height]`.
    pub fn clamped(&self, width: u32, height: u32) -> Self {
        let (w, h) = (f64::from(width), f64::from(height));
        Self {
            category: self.category.clone(),
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x2 > self.x1 && self.y2 > self.y1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<ObjectBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    Bdd,
    Coco,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub categories: BTreeSet<String>,
    pub source_format: SourceFormat,
}

impl Dataset {
    /// Total number of objects, `N_t`.
    pub fn object_count(&self) -> usize {
        self.images.iter().map(|im| im.boxes.len()).sum()
    }

    pub fn boxes(&self) -> impl Iterator<Item = (&ImageRecord, &ObjectBox)> {
        self.images
            .iter()
            .flat_map(|im| im.boxes.iter().map(move |b| (im, b)))
    }

    /// Serialize to the normalized JSON form.
    pub fn to_normalized_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serialization cannot fail")
    }

    pub fn from_normalized_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save_normalized(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_normalized_json()).map_err(|source| AnnotationError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load_normalized(path: &Path) -> Result<Self> {
        Self::from_normalized_json(&read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadOptions {
    /// Size used for BDD frames without explicit `width`/`height`.
    pub image_size: (u32, u32),
    /// Keep only these categories; `None` keeps everything.
    pub categories: Option<BTreeSet<String>>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            image_size: BDD_DEFAULT_SIZE,
            categories: None,
        }
    }
}

impl LoadOptions {
    fn admits(&self, category: &str) -> bool {
        self.categories
            .as_ref()
            .is_none_or(|allow| allow.contains(category))
    }
}

/// Per-load bookkeeping. `kept = raw_labels - skipped_no_box - filtered - dropped_degenerate`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadSummary {
    pub raw_labels: usize,
    pub skipped_no_box: usize,
    pub filtered: usize,
    pub clamped: usize,
    pub dropped_degenerate: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub dataset: Dataset,
    pub summary: LoadSummary,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| AnnotationError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Clamp, then keep or drop, updating the counters.
fn admit_box(
    raw: ObjectBox,
    width: u32,
    height: u32,
    summary: &mut LoadSummary,
) -> Option<ObjectBox> {
    let clamped = raw.clamped(width, height);
    if clamped.is_degenerate() {
        summary.dropped_degenerate += 1;
        return None;
    }
    if clamped != raw {
        summary.clamped += 1;
    }
    summary.kept += 1;
    Some(clamped)
}

#[derive(Deserialize)]
struct BddFrame {
    name: Option<String>,
    width: Option<u32>,
    height: Option<u32>,
    #[serde(default)]
    labels: Option<Vec<BddLabel>>,
}

#[derive(Deserialize)]
struct BddLabel {
    category: String,
    box2d: Option<BddBox>,
}

#[derive(Deserialize)]
struct BddBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

pub fn load_bdd(path: &Path, opts: &LoadOptions) -> Result<Loaded> {
    parse_bdd(&read(path)?, opts)
}

pub fn parse_bdd(text: &str, opts: &LoadOptions) -> Result<Loaded> {
    let frames: Vec<BddFrame> = serde_json::from_str(text)?;
    let mut summary = LoadSummary::default();
    let mut categories = BTreeSet::new();
    let mut images = Vec::with_capacity(frames.len());

    for (index, frame) in frames.into_iter().enumerate() {
        let name = frame
            .name
            .filter(|n| !n.is_empty())
            .ok_or(AnnotationError::MissingFrameName { index })?;
        let width = frame.width.unwrap_or(opts.image_size.0);
        let height = frame.height.unwrap_or(opts.image_size.1);
        if width == 0 || height == 0 {
            return Err(AnnotationError::InvalidImageSize {
                image_id: name,
                width,
                height,
            });
        }

        let mut boxes = Vec::new();
        for label in frame.labels.unwrap_or_default() {
            summary.raw_labels += 1;
            let Some(b) = label.box2d else {
                summary.skipped_no_box += 1;
                continue;
            };
            if !opts.admits(&label.category) {
                summary.filtered += 1;
                continue;
            }
            let raw = ObjectBox::new(label.category, b.x1, b.y1, b.x2, b.y2);
            if let Some(kept) = admit_box(raw, width, height, &mut summary) {
                categories.insert(kept.category.clone());
                boxes.push(kept);
            }
        }
        images.push(ImageRecord {
            image_id: name,
            width,
            height,
            boxes,
        });
    }

    Ok(Loaded {
        dataset: Dataset {
            images,
            categories,
            source_format: SourceFormat::Bdd,
        },
        summary,
    })
}

#[derive(Deserialize)]
struct CocoDoc {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: i64,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: i64,
    bbox: Vec<f64>,
    category_id: i64,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: i64,
    name: String,
}

pub fn load_coco(path: &Path, opts: &LoadOptions) -> Result<Loaded> {
    parse_coco(&read(path)?, opts)
}

pub fn parse_coco(text: &str, opts: &LoadOptions) -> Result<Loaded> {
    let doc: CocoDoc = serde_json::from_str(text)?;

    let category_names: HashMap<i64, &str> = doc
        .categories
        .iter()
        .map(|c| (c.id, c.name.as_str()))
        .collect();
    let categories: BTreeSet<String> = doc
        .categories
        .iter()
        .filter(|c| opts.admits(&c.name))
        .map(|c| c.name.clone())
        .collect();

    let mut slot_of = HashMap::with_capacity(doc.images.len());
    let mut images = Vec::with_capacity(doc.images.len());
    for image in &doc.images {
        if image.width == 0 || image.height == 0 {
            return Err(AnnotationError::InvalidImageSize {
                image_id: image.id.to_string(),
                width: image.width,
                height: image.height,
            });
        }
        slot_of.insert(image.id, images.len());
        images.push(ImageRecord {
            image_id: image.id.to_string(),
            width: image.width,
            height: image.height,
            boxes: Vec::new(),
        });
    }

    let mut summary = LoadSummary::default();
    for (index, ann) in doc.annotations.into_iter().enumerate() {
        summary.raw_labels += 1;
        let &slot = slot_of
            .get(&ann.image_id)
            .ok_or(AnnotationError::UnknownImage {
                index,
                image_id: ann.image_id,
            })?;
        let &name =
            category_names
                .get(&ann.category_id)
                .ok_or(AnnotationError::UnknownCategory {
                    index,
                    category_id: ann.category_id,
                })?;
        let [x, y, w, h] = ann.bbox[..] else {
            return Err(AnnotationError::BboxArity {
                index,
                len: ann.bbox.len(),
            });
        };
        if w < 0.0 || h < 0.0 {
            return Err(AnnotationError::NegativeBbox {
                index,
                width: w,
                height: h,
            });
        }
        if !opts.admits(name) {
            summary.filtered += 1;
            continue;
        }
        let record = &mut images[slot];
        let raw = ObjectBox::new(name, x, y, x + w, y + h);
        if let Some(kept) = admit_box(raw, record.width, record.height, &mut summary) {
            record.boxes.push(kept);
        }
    }

    Ok(Loaded {
        dataset: Dataset {
            images,
            categories,
            source_format: SourceFormat::Coco,
        },
        summary,
    })
}

/// Fixed quantile levels reported by [`dataset_stats`].
pub const STAT_QUANTILES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub images: usize,
    pub boxes: usize,
    pub boxes_per_category: BTreeMap<String, usize>,
    /// `(level, area)` pairs; absent for an empty dataset.
    pub area_quantiles: Option<Vec<(f64, f64)>>,
}

/// Lower nearest-rank quantile of an ascending slice: the element at
/// `max(ceil(q * n), 1) - 1`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    Some(sorted[rank - 1])
}

pub fn dataset_stats(d: &Dataset) -> DatasetStats {
    let mut boxes_per_category = BTreeMap::new();
    let mut areas = Vec::with_capacity(d.object_count());
    for (_, b) in d.boxes() {
        *boxes_per_category.entry(b.category.clone()).or_insert(0) += 1;
        areas.push(b.area());
    }
    areas.sort_by(f64::total_cmp);
    let area_quantiles = (!areas.is_empty()).then(|| {
        STAT_QUANTILES
            .iter()
            .map(|&q| (q, nearest_rank(&areas, q).unwrap()))
            .collect()
    });
    DatasetStats {
        images: d.images.len(),
        boxes: areas.len(),
        boxes_per_category,
        area_quantiles,
    }
}
