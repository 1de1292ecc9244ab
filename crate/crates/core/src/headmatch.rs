//! Head/object-distribution matching.
//!
//! A head `H_i` sits on a feature map of stride `2^i`. After an aspect-preserving
//! resize from original width `w_o` to input width `w_in`, head `H_i` is matched to
//! boxes whose original-pixel area lies in `[b_i, b_{i+1})`, with
//! `b_i = ceil(2^i * w_o / w_in)^2` and `H5` open-ended. Areas below `b_1` match no
//! head and are kept in a separate residual bucket.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::annotations::Dataset;

/// Default matching threshold: a head is used when at least 1% of objects match it.
pub const DEFAULT_TAU: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("image widths must be positive (got w_o={width_o}, w_in={width_in})")]
    ZeroWidth { width_o: u64, width_in: u64 },
    #[error("dataset contains no objects")]
    EmptyDataset,
    #[error("threshold must lie in (0, 1), got {0}")]
    InvalidTau(f64),
    #[error("no head reaches the matching threshold {tau} (largest ratio {best})")]
    NoHeadReachesTau { tau: f64, best: f64 },
    #[error("head configuration must not be empty")]
    EmptyConfig,
    #[error("head {0} listed twice")]
    DuplicateHead(Head),
    #[error("head configuration {0} is not a contiguous span")]
    NotContiguous(String),
    #[error(
        "cross-scale pair needs a matched span of at least two heads, got span of size 1 ({0})"
    )]
    SpanTooSmall(Head),
    #[error("unknown head '{0}', expected H1..H5")]
    UnknownHead(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Head {
    H1 = 1,
    H2 = 2,
    H3 = 3,
    H4 = 4,
    H5 = 5,
}

impl Head {
    pub const ALL: [Head; 5] = [Head::H1, Head::H2, Head::H3, Head::H4, Head::H5];

    pub fn index(self) -> u32 {
        self as u32
    }

    pub fn from_index(index: u32) -> Option<Head> {
        Head::ALL.get((index as usize).checked_sub(1)?).copied()
    }

    /// Down-sampling rate of the feature map this head reads.
    pub fn stride(self) -> u32 {
        1 << self.index()
    }

    fn slot(self) -> usize {
        self as usize - 1
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "H{}", self.index())
    }
}

impl FromStr for Head {
    type Err = MatchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let digits = t.strip_prefix(['H', 'h']).unwrap_or(t);
        digits
            .parse::<u32>()
            .ok()
            .and_then(Head::from_index)
            .ok_or_else(|| MatchError::UnknownHead(s.to_string()))
    }
}

/// Lower area bounds `b_1..b_5` (squared original-image pixels) for one resize ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ScaleRangeTable {
    pub width_o: u64,
    pub width_in: u64,
    pub bounds: [u64; 5],
}

/// Exact integer evaluation of the per-head lower bounds.
///
/// `ceil(2^i * w_o / w_in)` is computed as `(2^i * w_o + w_in - 1) / w_in`.
pub fn scale_ranges(width_o: u64, width_in: u64) -> Result<ScaleRangeTable, MatchError> {
    if width_o == 0 || width_in == 0 {
        return Err(MatchError::ZeroWidth { width_o, width_in });
    }
    let mut bounds = [0u64; 5];
    for (slot, b) in bounds.iter_mut().enumerate() {
        let scaled = (2u64 << slot) * width_o;
        let side = scaled.div_ceil(width_in);
        *b = side * side;
    }
    Ok(ScaleRangeTable {
        width_o,
        width_in,
        bounds,
    })
}

impl ScaleRangeTable {
    pub fn lower(&self, head: Head) -> u64 {
        self.bounds[head.slot()]
    }

    /// Exclusive upper bound; `None` for the open-ended last head.
    pub fn upper(&self, head: Head) -> Option<u64> {
        self.bounds.get(head.slot() + 1).copied()
    }

    /// The head whose half-open range contains `area`, or `None` below `b_1`.
    ///
    /// When the resize is an upscale by more than 2x, some bounds coincide and the
    /// corresponding ranges are empty; the highest head whose lower bound is reached
    /// wins, which is exactly half-open membership.
    pub fn bucket(&self, area: f64) -> Option<Head> {
        Head::ALL
            .iter()
            .rev()
            .copied()
            .find(|&h| area >= self.lower(h) as f64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MatchHistogram {
    pub counts: [usize; 5],
    pub residual_small: usize,
    pub total: usize,
}

impl MatchHistogram {
    pub fn count(&self, head: Head) -> usize {
        self.counts[head.slot()]
    }

    pub fn ratio(&self, head: Head) -> f64 {
        self.fraction(self.count(head))
    }

    pub fn ratios(&self) -> [f64; 5] {
        Head::ALL.map(|h| self.ratio(h))
    }

    pub fn residual_ratio(&self) -> f64 {
        self.fraction(self.residual_small)
    }

    fn fraction(&self, n: usize) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            n as f64 / self.total as f64
        }
    }

    pub fn record(&mut self, head: Option<Head>) {
        match head {
            Some(h) => self.counts[h.slot()] += 1,
            None => self.residual_small += 1,
        }
        self.total += 1;
    }

    /// Component-wise sum of two partial histograms.
    pub fn merge(mut self, other: &MatchHistogram) -> MatchHistogram {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        self.residual_small += other.residual_small;
        self.total += other.total;
        self
    }

    /// Histogram with the given counts; `total` is their sum.
    pub fn from_counts(counts: [usize; 5], residual_small: usize) -> Self {
        Self {
            counts,
            residual_small,
            total: counts.iter().sum::<usize>() + residual_small,
        }
    }
}

/// Bucket every box of `d` using the scale table of its own image.
pub fn match_histogram(d: &Dataset, width_in: u64) -> Result<MatchHistogram, MatchError> {
    if width_in == 0 {
        return Err(MatchError::ZeroWidth {
            width_o: 0,
            width_in,
        });
    }
    if d.object_count() == 0 {
        return Err(MatchError::EmptyDataset);
    }
    d.images
        .par_iter()
        .map(|image| {
            let table = scale_ranges(u64::from(image.width), width_in)?;
            let mut partial = MatchHistogram::default();
            for b in &image.boxes {
                partial.record(table.bucket(b.area()));
            }
            Ok(partial)
        })
        .try_reduce(MatchHistogram::default, |a, b| Ok(a.merge(&b)))
}

pub fn sweep_resolutions(
    d: &Dataset,
    widths: &[u64],
) -> Result<Vec<(u64, MatchHistogram)>, MatchError> {
    widths
        .iter()
        .map(|&w| Ok((w, match_histogram(d, w)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rationale {
    MatchedStrategy,
    CrossScale,
    Manual,
}

/// Non-empty, duplicate-free set of heads kept in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HeadConfig {
    heads: Vec<Head>,
    pub rationale: Rationale,
}

impl HeadConfig {
    pub fn new(
        heads: impl IntoIterator<Item = Head>,
        rationale: Rationale,
    ) -> Result<Self, MatchError> {
        let mut heads: Vec<Head> = heads.into_iter().collect();
        heads.sort();
        if let Some(w) = heads.windows(2).find(|w| w[0] == w[1]) {
            return Err(MatchError::DuplicateHead(w[0]));
        }
        if heads.is_empty() {
            return Err(MatchError::EmptyConfig);
        }
        Ok(Self { heads, rationale })
    }

    /// Every head from `lo` to `hi` inclusive.
    pub fn span(lo: Head, hi: Head, rationale: Rationale) -> Result<Self, MatchError> {
        Self::new(
            Head::ALL.into_iter().filter(|h| (lo..=hi).contains(h)),
            rationale,
        )
    }

    /// Parse a list such as `H2,H4` or `H3-H5`.
    pub fn parse(list: &str) -> Result<Self, MatchError> {
        let mut heads = Vec::new();
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.split_once('-') {
                Some((lo, hi)) => {
                    let (lo, hi) = (lo.parse::<Head>()?, hi.parse::<Head>()?);
                    heads.extend(Head::ALL.into_iter().filter(|h| (lo..=hi).contains(h)));
                }
                None => heads.push(part.parse()?),
            }
        }
        Self::new(heads, Rationale::Manual)
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn contains(&self, head: Head) -> bool {
        self.heads.contains(&head)
    }

    pub fn lowest(&self) -> Head {
        self.heads[0]
    }

    pub fn highest(&self) -> Head {
        *self.heads.last().unwrap()
    }

    pub fn is_contiguous(&self) -> bool {
        self.heads
            .windows(2)
            .all(|w| w[1].index() == w[0].index() + 1)
    }
}

impl fmt::Display for HeadConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.heads.iter().map(Head::to_string).collect();
        f.write_str(&names.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedRecommendation {
    pub config: HeadConfig,
    /// Heads inside the selected span whose ratio is below the threshold.
    pub below_tau_inside_span: Vec<Head>,
}

/// Keep the contiguous span from the lowest to the highest head with `R_i >= tau`.
pub fn recommend_matched(
    h: &MatchHistogram,
    tau: f64,
) -> Result<MatchedRecommendation, MatchError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(MatchError::InvalidTau(tau));
    }
    let ratios = h.ratios();
    let passing: Vec<Head> = Head::ALL
        .into_iter()
        .filter(|&head| ratios[head.slot()] >= tau)
        .collect();
    let (Some(&lo), Some(&hi)) = (passing.first(), passing.last()) else {
        let best = ratios.iter().copied().fold(0.0, f64::max);
        return Err(MatchError::NoHeadReachesTau { tau, best });
    };
    let config = HeadConfig::span(lo, hi, Rationale::MatchedStrategy)?;
    let below_tau_inside_span = config
        .heads()
        .iter()
        .copied()
        .filter(|head| !passing.contains(head))
        .collect();
    Ok(MatchedRecommendation {
        config,
        below_tau_inside_span,
    })
}

/// Two-head configuration: the lowest matched head plus the head two levels
/// deeper, capped at the highest matched head.
pub fn recommend_cross_scale(matched: &HeadConfig) -> Result<HeadConfig, MatchError> {
    if !matched.is_contiguous() {
        return Err(MatchError::NotContiguous(matched.to_string()));
    }
    let lo = matched.lowest();
    let hi = matched.highest();
    if lo == hi {
        return Err(MatchError::SpanTooSmall(lo));
    }
    let second = Head::from_index((lo.index() + 2).min(hi.index())).unwrap();
    HeadConfig::new([lo, second], Rationale::CrossScale)
}
