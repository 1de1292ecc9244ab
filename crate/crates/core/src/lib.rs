//! Detection-head planning toolkit.
//!
//! * [`annotations`] loads BDD- and COCO-style box annotations into one dataset model.
//! * [`headmatch`] buckets ground-truth box areas into per-head scale ranges and
//!   recommends head configurations from the resulting histogram.
//! * [`costmodel`] parses a line-oriented architecture descriptor, prunes it to a head
//!   set and counts parameters and multiply-accumulates.
//! * [`tinynet`] is a small dense tensor engine used to verify the multi-rate dilated
//!   convolution block (gradients, receptive field, gradient support).

pub mod annotations;
pub mod costmodel;
pub mod headmatch;
pub mod tinynet;

pub use annotations::{Dataset, ImageRecord, LoadOptions, LoadSummary, Loaded, ObjectBox};
pub use costmodel::{ArchDescriptor, CostReport, LayerKind, LayerSpec};
pub use headmatch::{Head, HeadConfig, MatchHistogram, Rationale, ScaleRangeTable};

/// Double-precision tensor, the default used for all verification.
pub type Tensor64 = tinynet::Tensor<f64>;
/// Single-precision tensor.
pub type Tensor32 = tinynet::Tensor<f32>;
pub type ConvLayer64 = tinynet::ConvLayer<f64>;
pub type ConvLayer32 = tinynet::ConvLayer<f32>;
pub type DilatedModule64 = tinynet::DilatedModule<f64>;
pub type DilatedModule32 = tinynet::DilatedModule<f32>;
