//! Architecture descriptors and their parameter / multiply-accumulate cost.
//!
//! A descriptor is an ordered list of layers forming a DAG in topological order.
//! Composite layers (`c3`, `sppf`, `dilated`) are expanded into primitive
//! convolutions for counting, see [`LayerKind::primitive_convs`]. Spatial sizes use
//! same padding, `pad = d * (k - 1) / 2`, and a square input.

mod parse;
mod prune;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::headmatch::Head;

pub use parse::{load_descriptor, parse_descriptor};
pub use prune::{insert_dilated, prune_to_heads};

pub type LayerId = u32;

/// Resolution used to validate spatial consistency when a descriptor is built.
pub const PROBE_WIDTH: u32 = 416;

/// The bundled five-head YOLOv5-S style descriptor (3x3 stem).
pub const YOLOV5S_ARCH: &str = include_str!("../../data/yolov5s.arch");

/// Dilation rates of the three branches of the `dilated` block.
pub const DILATED_RATES: [u32; 3] = [1, 4, 8];

#[derive(Debug, Error, PartialEq)]
pub enum ArchError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: layer {id} references {src} which is not defined earlier")]
    ForwardReference {
        line: usize,
        id: LayerId,
        src: LayerId,
    },
    #[error("layer {0} is not defined")]
    UnknownLayer(LayerId),
    #[error("duplicate layer id {0}")]
    DuplicateId(LayerId),
    #[error("layer {id}: {message}")]
    InvalidLayer { id: LayerId, message: String },
    #[error("layer {id}: expects {expected} input channels but its source provides {found}")]
    ChannelMismatch {
        id: LayerId,
        expected: u32,
        found: u32,
    },
    #[error("concat {id}: layer {a} is {a_size}x{a_size} but layer {b} is {b_size}x{b_size}")]
    ShapeMismatch {
        id: LayerId,
        a: LayerId,
        a_size: u32,
        b: LayerId,
        b_size: u32,
    },
    #[error("detect {id}: head {head} needs stride {expected} but its source has stride {found}")]
    DetectStride {
        id: LayerId,
        head: Head,
        expected: u32,
        found: u32,
    },
    #[error("head {0} is declared by more than one detect layer")]
    DuplicateHead(Head),
    #[error("no stage with stride {stride} for head {0}", stride = .0.stride())]
    NoStageForHead(Head),
    #[error("input width {width} is not divisible by the total stride {stride}")]
    IndivisibleWidth { width: u32, stride: u32 },
}

pub type Result<T> = std::result::Result<T, ArchError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Source {
    Input,
    Layer(LayerId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Conv {
        c_in: u32,
        c_out: u32,
        k: u32,
        s: u32,
        d: u32,
        bias: bool,
    },
    /// CSP bottleneck block: hidden width `c_out / 2`, `n` bottlenecks.
    C3 {
        c_in: u32,
        c_out: u32,
        n: u32,
    },
    /// Spatial pyramid pooling (fast): 1x1 to `c_in / 2`, three chained max-pools, 1x1 out.
    Sppf {
        c_in: u32,
        c_out: u32,
        k: u32,
    },
    /// Three parallel 3x3 branches at dilation 1, 4, 8 (width `c / 4` each), a 1x1 fuse
    /// back to `c` and an identity shortcut.
    Dilated {
        c: u32,
    },
    Upsample {
        factor: u32,
    },
    Concat,
    Detect {
        head: Head,
        outputs: u32,
    },
}

/// A bias-carrying or bias-free convolution that runs at the owning layer's output
/// resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrimitiveConv {
    pub c_in: u32,
    pub c_out: u32,
    pub k: u32,
    pub bias: bool,
}

impl PrimitiveConv {
    fn new(c_in: u32, c_out: u32, k: u32) -> Self {
        Self {
            c_in,
            c_out,
            k,
            bias: false,
        }
    }

    pub fn params(&self) -> u64 {
        let w = u64::from(self.k).pow(2) * u64::from(self.c_in) * u64::from(self.c_out);
        w + if self.bias { u64::from(self.c_out) } else { 0 }
    }

    pub fn macs_per_position(&self) -> u64 {
        u64::from(self.k).pow(2) * u64::from(self.c_in) * u64::from(self.c_out)
    }
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::C3 { .. } => "c3",
            LayerKind::Sppf { .. } => "sppf",
            LayerKind::Dilated { .. } => "dilated",
            LayerKind::Upsample { .. } => "upsample",
            LayerKind::Concat => "concat",
            LayerKind::Detect { .. } => "detect",
        }
    }

    /// The convolutions this layer performs. `src_channels` is only consulted by
    /// `detect`, whose input width is implied by its source.
    pub fn primitive_convs(&self, src_channels: u32) -> Vec<PrimitiveConv> {
        match *self {
            LayerKind::Conv {
                c_in,
                c_out,
                k,
                bias,
                ..
            } => vec![PrimitiveConv {
                c_in,
                c_out,
                k,
                bias,
            }],
            LayerKind::C3 { c_in, c_out, n } => {
                let h = c_out / 2;
                let mut convs = vec![
                    PrimitiveConv::new(c_in, h, 1),
                    PrimitiveConv::new(c_in, h, 1),
                ];
                for _ in 0..n {
                    convs.push(PrimitiveConv::new(h, h, 1));
                    convs.push(PrimitiveConv::new(h, h, 3));
                }
                convs.push(PrimitiveConv::new(2 * h, c_out, 1));
                convs
            }
            LayerKind::Sppf { c_in, c_out, .. } => {
                let h = c_in / 2;
                vec![
                    PrimitiveConv::new(c_in, h, 1),
                    PrimitiveConv::new(4 * h, c_out, 1),
                ]
            }
            LayerKind::Dilated { c } => {
                let b = c / 4;
                let mut convs: Vec<_> = DILATED_RATES
                    .iter()
                    .map(|_| PrimitiveConv::new(c, b, 3))
                    .collect();
                convs.push(PrimitiveConv::new(3 * b, c, 1));
                convs
            }
            LayerKind::Detect { outputs, .. } => vec![PrimitiveConv {
                c_in: src_channels,
                c_out: outputs,
                k: 1,
                bias: true,
            }],
            LayerKind::Upsample { .. } | LayerKind::Concat => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerSpec {
    pub id: LayerId,
    pub sources: Vec<Source>,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(id: LayerId, sources: Vec<Source>, kind: LayerKind) -> Self {
        Self { id, sources, kind }
    }
}

/// Resolution-independent shape of a layer output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerShape {
    pub channels: u32,
    pub stride: u32,
}

/// A validated layer DAG.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub name: String,
    input_channels: u32,
    layers: Vec<LayerSpec>,
    shapes: Vec<LayerShape>,
    head_map: BTreeMap<Head, LayerId>,
}

fn invalid(id: LayerId, message: impl Into<String>) -> ArchError {
    ArchError::InvalidLayer {
        id,
        message: message.into(),
    }
}

fn same_pad_size(size: u32, k: u32, s: u32, d: u32) -> u32 {
    let pad = d * (k - 1) / 2;
    (size + 2 * pad - d * (k - 1) - 1) / s + 1
}

impl ArchDescriptor {
    pub fn new(
        name: impl Into<String>,
        input_channels: u32,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        if input_channels == 0 {
            return Err(invalid(0, "input must have at least one channel"));
        }
        let mut index: HashMap<LayerId, usize> = HashMap::new();
        let mut shapes: Vec<LayerShape> = Vec::with_capacity(layers.len());
        let mut head_map = BTreeMap::new();
        let input = LayerShape {
            channels: input_channels,
            stride: 1,
        };

        for (pos, layer) in layers.iter().enumerate() {
            let id = layer.id;
            if index.contains_key(&id) {
                return Err(ArchError::DuplicateId(id));
            }
            let mut srcs = Vec::with_capacity(layer.sources.len());
            for src in &layer.sources {
                srcs.push(match *src {
                    Source::Input => input,
                    Source::Layer(s) => shapes[*index.get(&s).ok_or(ArchError::UnknownLayer(s))?],
                });
            }
            let expect_single = |srcs: &[LayerShape]| -> Result<LayerShape> {
                match srcs {
                    [one] => Ok(*one),
                    _ => Err(invalid(
                        id,
                        format!("expects exactly one source, got {}", srcs.len()),
                    )),
                }
            };
            let check_channels = |expected: u32, found: u32| -> Result<()> {
                if expected == found {
                    Ok(())
                } else {
                    Err(ArchError::ChannelMismatch {
                        id,
                        expected,
                        found,
                    })
                }
            };
            let shape = match layer.kind {
                LayerKind::Conv {
                    c_in,
                    c_out,
                    k,
                    s,
                    d,
                    ..
                } => {
                    let src = expect_single(&srcs)?;
                    if c_in == 0 || c_out == 0 {
                        return Err(invalid(id, "channels must be at least 1"));
                    }
                    if k == 0 || s == 0 || d == 0 {
                        return Err(invalid(
                            id,
                            "kernel, stride and dilation must be at least 1",
                        ));
                    }
                    if k % 2 == 0 {
                        return Err(invalid(
                            id,
                            format!("kernel size {k} is even; same padding needs an odd kernel"),
                        ));
                    }
                    check_channels(c_in, src.channels)?;
                    LayerShape {
                        channels: c_out,
                        stride: src.stride * s,
                    }
                }
                LayerKind::C3 { c_in, c_out, n } => {
                    let src = expect_single(&srcs)?;
                    if c_out < 2 || c_out % 2 != 0 || c_in == 0 {
                        return Err(invalid(id, "c3 needs c_in >= 1 and an even c_out >= 2"));
                    }
                    if n == 0 {
                        return Err(invalid(id, "c3 repeat count must be at least 1"));
                    }
                    check_channels(c_in, src.channels)?;
                    LayerShape {
                        channels: c_out,
                        stride: src.stride,
                    }
                }
                LayerKind::Sppf { c_in, c_out, k } => {
                    let src = expect_single(&srcs)?;
                    if c_in < 2 || c_in % 2 != 0 || c_out == 0 || k == 0 || k % 2 == 0 {
                        return Err(invalid(
                            id,
                            "sppf needs an even c_in >= 2, c_out >= 1 and an odd pool size",
                        ));
                    }
                    check_channels(c_in, src.channels)?;
                    LayerShape {
                        channels: c_out,
                        stride: src.stride,
                    }
                }
                LayerKind::Dilated { c } => {
                    let src = expect_single(&srcs)?;
                    if c == 0 || c % 4 != 0 {
                        return Err(invalid(
                            id,
                            format!("dilated block needs channels divisible by 4, got {c}"),
                        ));
                    }
                    check_channels(c, src.channels)?;
                    src
                }
                LayerKind::Upsample { factor } => {
                    let src = expect_single(&srcs)?;
                    if factor == 0 || src.stride % factor != 0 {
                        return Err(invalid(
                            id,
                            format!("cannot upsample stride {} by {factor}", src.stride),
                        ));
                    }
                    LayerShape {
                        channels: src.channels,
                        stride: src.stride / factor,
                    }
                }
                LayerKind::Concat => {
                    if srcs.len() < 2 {
                        return Err(invalid(id, "concat needs at least two sources"));
                    }
                    let ids: Vec<LayerId> = layer
                        .sources
                        .iter()
                        .map(|s| match s {
                            Source::Input => 0,
                            Source::Layer(l) => *l,
                        })
                        .collect();
                    let size = |sh: &LayerShape| PROBE_WIDTH.div_ceil(sh.stride);
                    for (j, sh) in srcs.iter().enumerate().skip(1) {
                        if sh.stride != srcs[0].stride {
                            return Err(ArchError::ShapeMismatch {
                                id,
                                a: ids[0],
                                a_size: size(&srcs[0]),
                                b: ids[j],
                                b_size: size(sh),
                            });
                        }
                    }
                    LayerShape {
                        channels: srcs.iter().map(|s| s.channels).sum(),
                        stride: srcs[0].stride,
                    }
                }
                LayerKind::Detect { head, outputs } => {
                    let src = expect_single(&srcs)?;
                    if outputs == 0 {
                        return Err(invalid(id, "detect needs at least one output per location"));
                    }
                    if src.stride != head.stride() {
                        return Err(ArchError::DetectStride {
                            id,
                            head,
                            expected: head.stride(),
                            found: src.stride,
                        });
                    }
                    if head_map.insert(head, id).is_some() {
                        return Err(ArchError::DuplicateHead(head));
                    }
                    LayerShape {
                        channels: outputs,
                        stride: src.stride,
                    }
                }
            };
            index.insert(id, pos);
            shapes.push(shape);
        }

        let arch = Self {
            name: name.into(),
            input_channels,
            layers,
            shapes,
            head_map,
        };
        arch.spatial_sizes(arch.probe_width())?;
        Ok(arch)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_channels(&self) -> u32 {
        self.input_channels
    }

    pub fn head_map(&self) -> &BTreeMap<Head, LayerId> {
        &self.head_map
    }

    pub fn shape(&self, id: LayerId) -> Option<LayerShape> {
        self.position(id).map(|p| self.shapes[p])
    }

    pub(crate) fn position(&self, id: LayerId) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub(crate) fn next_id(&self) -> LayerId {
        self.layers.iter().map(|l| l.id + 1).max().unwrap_or(0)
    }

    /// Largest down-sampling rate reached anywhere in the graph.
    pub fn max_stride(&self) -> u32 {
        self.shapes.iter().map(|s| s.stride).max().unwrap_or(1)
    }

    fn probe_width(&self) -> u32 {
        let m = self.max_stride();
        if PROBE_WIDTH.is_multiple_of(m) {
            PROBE_WIDTH
        } else {
            m * 13
        }
    }

    /// Output side length of every layer for a square input of side `width`,
    /// following the padding arithmetic exactly.
    pub fn spatial_sizes(&self, width: u32) -> Result<Vec<u32>> {
        let mut sizes: Vec<u32> = Vec::with_capacity(self.layers.len());
        let mut by_id: HashMap<LayerId, u32> = HashMap::new();
        let size_of = |by_id: &HashMap<LayerId, u32>, s: &Source| match s {
            Source::Input => width,
            Source::Layer(l) => by_id[l],
        };
        for layer in &self.layers {
            let first = size_of(&by_id, &layer.sources[0]);
            let size = match layer.kind {
                LayerKind::Conv { k, s, d, .. } => same_pad_size(first, k, s, d),
                LayerKind::Upsample { factor } => first * factor,
                LayerKind::Concat => {
                    for src in &layer.sources[1..] {
                        let other = size_of(&by_id, src);
                        if other != first {
                            let id_of = |s: &Source| match s {
                                Source::Input => 0,
                                Source::Layer(l) => *l,
                            };
                            return Err(ArchError::ShapeMismatch {
                                id: layer.id,
                                a: id_of(&layer.sources[0]),
                                a_size: first,
                                b: id_of(src),
                                b_size: other,
                            });
                        }
                    }
                    first
                }
                _ => first,
            };
            by_id.insert(layer.id, size);
            sizes.push(size);
        }
        Ok(sizes)
    }

    fn source_channels(&self, layer: &LayerSpec) -> u32 {
        match layer.sources.first() {
            Some(Source::Layer(l)) => self.shape(*l).map_or(0, |s| s.channels),
            _ => self.input_channels,
        }
    }

    pub fn param_count(&self) -> u64 {
        self.layers
            .iter()
            .flat_map(|l| l.kind.primitive_convs(self.source_channels(l)))
            .map(|c| c.params())
            .sum()
    }

    /// Parameters and multiply-accumulates for a square `width_in x width_in` input.
    pub fn mac_count(&self, width_in: u32) -> Result<CostReport> {
        let stride = self.max_stride();
        if width_in == 0 || !width_in.is_multiple_of(stride) {
            return Err(ArchError::IndivisibleWidth {
                width: width_in,
                stride,
            });
        }
        let sizes = self.spatial_sizes(width_in)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for ((layer, shape), &size) in self.layers.iter().zip(&self.shapes).zip(&sizes) {
            let convs = layer.kind.primitive_convs(self.source_channels(layer));
            let positions = u64::from(size) * u64::from(size);
            layers.push(LayerCost {
                id: layer.id,
                kind: layer.kind.name(),
                channels: shape.channels,
                size,
                params: convs.iter().map(PrimitiveConv::params).sum(),
                macs: convs
                    .iter()
                    .map(|c| c.macs_per_position() * positions)
                    .sum(),
            });
        }
        let params = layers.iter().map(|l| l.params).sum();
        let macs: u64 = layers.iter().map(|l| l.macs).sum();
        Ok(CostReport {
            width_in,
            params,
            macs,
            flops_2x: 2 * macs,
            layers,
        })
    }

    /// Last backbone layer at each stride `2^i`. The backbone ends before the first
    /// upsample, concat, or layer feeding an upsample.
    pub fn backbone_stages(&self) -> Vec<(u32, LayerId)> {
        let feeds_upsample: HashSet<LayerId> = self
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Upsample { .. }))
            .flat_map(|l| l.sources.iter())
            .filter_map(|s| match s {
                Source::Layer(id) => Some(*id),
                Source::Input => None,
            })
            .collect();
        let mut stages: BTreeMap<u32, LayerId> = BTreeMap::new();
        for (layer, shape) in self.layers.iter().zip(&self.shapes) {
            if matches!(layer.kind, LayerKind::Upsample { .. } | LayerKind::Concat)
                || feeds_upsample.contains(&layer.id)
            {
                break;
            }
            if shape.stride > 1 && shape.stride.is_power_of_two() {
                stages.insert(shape.stride.trailing_zeros(), layer.id);
            }
        }
        stages.into_iter().collect()
    }

    /// Render in the full-form descriptor grammar.
    pub fn to_text(&self) -> String {
        let mut out = format!("name {}\ninput {}\n", self.name, self.input_channels);
        let src = |s: &Source| match s {
            Source::Input => "input".to_string(),
            Source::Layer(l) => l.to_string(),
        };
        for l in &self.layers {
            let first = l.sources.first().map(src).unwrap_or_default();
            let _ = match l.kind {
                LayerKind::Conv {
                    c_in,
                    c_out,
                    k,
                    s,
                    d,
                    bias,
                } => writeln!(
                    out,
                    "conv {} {first} {c_in} {c_out} {k} {s} {d}{}",
                    l.id,
                    if bias { " bias" } else { "" }
                ),
                LayerKind::C3 { c_in, c_out, n } => {
                    writeln!(out, "c3 {} {first} {c_in} {c_out} {n}", l.id)
                }
                LayerKind::Sppf { c_in, c_out, k } => {
                    writeln!(out, "sppf {} {first} {c_in} {c_out} {k}", l.id)
                }
                LayerKind::Dilated { c } => writeln!(out, "dilated {} {first} {c}", l.id),
                LayerKind::Upsample { factor } => {
                    writeln!(out, "upsample {} {first} {factor}", l.id)
                }
                LayerKind::Concat => {
                    let all: Vec<String> = l.sources.iter().map(src).collect();
                    writeln!(out, "concat {} {}", l.id, all.join(","))
                }
                LayerKind::Detect { head, outputs } => {
                    writeln!(out, "detect {} {first} {} {outputs}", l.id, head.index())
                }
            };
        }
        out
    }

    /// Layers whose output eventually reaches one of `roots` (the roots included).
    pub(crate) fn ancestors(&self, roots: &[LayerId]) -> HashSet<LayerId> {
        let mut live: HashSet<LayerId> = HashSet::new();
        let mut stack: Vec<LayerId> = roots.to_vec();
        while let Some(id) = stack.pop() {
            if !live.insert(id) {
                continue;
            }
            if let Some(p) = self.position(id) {
                stack.extend(self.layers[p].sources.iter().filter_map(|s| match s {
                    Source::Layer(l) => Some(*l),
                    Source::Input => None,
                }));
            }
        }
        live
    }

    pub(crate) fn into_layers(self) -> (String, u32, Vec<LayerSpec>) {
        (self.name, self.input_channels, self.layers)
    }
}

/// The bundled descriptor, parsed.
pub fn bundled_yolov5s() -> ArchDescriptor {
    parse_descriptor(YOLOV5S_ARCH, "yolov5s").expect("bundled descriptor is valid")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub id: LayerId,
    pub kind: &'static str,
    pub channels: u32,
    pub size: u32,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub width_in: u32,
    pub params: u64,
    pub macs: u64,
    pub flops_2x: u64,
    pub layers: Vec<LayerCost>,
}

/// Which of MACs or 2*MACs a published "FLOPs" figure corresponds to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopsUnit {
    Macs,
    DoubleMacs,
}

impl CostReport {
    /// The unit under which `published` (same scale as `macs`) is closest in
    /// relative terms.
    pub fn closest_unit(&self, published: f64) -> FlopsUnit {
        let rel = |v: u64| ((v as f64 - published) / published).abs();
        if rel(self.macs) <= rel(self.flops_2x) {
            FlopsUnit::Macs
        } else {
            FlopsUnit::DoubleMacs
        }
    }

    pub fn in_unit(&self, unit: FlopsUnit) -> u64 {
        match unit {
            FlopsUnit::Macs => self.macs,
            FlopsUnit::DoubleMacs => self.flops_2x,
        }
    }
}
