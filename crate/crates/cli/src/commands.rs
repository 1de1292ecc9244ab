use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use headplan::annotations::{dataset_stats, load_bdd, load_coco, Dataset, LoadOptions, Loaded};
use headplan::costmodel::{bundled_yolov5s, load_descriptor, prune_to_heads, ArchDescriptor};
use headplan::headmatch::{
    match_histogram, recommend_cross_scale, recommend_matched, scale_ranges, sweep_resolutions,
    HeadConfig, MatchError, MatchHistogram,
};
use headplan::tinynet::{
    finite_difference_check, finite_difference_input, gradient_support, Block, ConvLayer,
    DilatedModule, GradCheck, Tensor, MODULE_DILATIONS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::report::{
    histogram_csv, sig6, Comparison, CostRow, HeadChoice, HistogramRow, Recommendations, Report, F6,
};
use crate::{AnnFormat, ImageSize};

pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NO_HEAD: i32 = 3;
pub const EXIT_SPAN: i32 = 4;

const GRAD_TOL: f64 = 1e-6;
const GRAD_EPS: f64 = 1e-5;
const GRAD_CONFIGS: usize = 20;
const BRANCH_DIVISOR: usize = 4;

/// A command that could not produce a clean report. A partial report, when
/// present, is still written out.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
    pub report: Option<Box<Report>>,
}

impl Failure {
    fn input(e: impl Display) -> Self {
        Self {
            code: EXIT_INPUT,
            message: e.to_string(),
            report: None,
        }
    }

    fn with_report(code: i32, e: impl Display, mut report: Report) -> Self {
        report.warnings.push(e.to_string());
        Self {
            code,
            message: e.to_string(),
            report: Some(Box::new(report)),
        }
    }
}

pub struct Source<'a> {
    pub ann: &'a Path,
    pub format: AnnFormat,
    pub categories: Option<&'a [String]>,
    pub image_size: ImageSize,
}

fn load(src: &Source, report: &mut Report) -> Result<Dataset, Failure> {
    let opts = LoadOptions {
        image_size: (src.image_size.width, src.image_size.height),
        categories: src
            .categories
            .map(|c| c.iter().cloned().collect::<BTreeSet<_>>()),
    };
    let Loaded { dataset, summary } = match src.format {
        AnnFormat::Bdd => load_bdd(src.ann, &opts),
        AnnFormat::Coco => load_coco(src.ann, &opts),
    }
    .map_err(Failure::input)?;

    report.input("ann", src.ann.display().to_string());
    report.input("format", src.format.name());
    if src.format == AnnFormat::Bdd {
        report.input(
            "image_size",
            format!("{}x{}", src.image_size.width, src.image_size.height),
        );
    }
    report.input("categories", src.categories);
    report.input("load_summary", summary);
    let stats = dataset_stats(&dataset);
    report.result(
        "dataset",
        serde_json::json!({
            "images": stats.images,
            "boxes": stats.boxes,
            "boxes_per_category": stats.boxes_per_category,
            "area_quantiles": stats.area_quantiles.map(|q| q.into_iter().map(|(l, a)| (F6(l), F6(a))).collect::<Vec<_>>()),
        }),
    );
    report.note_load(&summary);
    Ok(dataset)
}

fn bounds_by_width(d: &Dataset, width_in: u64) -> Result<BTreeMap<u64, [u64; 5]>, MatchError> {
    let widths: BTreeSet<u64> = d.images.iter().map(|im| u64::from(im.width)).collect();
    widths
        .into_iter()
        .map(|w| Ok((w, scale_ranges(w, width_in)?.bounds)))
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text)
        .map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

pub fn analyze(
    src: &Source,
    widths: &[u64],
    csv: Option<&PathBuf>,
    mut report: Report,
) -> Result<Report, Failure> {
    let dataset = load(src, &mut report)?;
    report.input("win", widths);
    let sweep = sweep_resolutions(&dataset, widths).map_err(Failure::input)?;
    for (w, h) in &sweep {
        let bounds = bounds_by_width(&dataset, *w).map_err(Failure::input)?;
        report.histograms.push(HistogramRow::new(*w, h, bounds));
    }
    let n = dataset.object_count();
    let conserved = sweep
        .iter()
        .all(|(_, h)| h.counts.iter().sum::<usize>() + h.residual_small == n && h.total == n);
    report.check(
        "histogram conservation",
        conserved,
        format!("{n} boxes at every width"),
    );
    if let Some(path) = csv {
        write_file(path, &histogram_csv(&sweep))?;
        report.input("csv", path.display().to_string());
    }
    Ok(report)
}

pub fn recommend(
    src: &Source,
    width: u64,
    tau: f64,
    mut report: Report,
) -> Result<Report, Failure> {
    let dataset = load(src, &mut report)?;
    report.input("win", width);
    report.input("tau", F6(tau));
    let h: MatchHistogram = match_histogram(&dataset, width).map_err(Failure::input)?;
    let bounds = bounds_by_width(&dataset, width).map_err(Failure::input)?;
    report.histograms.push(HistogramRow::new(width, &h, bounds));

    let matched = match recommend_matched(&h, tau) {
        Ok(m) => m,
        Err(e @ MatchError::NoHeadReachesTau { .. }) => {
            return Err(Failure::with_report(EXIT_NO_HEAD, e, report))
        }
        Err(e) => return Err(Failure::input(e)),
    };
    let mut rec = Recommendations {
        tau: F6(tau),
        matched: Some(HeadChoice::new(
            matched.config.heads(),
            "matched_strategy",
            &h,
        )),
        below_tau_inside_span: matched
            .below_tau_inside_span
            .iter()
            .map(ToString::to_string)
            .collect(),
        cross_scale: None,
    };
    for hd in &matched.below_tau_inside_span {
        report.warnings.push(format!(
            "{hd} lies inside the matched span but its ratio {} is below tau",
            sig6(h.ratio(*hd))
        ));
    }
    match recommend_cross_scale(&matched.config) {
        Ok(pair) => {
            rec.cross_scale = Some(HeadChoice::new(pair.heads(), "cross_scale", &h));
            report.recommendations = Some(rec);
            Ok(report)
        }
        Err(e @ MatchError::SpanTooSmall(_)) => {
            report.recommendations = Some(rec);
            Err(Failure::with_report(EXIT_SPAN, e, report))
        }
        Err(e) => Err(Failure::input(e)),
    }
}

fn cost_row(arch: &ArchDescriptor, heads: &HeadConfig, width: u32) -> Result<CostRow, Failure> {
    let pruned = prune_to_heads(arch, heads).map_err(Failure::input)?;
    let c = pruned.mac_count(width).map_err(Failure::input)?;
    Ok(CostRow {
        arch: arch.name.clone(),
        heads: heads.to_string(),
        width_in: width,
        params: c.params,
        macs: c.macs,
        flops_2x: c.flops_2x,
        params_m: F6(c.params as f64 / 1e6),
        gmacs: F6(c.macs as f64 / 1e9),
    })
}

fn delta(a: u64, b: u64) -> i64 {
    a as i64 - b as i64
}

pub fn cost(
    arch: Option<&Path>,
    heads: &str,
    compare: Option<&str>,
    width: u32,
    mut report: Report,
) -> Result<Report, Failure> {
    let descriptor = match arch {
        Some(p) => load_descriptor(p).map_err(Failure::input)?,
        None => bundled_yolov5s(),
    };
    report.input(
        "arch",
        arch.map_or_else(
            || "bundled:yolov5s".to_string(),
            |p| p.display().to_string(),
        ),
    );
    report.input("win", width);
    let primary = HeadConfig::parse(heads).map_err(Failure::input)?;
    report.input("heads", primary.to_string());
    let row = cost_row(&descriptor, &primary, width)?;
    if let Some(base) = compare {
        let base = HeadConfig::parse(base).map_err(Failure::input)?;
        report.input("compare", base.to_string());
        let other = cost_row(&descriptor, &base, width)?;
        report.comparison = Some(Comparison {
            heads: row.heads.clone(),
            baseline: other.heads.clone(),
            params_delta: delta(row.params, other.params),
            macs_delta: delta(row.macs, other.macs),
            params_rel: F6(delta(row.params, other.params) as f64 / other.params as f64),
            macs_rel: F6(delta(row.macs, other.macs) as f64 / other.macs as f64),
        });
        report.costs.push(row);
        report.costs.push(other);
    } else {
        report.costs.push(row);
    }
    Ok(report)
}

fn offset_union(rates: &[usize]) -> BTreeSet<(isize, isize)> {
    let mut set = BTreeSet::from([(0, 0)]);
    for &r in rates {
        let r = r as isize;
        for a in [-r, 0, r] {
            for b in [-r, 0, r] {
                set.insert((a, b));
            }
        }
    }
    set
}

fn gradcheck(rng: &mut ChaCha8Rng) -> Result<GradCheck, Failure> {
    let mut total = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
    };
    for _ in 0..GRAD_CONFIGS {
        let size = rng.gen_range(3..=8);
        let (c_in, c_out) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let (s, d) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
        let bias = rng.gen_bool(0.5);
        let layer = ConvLayer::<f64>::random(rng, c_in, c_out, k, s, d, bias, (-1.0, 1.0))
            .map_err(Failure::input)?;
        let x = Tensor::random([1, c_in, size, size], -1.0, 1.0, rng);
        let y = layer.forward(&x).map_err(Failure::input)?;
        let g = Tensor::random(y.shape(), -1.0, 1.0, rng);
        total =
            total.merge(finite_difference_check(&layer, &x, &g, GRAD_EPS).map_err(Failure::input)?);
    }
    // the block's input gradient, kept small so the finite differences stay cheap
    let m = DilatedModule::<f64>::random(rng, BRANCH_DIVISOR, BRANCH_DIVISOR, true, (-1.0, 1.0))
        .map_err(Failure::input)?;
    let x = Tensor::random([1, BRANCH_DIVISOR, 10, 10], -1.0, 1.0, rng);
    let g = Tensor::random(x.shape(), -1.0, 1.0, rng);
    Ok(total.merge(finite_difference_input(&m, &x, &g, GRAD_EPS).map_err(Failure::input)?))
}

pub fn rfcheck(channels: usize, seed: u64, mut report: Report) -> Result<Report, Failure> {
    report.input("channels", channels);
    report.input("seed", seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // strictly positive weights so no tap cancels
    let module =
        DilatedModule::<f64>::random(&mut rng, channels, BRANCH_DIVISOR, false, (0.1, 1.0))
            .map_err(Failure::input)?;

    let g = gradcheck(&mut rng)?;
    report.check(
        "gradient check",
        g.passes(GRAD_TOL),
        format!(
            "{} entries, max relative error {:e} (tolerance {GRAD_TOL:e})",
            g.checked,
            sig6(g.max_rel_err)
        ),
    );

    let rf = module.receptive_field();
    let size = 2 * rf + 1;
    let centre = (size / 2, size / 2);
    let input_seed = rng.gen();
    let masks = gradient_support(&module, channels, (size, size), 0, centre, input_seed)
        .map_err(Failure::input)?;
    let extent = masks[0].bounding_extent();
    report.check(
        "receptive field",
        extent == (rf, rf),
        format!(
            "analytic {rf}, empirical bounding box {}x{}",
            extent.0, extent.1
        ),
    );

    let widest = module
        .branches()
        .iter()
        .max_by_key(|b| b.dilation())
        .expect("module has branches")
        .clone();
    let lone = gradient_support(&widest, channels, (size, size), 0, centre, input_seed)
        .map_err(Failure::input)?;
    let lone_expected = offset_union(&[widest.dilation()]);
    let lone_offsets: BTreeSet<_> = lone[0].offsets().into_iter().collect();
    report.check(
        "branch support",
        lone_offsets == lone_expected,
        format!(
            "dilation {} branch touches {} positions, expected {}",
            widest.dilation(),
            lone_offsets.len(),
            lone_expected.len()
        ),
    );

    let expected = offset_union(&MODULE_DILATIONS);
    let module_ok = masks
        .iter()
        .all(|m| m.offsets().into_iter().collect::<BTreeSet<_>>() == expected);
    let neighbours = offset_union(&[1]);
    let filled = neighbours
        .iter()
        .all(|&(r, c)| masks[0].contains_offset(r, c));
    report.check(
        "module support",
        module_ok && filled,
        format!(
            "module touches {} positions per channel, expected {}; unit neighbours {}",
            masks[0].count(),
            expected.len(),
            if filled { "present" } else { "missing" }
        ),
    );
    report.result(
        "support",
        serde_json::json!({
            "receptive_field": rf,
            "bounding_box": [extent.0, extent.1],
            "branch_dilation": widest.dilation(),
            "branch_count": lone_offsets.len(),
            "module_count": masks[0].count(),
            "module_params": module.param_count(),
        }),
    );
    Ok(report)
}
