use std::collections::BTreeMap;
use std::fmt::Write as _;

use headplan::headmatch::{Head, MatchHistogram};
use headplan::LoadSummary;
use serde::{Serialize, Serializer};
use serde_json::Value;

/// A float emitted with six significant digits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F6(pub f64);

pub fn sig6(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.5e}").parse().unwrap_or(v)
}

impl Serialize for F6 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(sig6(self.0))
    }
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Vec<String>,
    pub inputs: BTreeMap<&'static str, Value>,
    pub results: BTreeMap<&'static str, Value>,
    pub histograms: Vec<HistogramRow>,
    pub recommendations: Option<Recommendations>,
    pub costs: Vec<CostRow>,
    pub comparison: Option<Comparison>,
    pub verification: Vec<Check>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn new(command: Vec<String>) -> Self {
        Self {
            tool: "headplan",
            version: env!("CARGO_PKG_VERSION"),
            command,
            inputs: BTreeMap::new(),
            results: BTreeMap::new(),
            histograms: Vec::new(),
            recommendations: None,
            costs: Vec::new(),
            comparison: None,
            verification: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn input(&mut self, key: &'static str, value: impl Serialize) {
        self.inputs.insert(
            key,
            serde_json::to_value(value).expect("serializable input"),
        );
    }

    pub fn result(&mut self, key: &'static str, value: impl Serialize) {
        self.results.insert(
            key,
            serde_json::to_value(value).expect("serializable result"),
        );
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.verification.push(Check {
            name: name.to_string(),
            status: if passed { "PASS" } else { "FAIL" },
            detail,
        });
    }

    pub fn all_passed(&self) -> bool {
        self.verification.iter().all(|c| c.status == "PASS")
    }

    pub fn note_load(&mut self, s: &LoadSummary) {
        let items = [
            (s.skipped_no_box, "labels without a box skipped"),
            (s.filtered, "boxes outside the category allow-list filtered"),
            (s.clamped, "boxes clamped to the image"),
            (s.dropped_degenerate, "degenerate boxes dropped"),
        ];
        for (n, what) in items {
            if n > 0 {
                self.warnings.push(format!("{n} {what}"));
            }
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Serialize)]
pub struct HistogramRow {
    pub width_in: u64,
    /// Lower area bounds per head, keyed by original image width.
    pub bounds: BTreeMap<u64, [u64; 5]>,
    pub counts: BTreeMap<String, usize>,
    pub ratios: BTreeMap<String, F6>,
    pub residual_small: usize,
    pub residual_ratio: F6,
    pub total: usize,
}

impl HistogramRow {
    pub fn new(width_in: u64, h: &MatchHistogram, bounds: BTreeMap<u64, [u64; 5]>) -> Self {
        Self {
            width_in,
            bounds,
            counts: Head::ALL
                .iter()
                .map(|&hd| (hd.to_string(), h.count(hd)))
                .collect(),
            ratios: Head::ALL
                .iter()
                .map(|&hd| (hd.to_string(), F6(h.ratio(hd))))
                .collect(),
            residual_small: h.residual_small,
            residual_ratio: F6(h.residual_ratio()),
            total: h.total,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct HeadChoice {
    pub heads: String,
    pub rationale: &'static str,
    pub ratios: BTreeMap<String, F6>,
}

impl HeadChoice {
    pub fn new(heads: &[Head], rationale: &'static str, h: &MatchHistogram) -> Self {
        Self {
            heads: heads
                .iter()
                .map(Head::to_string)
                .collect::<Vec<_>>()
                .join(","),
            rationale,
            ratios: heads
                .iter()
                .map(|&hd| (hd.to_string(), F6(h.ratio(hd))))
                .collect(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Recommendations {
    pub tau: F6,
    pub matched: Option<HeadChoice>,
    pub below_tau_inside_span: Vec<String>,
    pub cross_scale: Option<HeadChoice>,
}

#[derive(Debug, Serialize)]
pub struct CostRow {
    pub arch: String,
    pub heads: String,
    pub width_in: u32,
    pub params: u64,
    pub macs: u64,
    pub flops_2x: u64,
    pub params_m: F6,
    pub gmacs: F6,
}

#[derive(Debug, Serialize)]
pub struct Comparison {
    pub heads: String,
    pub baseline: String,
    pub params_delta: i64,
    pub macs_delta: i64,
    pub params_rel: F6,
    pub macs_rel: F6,
}

#[derive(Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub status: &'static str,
    pub detail: String,
}

/// Plot-ready rows: one per head plus the residual bucket, per input width.
pub fn histogram_csv(rows: &[(u64, MatchHistogram)]) -> String {
    let mut out = String::from("width_in,head,count,ratio\n");
    for (w, h) in rows {
        for hd in Head::ALL {
            let _ = writeln!(out, "{w},{hd},{},{}", h.count(hd), sig6(h.ratio(hd)));
        }
        let _ = writeln!(
            out,
            "{w},residual,{},{}",
            h.residual_small,
            sig6(h.residual_ratio())
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(1.0 / 3.0), 0.333333);
        assert_eq!(sig6(2.0 / 3.0 * 1e9), 666_667_000.0);
        assert_eq!(sig6(0.0), 0.0);
        assert_eq!(serde_json::to_string(&F6(0.1 + 0.2)).unwrap(), "0.3");
    }

    #[test]
    fn csv_has_six_rows_per_width() {
        let h = MatchHistogram::from_counts([1, 2, 3, 4, 5], 5);
        let csv = histogram_csv(&[(416, h), (800, h)]);
        assert_eq!(csv.lines().count(), 13);
        assert!(csv.contains("416,residual,5,0.25\n"));
    }
}
