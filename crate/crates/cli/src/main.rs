//! `headplan` command-line front end.
//!
//! Exit status: 0 success, 1 verification failure, 2 usage or input error,
//! 3 no head reaches the matching threshold, 4 matched span too small for a
//! cross-scale pair.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use headplan::annotations::BDD_DEFAULT_SIZE;
use headplan::headmatch::DEFAULT_TAU;

use commands::{Failure, Source, EXIT_INPUT, EXIT_VERIFY};
use report::Report;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnnFormat {
    Bdd,
    Coco,
}

impl AnnFormat {
    pub fn name(self) -> &'static str {
        match self {
            AnnFormat::Bdd => "bdd",
            AnnFormat::Coco => "coco",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl FromStr for ImageSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WxH, got '{s}'"))?;
        let parse = |v: &str| v.trim().parse::<u32>().ok().filter(|&n| n > 0);
        match (parse(w), parse(h)) {
            (Some(width), Some(height)) => Ok(Self { width, height }),
            _ => Err(format!("expected positive WxH, got '{s}'")),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "headplan",
    version,
    about = "Detection-head planning from object size statistics"
)]
struct Cli {
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct AnnArgs {
    /// Annotation file.
    #[arg(long)]
    ann: PathBuf,
    #[arg(long, value_enum)]
    format: AnnFormat,
    /// Category allow-list.
    #[arg(long, value_delimiter = ',')]
    categories: Option<Vec<String>>,
    /// Image size assumed for BDD labels, which carry none.
    #[arg(long, default_value_t = ImageSize { width: BDD_DEFAULT_SIZE.0, height: BDD_DEFAULT_SIZE.1 })]
    image_size: ImageSize,
}

impl std::fmt::Display for ImageSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl AnnArgs {
    fn source(&self) -> Source<'_> {
        Source {
            ann: &self.ann,
            format: self.format,
            categories: self.categories.as_deref(),
            image_size: self.image_size,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-head match histograms over a sweep of input widths.
    Analyze {
        #[command(flatten)]
        ann: AnnArgs,
        #[arg(long, value_delimiter = ',', default_value = "416,800,1504")]
        win: Vec<u64>,
        /// Also write plot-ready CSV rows here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Matched-strategy and cross-scale head configurations at one width.
    Recommend {
        #[command(flatten)]
        ann: AnnArgs,
        #[arg(long, default_value_t = 800)]
        win: u64,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
    },
    /// Parameter and MAC counts of a descriptor pruned to a head set.
    Cost {
        /// Architecture descriptor; the bundled YOLOv5-S one when omitted.
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long)]
        heads: String,
        /// Second head set to report deltas against.
        #[arg(long)]
        compare: Option<String>,
        #[arg(long, default_value_t = 416)]
        win: u32,
    },
    /// Gradient, receptive-field and support checks of the dilated block.
    Rfcheck {
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn echo() -> Vec<String> {
    std::iter::once("headplan".to_string())
        .chain(std::env::args().skip(1))
        .collect()
}

fn run(cli: &Cli) -> Result<Report, Failure> {
    let report = Report::new(echo());
    match &cli.command {
        Command::Analyze { ann, win, csv } => {
            commands::analyze(&ann.source(), win, csv.as_ref(), report)
        }
        Command::Recommend { ann, win, tau } => {
            commands::recommend(&ann.source(), *win, *tau, report)
        }
        Command::Cost {
            arch,
            heads,
            compare,
            win,
        } => commands::cost(arch.as_deref(), heads, compare.as_deref(), *win, report),
        Command::Rfcheck { channels, seed } => commands::rfcheck(*channels, *seed, report),
    }
}

fn emit(cli: &Cli, report: &Report) -> Result<(), Failure> {
    let text = report.to_json();
    match &cli.out {
        Some(path) => std::fs::write(path, text).map_err(|e| Failure {
            code: EXIT_INPUT,
            message: format!("cannot write {}: {e}", path.display()),
            report: None,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = run(&cli).and_then(|report| {
        emit(&cli, &report)?;
        Ok(report)
    });
    let code = match outcome {
        Ok(report) if report.all_passed() => 0,
        Ok(report) => {
            for c in report.verification.iter().filter(|c| c.status != "PASS") {
                eprintln!("verification failed: {}: {}", c.name, c.detail);
            }
            EXIT_VERIFY
        }
        Err(failure) => {
            if let Some(report) = &failure.report {
                if let Err(e) = emit(&cli, report) {
                    eprintln!("error: {}", e.message);
                }
            }
            eprintln!("error: {}", failure.message);
            failure.code
        }
    };
    ExitCode::from(code as u8)
}
