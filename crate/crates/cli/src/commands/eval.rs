use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dynprompt::attention::{downsample_area, upsample_nearest};
use dynprompt::dpl::DplRun;
use dynprompt::eval::{iou_curve, IoUCurve, MetricReport, DEFAULT_IOU_STEPS};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{create_dir, load_run};
use crate::error::{CliError, CliResult};
use crate::render;

pub const REPORT_FILE: &str = "report.json";
pub const PLOT_FILE: &str = "iou_curves.png";

#[derive(Debug, Clone, clap::Args)]
pub struct EvalArgs {
    /// Tab-separated rows of run archive, prompt, noun and ground-truth mask
    /// PNG. Paths are relative to the table; `#` starts a comment.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Threshold sweep points.
    #[arg(long, default_value_t = DEFAULT_IOU_STEPS)]
    pub steps: usize,
    /// Archives loaded in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalRow {
    pub line: usize,
    pub archive: String,
    pub prompt: String,
    pub noun: String,
    pub gt_mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub line: usize,
    pub archive: String,
    pub noun: String,
    pub auc: f64,
    pub iou_at_half: f64,
    pub curve: IoUCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRow {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NounSummary {
    pub rows: usize,
    pub mean_auc: f64,
    pub mean_iou_at_half: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<RowResult>,
    pub per_noun: BTreeMap<String, NounSummary>,
    pub mean_auc: Option<f64>,
    pub skipped: Vec<SkippedRow>,
    /// Embedding metrics; empty without an embedder.
    pub metrics: MetricReport,
}

pub fn parse_table(text: &str) -> CliResult<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        if f.len() != 4 {
            return Err(CliError::usage(format!("line {}: expected 4 tab-separated fields, got {}", i + 1, f.len())));
        }
        rows.push(EvalRow {
            line: i + 1,
            archive: f[0].into(),
            prompt: f[1].into(),
            noun: f[2].into(),
            gt_mask: f[3].into(),
        });
    }
    Ok(rows)
}

/// Brings a square map onto the mask grid.
fn resample(map: &Array2<f64>, res: usize) -> CliResult<Array2<f64>> {
    Ok(match map.nrows() {
        r if r == res => map.clone(),
        r if r < res => upsample_nearest(map, res)?,
        _ => downsample_area(map, res)?,
    })
}

fn score(row: &EvalRow, run: &DplRun, base: &Path, steps: usize) -> Result<RowResult, String> {
    if run.prompt != row.prompt {
        return Err(format!("prompt {:?} does not match the run's {:?}", row.prompt, run.prompt));
    }
    let k = run.nouns.iter().position(|n| n == &row.noun).ok_or_else(|| format!("noun {:?} not in run", row.noun))?;
    let gt_path = base.join(&row.gt_mask);
    if !gt_path.is_file() {
        return Err(format!("ground-truth mask {} missing", row.gt_mask));
    }
    let gt = render::read_mask(&gt_path).map_err(|e| e.to_string())?;
    if gt.nrows() != gt.ncols() {
        return Err(format!("mask {} is not square", row.gt_mask));
    }
    let maps = run.mean_noun_maps().map_err(|e| e.to_string())?;
    let map = resample(&maps[k].map, gt.nrows()).map_err(|e| e.to_string())?;
    let curve = iou_curve(&map, &gt, steps).map_err(|e| e.to_string())?;
    Ok(RowResult {
        line: row.line,
        archive: row.archive.clone(),
        noun: row.noun.clone(),
        auc: curve.auc,
        iou_at_half: curve.at(0.5),
        curve,
    })
}

/// Loads each distinct archive once, spreading them over `jobs` threads.
fn load_archives(names: &[String], base: &Path, jobs: usize) -> BTreeMap<String, Result<DplRun, String>> {
    let jobs = jobs.clamp(1, names.len().max(1));
    let chunk = names.len().div_ceil(jobs).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = names
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|n| (n.clone(), load_run(&base.join(n)).map(|l| l.run).map_err(|e| e.to_string())))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("loader thread panicked")).collect()
    })
}

pub fn evaluate(rows: &[EvalRow], base: &Path, steps: usize, jobs: usize) -> CliResult<EvalReport> {
    if steps < 2 {
        return Err(CliError::usage("--steps must be at least 2"));
    }
    let mut names: Vec<String> = rows.iter().map(|r| r.archive.clone()).collect();
    names.sort();
    names.dedup();
    let runs = load_archives(&names, base, jobs);

    let (mut results, mut skipped) = (Vec::new(), Vec::new());
    for row in rows {
        let outcome = match &runs[&row.archive] {
            Ok(run) => score(row, run, base, steps),
            Err(e) => Err(e.clone()),
        };
        match outcome {
            Ok(r) => results.push(r),
            Err(reason) => {
                log::warn!("skipping line {}: {reason}", row.line);
                skipped.push(SkippedRow { line: row.line, reason });
            }
        }
    }

    let mut per_noun: BTreeMap<String, NounSummary> = BTreeMap::new();
    for r in &results {
        let e = per_noun.entry(r.noun.clone()).or_insert(NounSummary { rows: 0, mean_auc: 0.0, mean_iou_at_half: 0.0 });
        e.rows += 1;
        e.mean_auc += r.auc;
        e.mean_iou_at_half += r.iou_at_half;
    }
    for s in per_noun.values_mut() {
        s.mean_auc /= s.rows as f64;
        s.mean_iou_at_half /= s.rows as f64;
    }
    let mean_auc = (!results.is_empty()).then(|| results.iter().map(|r| r.auc).sum::<f64>() / results.len() as f64);
    Ok(EvalReport { rows: results, per_noun, mean_auc, skipped, metrics: MetricReport::default() })
}

pub fn run(args: &EvalArgs) -> CliResult<EvalReport> {
    let text = std::fs::read_to_string(&args.manifest)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", args.manifest.display())))?;
    let rows = parse_table(&text)?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let report = evaluate(&rows, base, args.steps, args.jobs)?;
    create_dir(&args.out)?;
    std::fs::write(args.out.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    let curves: Vec<IoUCurve> = report.rows.iter().map(|r| r.curve.clone()).collect();
    render::save(&render::plot_curves(&curves, 256), &args.out.join(PLOT_FILE))?;
    Ok(report)
}
