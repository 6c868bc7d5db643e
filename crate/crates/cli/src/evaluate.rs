use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use evcal::refine::CalibrationMode;
use evcal::simulator::GroundTruth;

use crate::calibrate::ReportFile;
use crate::config::read_json;

pub const COLUMNS: [&str; 7] = ["fx", "fy", "cx", "cy", "k1", "k2", "reproj_error"];

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub label: String,
    pub mode: Option<CalibrationMode>,
    /// fx, fy, cx, cy, k1, k2.
    pub params: [f64; 6],
    /// Mean reprojection error in pixels.
    pub reproj_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub truth: Row,
    pub rows: Vec<Row>,
}

impl Comparison {
    pub fn abs_delta(&self, row: &Row) -> [f64; 6] {
        std::array::from_fn(|i| row.params[i] - self.truth.params[i])
    }

    /// Relative deltas; `NaN` where the true value is zero.
    pub fn rel_delta(&self, row: &Row) -> [f64; 6] {
        std::array::from_fn(|i| {
            let t = self.truth.params[i];
            if t == 0.0 {
                f64::NAN
            } else {
                (row.params[i] - t) / t.abs()
            }
        })
    }
}

fn truth_row(gt: &GroundTruth) -> Row {
    let k = gt.intrinsics;
    Row {
        label: "ground truth".into(),
        mode: None,
        params: [k.fx, k.fy, k.cx, k.cy, gt.distortion.k1, gt.distortion.k2],
        reproj_error: None,
    }
}

pub fn compare(gt: &GroundTruth, reports: &[(String, ReportFile)]) -> Result<Comparison> {
    let mut rows = Vec::with_capacity(reports.len());
    for (label, file) in reports {
        let r = &file.report;
        if r.poses.len() != gt.rotations.len() {
            bail!(
                "model mismatch: {label} has {} views but the ground truth has {}",
                r.poses.len(),
                gt.rotations.len()
            );
        }
        let k = r.intrinsics;
        rows.push(Row {
            label: label.clone(),
            mode: Some(r.mode),
            params: [k.fx, k.fy, k.cx, k.cy, r.distortion.k1, r.distortion.k2],
            reproj_error: Some(r.mean_error),
        });
    }
    Ok(Comparison {
        truth: truth_row(gt),
        rows,
    })
}

fn fmt_params(p: &[f64; 6]) -> [String; 6] {
    [
        format!("{:.4}", p[0]),
        format!("{:.4}", p[1]),
        format!("{:.4}", p[2]),
        format!("{:.4}", p[3]),
        format!("{:.6}", p[4]),
        format!("{:.6}", p[5]),
    ]
}

fn fmt_rel(p: &[f64; 6]) -> [String; 6] {
    p.map(|v| if v.is_nan() { "-".to_string() } else { format!("{v:+.3e}") })
}

/// Text table: one block of values, then absolute and relative deltas.
pub fn render(cmp: &Comparison) -> String {
    let mut lines: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["method".to_string()];
    header.extend(COLUMNS.iter().map(|s| s.to_string()));
    lines.push(header);
    let label = |r: &Row| match r.mode {
        Some(m) => format!("{} ({m})", r.label),
        None => r.label.clone(),
    };
    for r in std::iter::once(&cmp.truth).chain(&cmp.rows) {
        let mut l = vec![label(r)];
        l.extend(fmt_params(&r.params));
        l.push(r.reproj_error.map_or("-".into(), |e| format!("{e:.4}")));
        lines.push(l);
    }
    for r in &cmp.rows {
        let mut l = vec![format!("{} abs delta", label(r))];
        l.extend(fmt_params(&cmp.abs_delta(r)));
        l.push("-".into());
        lines.push(l);
        let mut l = vec![format!("{} rel delta", label(r))];
        l.extend(fmt_rel(&cmp.rel_delta(r)));
        l.push("-".into());
        lines.push(l);
    }
    let widths: Vec<usize> = (0..lines[0].len())
        .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for l in &lines {
        let cells: Vec<String> = l
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i == 0 {
                    format!("{s:<w$}", w = widths[i])
                } else {
                    format!("{s:>w$}", w = widths[i])
                }
            })
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
    }
    out
}

/// Machine-readable form of the same table.
pub fn to_csv(cmp: &Comparison) -> String {
    let mut out = String::from("method,mode,kind,fx,fy,cx,cy,k1,k2,reproj_error\n");
    let mode = |r: &Row| r.mode.map_or(String::new(), |m| m.to_string());
    let join = |p: &[f64; 6]| p.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    let err = |r: &Row| r.reproj_error.map_or(String::new(), |e| e.to_string());
    for r in std::iter::once(&cmp.truth).chain(&cmp.rows) {
        writeln!(out, "{},{},value,{},{}", r.label, mode(r), join(&r.params), err(r)).unwrap();
    }
    for r in &cmp.rows {
        writeln!(out, "{},{},abs_delta,{},", r.label, mode(r), join(&cmp.abs_delta(r))).unwrap();
        writeln!(out, "{},{},rel_delta,{},", r.label, mode(r), join(&cmp.rel_delta(r))).unwrap();
    }
    out
}

fn label_for(path: &Path, taken: &[(String, ReportFile)]) -> String {
    let stem = path
        .parent()
        .and_then(|p| p.file_name())
        .filter(|_| path.file_name().is_some_and(|n| n == "report.json"))
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    if taken.iter().any(|(l, _)| *l == stem) {
        path.display().to_string()
    } else {
        stem
    }
}

/// Returns the rendered table; also writes `evaluation.csv` under `out`.
pub fn run(ground_truth: &Path, reports: &[PathBuf], out: Option<&Path>) -> Result<String> {
    let gt: GroundTruth = read_json(ground_truth)?;
    let mut loaded: Vec<(String, ReportFile)> = Vec::new();
    for p in reports {
        let file: ReportFile = read_json(p)?;
        let label = label_for(p, &loaded);
        loaded.push((label, file));
    }
    let cmp = compare(&gt, &loaded)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("evaluation.csv");
        std::fs::write(&path, to_csv(&cmp)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(render(&cmp))
}
