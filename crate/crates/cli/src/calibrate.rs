use std::path::Path;

use anyhow::{Context, Result};
use evcal::collimator_init::{InitError, InitReport};
use evcal::event_io::{accumulate, read_events, AccumFrame};
use evcal::features::{
    detect_markers, group_by_view, order_grid, read_correspondences_csv, Correspondence, MarkerPoint,
};
use evcal::pipeline::{calibrate_correspondences, PipelineOptions};
use evcal::refine::{CalibrationReport, RefineError, Termination};
use serde::{Deserialize, Serialize};

use crate::config::{write_json, PipelineConfig};

pub const REPORT_FILE: &str = "report.json";
pub const RESIDUALS_FILE: &str = "residuals.csv";

/// Where one view's correspondences came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSource {
    pub source: String,
    pub markers: usize,
    pub used: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub config: PipelineConfig,
    pub views: Vec<ViewSource>,
    pub init: Option<InitReport>,
    pub report: CalibrationReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Done,
    NotConverged,
}

/// First accumulation window of an event file, or an empty frame.
pub fn first_frame(path: &Path, cfg: &PipelineConfig) -> Result<AccumFrame> {
    let stream = read_events(path, cfg.format, cfg.sensor)?;
    let frames = accumulate(&stream, cfg.window_us, cfg.accumulation)?;
    Ok(frames.into_iter().next().unwrap_or_else(|| {
        AccumFrame::zeros(cfg.sensor.width, cfg.sensor.height, 0, cfg.window_us)
    }))
}

/// Detected markers of one event file.
pub fn markers_from_events(path: &Path, cfg: &PipelineConfig) -> Result<Vec<MarkerPoint>> {
    let frame = first_frame(path, cfg)?;
    Ok(detect_markers(&frame, &cfg.detection))
}

/// Usable views, renumbered from zero, plus a record for every input.
pub fn load_views(cfg: &PipelineConfig) -> Result<(Vec<Vec<Correspondence>>, Vec<ViewSource>)> {
    if let Some(path) = &cfg.correspondences {
        let corrs = read_correspondences_csv(path)?;
        let mut views = group_by_view(&corrs);
        let sources = views
            .iter()
            .map(|v| ViewSource {
                source: format!("{}#view{}", path.display(), v[0].view),
                markers: v.len(),
                used: true,
                note: None,
            })
            .collect();
        for (i, v) in views.iter_mut().enumerate() {
            for c in v {
                c.view = i;
            }
        }
        return Ok((views, sources));
    }

    let mut views = Vec::new();
    let mut sources = Vec::new();
    for path in &cfg.inputs {
        let markers = markers_from_events(path, cfg)?;
        let mut src = ViewSource {
            source: path.display().to_string(),
            markers: markers.len(),
            used: false,
            note: None,
        };
        match order_grid(&markers, &cfg.target, views.len()) {
            Ok(c) => {
                src.used = true;
                views.push(c);
            }
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                src.note = Some(e.to_string());
            }
        }
        sources.push(src);
    }
    Ok((views, sources))
}

pub fn run(cfg: &PipelineConfig) -> Result<Status> {
    cfg.validate()?;
    let (views, sources) = load_views(cfg)?;
    if views.len() < 2 {
        return Err(InitError::InsufficientViews(views.len()).into());
    }
    std::fs::create_dir_all(&cfg.out)
        .with_context(|| format!("creating {}", cfg.out.display()))?;

    let opts = PipelineOptions {
        mode: cfg.mode,
        lm: cfg.lm,
    };
    let (init, report, status) = match calibrate_correspondences(&views, &opts) {
        Ok(out) => (out.init, out.report, Status::Done),
        Err(evcal::Error::Refine(RefineError::NonConvergence { report })) => {
            (None, *report, Status::NotConverged)
        }
        Err(e) => return Err(e.into()),
    };

    report.write_residuals_csv(&cfg.out.join(RESIDUALS_FILE))?;
    let file = ReportFile {
        config: cfg.clone(),
        views: sources,
        init,
        report,
    };
    write_json(&cfg.out.join(REPORT_FILE), &file)?;

    let r = &file.report;
    let k = r.intrinsics;
    println!(
        "{} mode, {} views, {} points: fx {:.4} fy {:.4} cx {:.4} cy {:.4} k1 {:.6} k2 {:.6}",
        r.mode,
        views.len(),
        r.point_count,
        k.fx,
        k.fy,
        k.cx,
        k.cy,
        r.distortion.k1,
        r.distortion.k2
    );
    println!(
        "reprojection error: mean {:.4} px, rms {:.4} px after {} iterations ({:?})",
        r.mean_error, r.rms_error, r.iterations, r.termination
    );
    match r.termination {
        Termination::MaxIterations => {
            eprintln!("warning: stopped at the iteration limit before the cost settled")
        }
        Termination::NonConvergence => {
            eprintln!("error: optimizer did not converge; report written to {}", cfg.out.display())
        }
        Termination::Converged => {}
    }
    Ok(status)
}
