use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use evcal::event_io::{write_events, EventFormat};
use evcal::features::write_correspondences_csv;
use evcal::refine::LmOptions;
use evcal::simulator::{simulate_events, simulate_views, ScenarioConfig};

use crate::config::{write_json, PipelineConfig};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const SCENARIO_FILE: &str = "scenario.json";
pub const CORRESPONDENCES_FILE: &str = "correspondences.csv";
pub const PIPELINE_FILE: &str = "pipeline.json";

pub fn event_file(out: &Path, view: usize, format: EventFormat) -> PathBuf {
    out.join(format!("events_view{view}.{}", format.extension()))
}

/// Writes events per view, noisy correspondences, the ground truth, the
/// effective scenario and a pipeline config that calibrates from the events.
pub fn run(cfg: &ScenarioConfig, out: &Path, format: EventFormat) -> Result<()> {
    cfg.ground_truth.validate()?;
    cfg.noise.validate()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let gt = &cfg.ground_truth;
    let mut inputs = Vec::with_capacity(gt.rotations.len());
    let mut total = 0;
    for view in 0..gt.rotations.len() {
        let stream = simulate_events(gt, &cfg.noise, view, cfg.duration_ms, cfg.seed)?;
        let path = event_file(out, view, format);
        write_events(&stream, &path, format)?;
        total += stream.len();
        inputs.push(path);
    }
    let views = simulate_views(gt, &cfg.noise, cfg.seed)?;
    let flat: Vec<_> = views.into_iter().flatten().collect();
    write_correspondences_csv(&out.join(CORRESPONDENCES_FILE), &flat)?;
    write_json(&out.join(GROUND_TRUTH_FILE), gt)?;
    write_json(&out.join(SCENARIO_FILE), cfg)?;

    let pipeline = PipelineConfig {
        inputs,
        format,
        sensor: gt.sensor,
        target: gt.target,
        lm: LmOptions::default(),
        out: out.join("calibration"),
        ..PipelineConfig::default()
    };
    write_json(&out.join(PIPELINE_FILE), &pipeline)?;
    println!(
        "{} views, {} events, {} correspondences written to {}",
        gt.rotations.len(),
        total,
        flat.len(),
        out.display()
    );
    Ok(())
}
