use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use evcal::event_io::{AccumMode, EventFormat, SensorSize, DEFAULT_WINDOW_US};
use evcal::features::{DetectionParams, TargetGeometry};
use evcal::refine::{CalibrationMode, LmOptions};
use serde::{Deserialize, Serialize};

/// Everything `accumulate`, `detect` and `calibrate` need. Written into every
/// report after command-line overrides are applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// One event file per view.
    pub inputs: Vec<PathBuf>,
    /// Pre-extracted correspondences; takes precedence over `inputs`.
    pub correspondences: Option<PathBuf>,
    pub format: EventFormat,
    pub sensor: SensorSize,
    pub target: TargetGeometry,
    pub window_us: u64,
    pub accumulation: AccumMode,
    pub detection: DetectionParams,
    pub mode: CalibrationMode,
    pub lm: LmOptions,
    pub out: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            correspondences: None,
            format: EventFormat::Csv,
            sensor: SensorSize::new(1280, 720),
            target: TargetGeometry::default(),
            window_us: DEFAULT_WINDOW_US,
            accumulation: AccumMode::Count,
            detection: DetectionParams::default(),
            mode: CalibrationMode::Spherical,
            lm: LmOptions::default(),
            out: PathBuf::from("evcal-out"),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => read_json(p),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.correspondences {
            Some(p) => ensure_exists(p)?,
            None => {
                if self.inputs.is_empty() {
                    bail!("no input: pass event files with --input or a correspondence CSV with --correspondences");
                }
                for p in &self.inputs {
                    ensure_exists(p)?;
                }
            }
        }
        if self.window_us == 0 {
            bail!("window_us must be positive");
        }
        if self.sensor.width == 0 || self.sensor.height == 0 {
            bail!("sensor size must be non-zero");
        }
        let t = &self.target;
        if t.rows < 2 || t.cols < 2 || !(t.spacing > 0.0 && t.spacing.is_finite()) {
            bail!("target needs at least 2x2 markers and a positive spacing");
        }
        let d = &self.detection;
        if !(d.max_area_fraction > 0.0 && d.max_area_fraction <= 1.0) {
            bail!("detection.max_area_fraction must lie in (0, 1]");
        }
        if let Some(delta) = self.lm.huber_delta {
            if !(delta > 0.0) {
                bail!("huber delta must be positive, got {delta}");
            }
        }
        if self.lm.max_iterations == 0 {
            bail!("lm.max_iterations must be positive");
        }
        if !(self.lm.initial_damping > 0.0 && self.lm.min_damping > 0.0)
            || self.lm.min_damping > self.lm.max_damping
        {
            bail!("lm damping bounds must be positive and ordered");
        }
        Ok(())
    }
}

pub fn ensure_exists(p: &Path) -> Result<()> {
    if !p.exists() {
        bail!("input file {} does not exist", p.display());
    }
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&s).unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: PipelineConfig =
            serde_json::from_str(r#"{"mode": "free6dof", "lm": {"huber_delta": 2.0}}"#).unwrap();
        assert_eq!(cfg.mode, CalibrationMode::Free6dof);
        assert_eq!(cfg.lm.huber_delta, Some(2.0));
        assert_eq!(cfg.lm.max_iterations, 100);
        assert_eq!(cfg.window_us, 33_000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"windw_us": 5}"#).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.csv");
        std::fs::write(&f, "").unwrap();
        let ok = PipelineConfig {
            correspondences: Some(f),
            ..Default::default()
        };
        ok.validate().unwrap();
        assert!(PipelineConfig::default().validate().is_err());
        let zero = PipelineConfig { window_us: 0, ..ok.clone() };
        assert!(zero.validate().is_err());
        let mut neg = ok.clone();
        neg.lm.huber_delta = Some(-1.0);
        assert!(neg.validate().is_err());
        let missing = PipelineConfig {
            correspondences: Some(dir.path().join("nope.csv")),
            ..Default::default()
        };
        assert!(missing.validate().unwrap_err().to_string().contains("does not exist"));
    }
}
