//! Correspondences to calibrated parameters: homography, linear init, refinement.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::collimator_init::{free_motion_init, linear_init, InitError, InitReport};
use crate::features::Correspondence;
use crate::homography::{estimate_homography, Homography};
use crate::refine::{optimize, CalibrationMode, CalibrationReport, Distortion, LmOptions, ParameterVector};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub mode: CalibrationMode,
    pub lm: LmOptions,
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub homographies: Vec<Homography>,
    /// Linear initialization; `None` in free mode.
    pub init: Option<InitReport>,
    pub initial: ParameterVector,
    pub parameters: ParameterVector,
    pub report: CalibrationReport,
}

/// Distinct target-plane points seen in any view, in first-seen order.
fn model_points(views: &[Vec<Correspondence>]) -> Vec<Vector2<f64>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for c in views.iter().flatten() {
        if seen.insert(c.model_ix) {
            out.push(Vector2::new(c.model.x, c.model.y));
        }
    }
    out
}

/// Linear initialization for the requested mode, with zero distortion.
pub fn initialize(
    views: &[Vec<Correspondence>],
    mode: CalibrationMode,
) -> Result<(Vec<Homography>, Option<InitReport>, ParameterVector)> {
    if views.len() < 2 {
        return Err(InitError::InsufficientViews(views.len()).into());
    }
    let homs = views
        .iter()
        .map(|v| estimate_homography(v))
        .collect::<Result<Vec<_>, _>>()?;
    let pts = model_points(views);
    Ok(match mode {
        CalibrationMode::Spherical => {
            let init = linear_init(&homs, &pts)?;
            let theta = ParameterVector::spherical(
                init.intrinsics,
                Distortion::default(),
                &init.extrinsics.rotations,
                init.extrinsics.offset,
            );
            (homs, Some(InitReport::from(&init)), theta)
        }
        CalibrationMode::Free6dof => {
            let (k, poses) = free_motion_init(&homs, &pts)?;
            let poses: Vec<_> = poses.iter().map(|p| (p.rotation, p.translation)).collect();
            (homs, None, ParameterVector::free(k, Distortion::default(), &poses))
        }
    })
}

/// Runs homography estimation, linear initialization and refinement.
///
/// `views[i]` holds the correspondences of view `i`. A refinement that stops
/// without converging is returned as `Error::Refine(NonConvergence)` with the
/// partial report attached.
pub fn calibrate_correspondences(
    views: &[Vec<Correspondence>],
    options: &PipelineOptions,
) -> Result<CalibrationOutcome> {
    let (homographies, init, initial) = initialize(views, options.mode)?;
    let (parameters, report) = optimize(&initial, views, &options.lm)?;
    Ok(CalibrationOutcome {
        homographies,
        init,
        initial,
        parameters,
        report,
    })
}
