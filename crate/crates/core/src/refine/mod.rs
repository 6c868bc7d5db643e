//! Nonlinear refinement of all calibration parameters.
//!
//! The objective is `Σ_ij ρ(‖π(θ, X_ij) − x_ij‖)` with the Huber penalty
//! `ρ(x) = x²` for `|x| ≤ δ` and `2δ|x| − δ²` otherwise. It is minimized by
//! Levenberg-Marquardt with per-point IRLS weights and a Schur complement
//! over the per-view pose blocks.

mod jacobian;
mod lm;

pub use jacobian::{jacobian, point_jacobian, PointJacobian, MAX_POSE, MAX_SHARED};
pub use lm::{
    optimize, residuals, CalibrationReport, LmOptions, PoseRecord, Termination,
};

use std::fmt;
use std::str::FromStr;

use nalgebra::{DVector, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collimator_init::{Intrinsics, SphericalOffset};
use crate::rotation;

/// Depth below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("view {view}, point {point}: behind the camera (depth {depth:e})")]
    BehindCamera {
        view: usize,
        point: usize,
        depth: f64,
    },
    #[error("view {0}: every point has non-positive depth")]
    Divergence(usize),
    #[error("optimizer did not converge: normal equations stayed singular up to the maximum damping")]
    NonConvergence { report: Box<CalibrationReport> },
    #[error("need at least 2 views, got {0} (a minimum of two images is sufficient)")]
    InsufficientViews(usize),
    #[error("{points} points give {residuals} residuals for {params} parameters")]
    Underdetermined {
        points: usize,
        residuals: usize,
        params: usize,
    },
    #[error("parameter vector has {expected} views but {found} views of data were supplied")]
    ViewMismatch { expected: usize, found: usize },
    #[error("huber threshold must be positive, got {0}")]
    InvalidDelta(f64),
}

/// Radial distortion `d(ρ²) = 1 + k1 ρ² + k2 ρ⁴` on normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
}

impl Distortion {
    pub fn factor(&self, rho2: f64) -> f64 {
        1.0 + self.k1 * rho2 + self.k2 * rho2 * rho2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    /// Shared offset `(x, y, r)`, one rotation per view.
    #[default]
    Spherical,
    /// Independent rotation and translation per view.
    Free6dof,
}

impl FromStr for CalibrationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spherical" => Ok(CalibrationMode::Spherical),
            "free6dof" => Ok(CalibrationMode::Free6dof),
            other => Err(format!("unknown mode '{other}' (expected spherical|free6dof)")),
        }
    }
}

impl fmt::Display for CalibrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CalibrationMode::Spherical => "spherical",
            CalibrationMode::Free6dof => "free6dof",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TranslationModel {
    Spherical(SphericalOffset),
    /// Camera-frame translation per view: `X_c = R_i X + t_i`.
    Free(Vec<Vector3<f64>>),
}

/// All calibration parameters.
///
/// In spherical mode `rotations[i]` is `R_ep` (axis-angle) and a target point
/// maps to `R_epᵀ (X − (x, y, −r))`. In free mode it is the world-to-camera
/// rotation `R_i` and the point maps to `R_i X + t_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub intrinsics: Intrinsics,
    pub distortion: Distortion,
    pub rotations: Vec<Vector3<f64>>,
    pub translation: TranslationModel,
}

impl ParameterVector {
    pub fn spherical(
        intrinsics: Intrinsics,
        distortion: Distortion,
        rotations: &[Matrix3<f64>],
        offset: SphericalOffset,
    ) -> Self {
        Self {
            intrinsics,
            distortion,
            rotations: rotations.iter().map(rotation::log).collect(),
            translation: TranslationModel::Spherical(offset),
        }
    }

    pub fn free(
        intrinsics: Intrinsics,
        distortion: Distortion,
        poses: &[(Matrix3<f64>, Vector3<f64>)],
    ) -> Self {
        Self {
            intrinsics,
            distortion,
            rotations: poses.iter().map(|(r, _)| rotation::log(r)).collect(),
            translation: TranslationModel::Free(poses.iter().map(|(_, t)| *t).collect()),
        }
    }

    /// Same camera, expressed as free per-view poses.
    pub fn to_free(&self) -> Self {
        let poses: Vec<_> = (0..self.n_views()).map(|i| self.world_to_camera(i)).collect();
        Self::free(self.intrinsics, self.distortion, &poses)
    }

    pub fn mode(&self) -> CalibrationMode {
        match self.translation {
            TranslationModel::Spherical(_) => CalibrationMode::Spherical,
            TranslationModel::Free(_) => CalibrationMode::Free6dof,
        }
    }

    pub fn n_views(&self) -> usize {
        self.rotations.len()
    }

    pub fn offset(&self) -> Option<SphericalOffset> {
        match self.translation {
            TranslationModel::Spherical(o) => Some(o),
            TranslationModel::Free(_) => None,
        }
    }

    /// Number of parameters shared by all views.
    pub fn shared_len(&self) -> usize {
        match self.mode() {
            CalibrationMode::Spherical => 9,
            CalibrationMode::Free6dof => 6,
        }
    }

    /// Number of parameters per view.
    pub fn pose_len(&self) -> usize {
        match self.mode() {
            CalibrationMode::Spherical => 3,
            CalibrationMode::Free6dof => 6,
        }
    }

    pub fn len(&self) -> usize {
        self.shared_len() + self.n_views() * self.pose_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rotation_matrix(&self, view: usize) -> Matrix3<f64> {
        rotation::exp(&self.rotations[view])
    }

    /// `(R, t)` with `X_c = R X + t`.
    pub fn world_to_camera(&self, view: usize) -> (Matrix3<f64>, Vector3<f64>) {
        let r = self.rotation_matrix(view);
        match &self.translation {
            TranslationModel::Spherical(o) => {
                let rt = r.transpose();
                (rt, -(rt * o.center()))
            }
            TranslationModel::Free(ts) => (r, ts[view]),
        }
    }

    pub fn camera_point(&self, view: usize, x: &Vector3<f64>) -> Vector3<f64> {
        let r = self.rotation_matrix(view);
        match &self.translation {
            TranslationModel::Spherical(o) => r.transpose() * (x - o.center()),
            TranslationModel::Free(ts) => r * x + ts[view],
        }
    }

    /// Applies an increment laid out as `[shared | view 0 | view 1 | ...]`.
    /// Rotation increments compose on the right of `R_ep` (spherical) or on
    /// the left of `R_i` (free), matching the Jacobian.
    pub fn apply_update(&self, delta: &DVector<f64>) -> Self {
        assert_eq!(delta.len(), self.len());
        let k = &self.intrinsics;
        let d = &self.distortion;
        let intrinsics = Intrinsics::new(k.fx + delta[0], k.fy + delta[1], k.cx + delta[2], k.cy + delta[3]);
        let distortion = Distortion {
            k1: d.k1 + delta[4],
            k2: d.k2 + delta[5],
        };
        let ns = self.shared_len();
        let np = self.pose_len();
        let mut rotations = Vec::with_capacity(self.n_views());
        let translation = match &self.translation {
            TranslationModel::Spherical(o) => {
                for (i, w) in self.rotations.iter().enumerate() {
                    let dw = Vector3::new(delta[ns + np * i], delta[ns + np * i + 1], delta[ns + np * i + 2]);
                    rotations.push(rotation::log(&(rotation::exp(w) * rotation::exp(&dw))));
                }
                TranslationModel::Spherical(SphericalOffset::new(o.x + delta[6], o.y + delta[7], o.r + delta[8]))
            }
            TranslationModel::Free(ts) => {
                let mut out = Vec::with_capacity(ts.len());
                for (i, (w, t)) in self.rotations.iter().zip(ts).enumerate() {
                    let b = ns + np * i;
                    let dw = Vector3::new(delta[b], delta[b + 1], delta[b + 2]);
                    rotations.push(rotation::log(&(rotation::exp(&dw) * rotation::exp(w))));
                    out.push(t + Vector3::new(delta[b + 3], delta[b + 4], delta[b + 5]));
                }
                TranslationModel::Free(out)
            }
        };
        Self {
            intrinsics,
            distortion,
            rotations,
            translation,
        }
    }
}

/// Pinhole projection with radial distortion of a camera-frame point.
pub fn project_camera_point(k: &Intrinsics, d: &Distortion, xc: &Vector3<f64>) -> Vector2<f64> {
    let a = xc.x / xc.z;
    let b = xc.y / xc.z;
    let f = d.factor(a * a + b * b);
    Vector2::new(k.fx * f * a + k.cx, k.fy * f * b + k.cy)
}

/// `π(θ, X)` for one view.
pub fn project(
    theta: &ParameterVector,
    view: usize,
    x: &Vector3<f64>,
) -> Result<Vector2<f64>, RefineError> {
    let xc = theta.camera_point(view, x);
    if xc.z <= MIN_DEPTH {
        return Err(RefineError::BehindCamera {
            view,
            point: 0,
            depth: xc.z,
        });
    }
    Ok(project_camera_point(&theta.intrinsics, &theta.distortion, &xc))
}

/// Huber penalty on a residual magnitude.
pub fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        a * a
    } else {
        2.0 * delta * a - delta * delta
    }
}

/// `dρ/dx`.
pub fn huber_derivative(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        2.0 * x
    } else {
        2.0 * delta * x.signum()
    }
}

/// IRLS weight on the squared residual: `ρ(‖e‖) ≈ w ‖e‖²` to first order,
/// i.e. `1` inside the threshold and `δ / ‖e‖` outside.
pub fn huber_weight(norm: f64, delta: f64) -> f64 {
    if norm <= delta {
        1.0
    } else {
        delta / norm
    }
}

/// Signed reprojection error `π(θ, X_ij) − x_ij`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub view: usize,
    pub point: usize,
    pub du: f64,
    pub dv: f64,
}

impl Residual {
    pub fn norm(&self) -> f64 {
        self.du.hypot(self.dv)
    }
}
