use nalgebra::{DMatrix, Matrix2x3, SMatrix, Vector2, Vector3};

use super::{ParameterVector, RefineError, TranslationModel, MIN_DEPTH};
use crate::features::Correspondence;
use crate::rotation::skew;

/// Upper bound on shared parameters (`fx, fy, cx, cy, k1, k2, x, y, r`).
pub const MAX_SHARED: usize = 9;
/// Upper bound on per-view parameters (`ω`, plus `t` in free mode).
pub const MAX_POSE: usize = 6;

/// Residual and Jacobian blocks of one observation. Only the first
/// `shared_len()` / `pose_len()` columns are meaningful.
#[derive(Debug, Clone, Copy)]
pub struct PointJacobian {
    pub residual: Vector2<f64>,
    pub shared: SMatrix<f64, 2, MAX_SHARED>,
    pub pose: SMatrix<f64, 2, MAX_POSE>,
}

/// Analytic derivatives of `π(θ, X) − x` for one correspondence.
pub fn point_jacobian(
    theta: &ParameterVector,
    c: &Correspondence,
    view: usize,
    point: usize,
) -> Result<PointJacobian, RefineError> {
    let k = &theta.intrinsics;
    let d = &theta.distortion;
    let r = theta.rotation_matrix(view);

    let (xc, dxc_dw) = match &theta.translation {
        TranslationModel::Spherical(o) => {
            let p = r.transpose() * (c.model - o.center());
            (p, skew(&p))
        }
        TranslationModel::Free(ts) => {
            let rx = r * c.model;
            (rx + ts[view], -skew(&rx))
        }
    };
    if xc.z <= MIN_DEPTH {
        return Err(RefineError::BehindCamera {
            view,
            point,
            depth: xc.z,
        });
    }

    let iz = 1.0 / xc.z;
    let a = xc.x * iz;
    let b = xc.y * iz;
    let rho2 = a * a + b * b;
    let rho4 = rho2 * rho2;
    let dist = d.factor(rho2);
    let ddist = d.k1 + 2.0 * d.k2 * rho2; // ∂dist/∂ρ²

    let residual = Vector2::new(k.fx * dist * a + k.cx - c.u, k.fy * dist * b + k.cy - c.v);

    // ∂(u,v)/∂(a,b)
    let duv_dab = nalgebra::Matrix2::new(
        k.fx * (dist + 2.0 * a * a * ddist),
        k.fx * 2.0 * a * b * ddist,
        k.fy * 2.0 * a * b * ddist,
        k.fy * (dist + 2.0 * b * b * ddist),
    );
    let dab_dxc = Matrix2x3::new(iz, 0.0, -a * iz, 0.0, iz, -b * iz);
    let duv_dxc = duv_dab * dab_dxc;

    let mut shared = SMatrix::<f64, 2, MAX_SHARED>::zeros();
    shared[(0, 0)] = dist * a;
    shared[(1, 1)] = dist * b;
    shared[(0, 2)] = 1.0;
    shared[(1, 3)] = 1.0;
    shared[(0, 4)] = k.fx * a * rho2;
    shared[(1, 4)] = k.fy * b * rho2;
    shared[(0, 5)] = k.fx * a * rho4;
    shared[(1, 5)] = k.fy * b * rho4;

    let mut pose = SMatrix::<f64, 2, MAX_POSE>::zeros();
    pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&(duv_dxc * dxc_dw));

    match &theta.translation {
        TranslationModel::Spherical(_) => {
            // X_c = Rᵀ (X − (x, y, −r))
            let rt = r.transpose();
            let dx: Vector3<f64> = -rt.column(0);
            let dy: Vector3<f64> = -rt.column(1);
            let dr: Vector3<f64> = rt.column(2).into();
            shared.set_column(6, &(duv_dxc * dx));
            shared.set_column(7, &(duv_dxc * dy));
            shared.set_column(8, &(duv_dxc * dr));
        }
        TranslationModel::Free(_) => {
            pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&duv_dxc);
        }
    }

    Ok(PointJacobian {
        residual,
        shared,
        pose,
    })
}

/// Dense Jacobian of all residuals, rows ordered view by view, `(du, dv)` per
/// point; columns laid out as `[shared | view 0 | view 1 | ...]`.
pub fn jacobian(
    theta: &ParameterVector,
    views: &[Vec<Correspondence>],
) -> Result<DMatrix<f64>, RefineError> {
    let n_res: usize = views.iter().map(|v| 2 * v.len()).sum();
    let ns = theta.shared_len();
    let np = theta.pose_len();
    let mut j = DMatrix::zeros(n_res, theta.len());
    let mut row = 0;
    for (vi, corrs) in views.iter().enumerate() {
        for (pi, c) in corrs.iter().enumerate() {
            let pj = point_jacobian(theta, c, vi, pi)?;
            j.view_mut((row, 0), (2, ns)).copy_from(&pj.shared.columns(0, ns));
            j.view_mut((row, ns + np * vi), (2, np))
                .copy_from(&pj.pose.columns(0, np));
            row += 2;
        }
    }
    Ok(j)
}
