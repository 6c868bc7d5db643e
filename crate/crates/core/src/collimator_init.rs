//! Closed-form initialization under the spherical motion model.
//!
//! Inside the collimator the camera only rotates: its center sits at the
//! fixed target-frame position `c = (x, y, -r)` and view `i` is described by
//! a rotation `R_ep,i` alone. The plane-to-image homography is therefore
//!
//! ```text
//! H_i ∝ K · R_ep,iᵀ · [e1  e2  -c]
//! ```
//!
//! Two consequences are used here:
//!
//! * `H_iᵀ ω H_i ∝ [[1, 0, -x], [0, 1, -y], [-x, -y, x² + y² + r²]]` with
//!   `ω = K⁻ᵀK⁻¹`. The equal `(1,1)`/`(2,2)` entries and the zero `(1,2)` entry
//!   give two linear equations in the five unknowns of a zero-skew `ω`, so two
//!   views with distinct rotations fix `ω` up to scale.
//! * `H_i⁻¹ K Kᵀ H_i⁻ᵀ ∝ [[r² + x², xy, x], [xy, r² + y², y], [x, y, 1]]`,
//!   which yields `(x, y, r)` directly once `K` is known.
//!
//! The per-view rotation then follows from the first two columns of `K⁻¹H`.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::homography::Homography;
use crate::rotation;

/// Relative gap between the two smallest singular values of the IAC system
/// below which the motion is considered degenerate.
pub const DEGENERATE_GAP: f64 = 1e-8;

/// Relative spread of per-view radii that raises a diagnostic warning.
pub const RADIUS_SPREAD_WARNING: f64 = 0.10;

#[derive(Debug, Error, PartialEq)]
pub enum InitError {
    #[error("at least 2 views are required (a minimum of two images is sufficient), got {0}")]
    InsufficientViews(usize),
    #[error("invalid image of the absolute conic: {0}")]
    InvalidConic(String),
    #[error("degenerate motion: {0}")]
    DegenerateMotion(String),
    #[error("invalid spherical geometry in view {view}: {reason}")]
    InvalidGeometry { view: usize, reason: String },
    #[error("view {0}: target lies behind the camera for both homography signs")]
    Orientation(usize),
    #[error("view {0}: homography is not invertible")]
    Singular(usize),
}

/// Pinhole intrinsics with zero skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// `K⁻ᵀK⁻¹`.
    pub fn absolute_conic(&self) -> AbsoluteConicImage {
        let ki = self.inverse();
        AbsoluteConicImage {
            w: ki.transpose() * ki,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && [self.fx, self.fy, self.cx, self.cy]
                .iter()
                .all(|v| v.is_finite())
    }
}

/// Symmetric `ω ∝ K⁻ᵀK⁻¹` with `ω[0][1] = 0`, sign-normalized so that
/// `ω[0][0] > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsoluteConicImage {
    pub w: Matrix3<f64>,
}

impl AbsoluteConicImage {
    /// Builds `ω` from `(ω11, ω22, ω13, ω23, ω33)`.
    pub fn from_params(p: [f64; 5]) -> Self {
        let [w11, w22, w13, w23, w33] = p;
        Self {
            w: Matrix3::new(w11, 0.0, w13, 0.0, w22, w23, w13, w23, w33),
        }
    }

    pub fn is_positive_definite(&self) -> bool {
        let w = &self.w;
        let m1 = w[(0, 0)];
        let m2 = w[(0, 0)] * w[(1, 1)] - w[(0, 1)] * w[(1, 0)];
        let m3 = w.determinant();
        m1 > 0.0 && m2 > 0.0 && m3 > 0.0
    }
}

/// The shared collimator offset: camera center at `(x, y, -r)` in the target frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalOffset {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

impl SphericalOffset {
    pub fn new(x: f64, y: f64, r: f64) -> Self {
        Self { x, y, r }
    }

    /// `t_ep + t_eo = (x, y, -r)`.
    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, -self.r)
    }
}

/// Per-view rotations plus the shared offset.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalExtrinsics {
    /// `R_ep` per view. A target point `X` maps to camera coordinates
    /// `R_epᵀ (X - c)`.
    pub rotations: Vec<Matrix3<f64>>,
    pub offset: SphericalOffset,
}

/// Forward model: `H = K · R_epᵀ · [e1  e2  -c]`.
pub fn spherical_homography(
    k: &Intrinsics,
    r_ep: &Matrix3<f64>,
    offset: &SphericalOffset,
) -> Matrix3<f64> {
    let mut m = Matrix3::identity();
    m.set_column(2, &(-offset.center()));
    k.matrix() * r_ep.transpose() * m
}

fn constraint_row(hi: &Vector3<f64>, hj: &Vector3<f64>) -> [f64; 5] {
    [
        hi.x * hj.x,
        hi.y * hj.y,
        hi.x * hj.z + hi.z * hj.x,
        hi.y * hj.z + hi.z * hj.y,
        hi.z * hj.z,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IacDiagnostics {
    /// Singular values of the column-equilibrated system, descending.
    pub singular_values: Vec<f64>,
    /// `(σ₄ - σ₅) / σ₁`.
    pub gap: f64,
    /// The free solution was not positive definite and `ω11 = ω22` was imposed.
    #[serde(default)]
    pub square_pixel_fallback: bool,
}

/// Solves for `ω` from two equations per view.
pub fn solve_iac(
    homographies: &[Homography],
) -> Result<(AbsoluteConicImage, IacDiagnostics), InitError> {
    if homographies.len() < 2 {
        return Err(InitError::InsufficientViews(homographies.len()));
    }
    let rows = 2 * homographies.len();
    let mut a = DMatrix::<f64>::zeros(rows.max(5), 5);
    for (i, h) in homographies.iter().enumerate() {
        let m = h.matrix() / h.matrix().norm();
        let h1: Vector3<f64> = m.column(0).into();
        let h2: Vector3<f64> = m.column(1).into();
        let r12 = constraint_row(&h1, &h2);
        let r11 = constraint_row(&h1, &h1);
        let r22 = constraint_row(&h2, &h2);
        let diff: Vec<f64> = r11.iter().zip(&r22).map(|(a, b)| a - b).collect();
        for (k, row) in [r12.to_vec(), diff].into_iter().enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let n = if n > 0.0 { n } else { 1.0 };
            for (c, v) in row.iter().enumerate() {
                a[(2 * i + k, c)] = v / n;
            }
        }
    }
    let (p, sv) = null_vector(&a);
    let gap = if sv[0] > 0.0 { (sv[3] - sv[4]) / sv[0] } else { 0.0 };
    let mut diagnostics = IacDiagnostics {
        singular_values: sv,
        gap,
        square_pixel_fallback: false,
    };
    if gap < DEGENERATE_GAP {
        return Err(InitError::DegenerateMotion(format!(
            "conic system is rank deficient (relative singular value gap {gap:.3e}); \
             views need distinct rotations"
        )));
    }
    let w = AbsoluteConicImage::from_params(p.try_into().expect("five unknowns"));
    if w.is_positive_definite() {
        return Ok((w, diagnostics));
    }

    // Noise can push the free solution out of the positive-definite cone.
    // Retry with ω11 = ω22 (unit aspect ratio); refinement frees fy again.
    let mut square = DMatrix::<f64>::zeros(a.nrows(), 4);
    for r in 0..a.nrows() {
        square[(r, 0)] = a[(r, 0)] + a[(r, 1)];
        for c in 1..4 {
            square[(r, c)] = a[(r, c + 1)];
        }
    }
    let (q, _) = null_vector(&square);
    let w = AbsoluteConicImage::from_params([q[0], q[0], q[1], q[2], q[3]]);
    if !w.is_positive_definite() {
        return Err(InitError::InvalidConic(
            "solution is not positive definite (degenerate motion or bad homographies)".into(),
        ));
    }
    diagnostics.square_pixel_fallback = true;
    Ok((w, diagnostics))
}

/// Unit least-squares null vector of `a` (first entry non-negative) and the
/// descending singular values of the column-equilibrated system.
fn null_vector(a: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = a.ncols();
    // Column equilibration: the unknowns span many orders of magnitude at
    // long focal lengths (ω11 ~ 1/f², ω33 ~ 1).
    let scales: Vec<f64> = (0..n)
        .map(|c| {
            let s = a.column(c).norm();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let mut scaled = a.clone();
    for (c, s) in scales.iter().enumerate() {
        scaled.column_mut(c).scale_mut(1.0 / s);
    }
    let svd = scaled.svd(false, true);
    let v_t = svd.v_t.expect("svd v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let z = v_t.row(order[n - 1]);
    let mut p: Vec<f64> = (0..n).map(|c| z[c] / scales[c]).collect();
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sign = if p[0] < 0.0 { -1.0 } else { 1.0 };
    for v in &mut p {
        *v *= sign / norm;
    }
    (p, sv)
}

/// Closed-form zero-skew intrinsics from `ω`.
pub fn intrinsics_from_iac(w: &AbsoluteConicImage) -> Result<Intrinsics, InitError> {
    let m = &w.w;
    let (w11, w22, w13, w23, w33) = (m[(0, 0)], m[(1, 1)], m[(0, 2)], m[(1, 2)], m[(2, 2)]);
    if w11 <= 0.0 || w22 <= 0.0 {
        return Err(InitError::InvalidConic(format!(
            "non-positive diagonal (ω11 = {w11:e}, ω22 = {w22:e})"
        )));
    }
    let cx = -w13 / w11;
    let cy = -w23 / w22;
    let s = w33 - w13 * w13 / w11 - w23 * w23 / w22;
    if s <= 0.0 || !s.is_finite() {
        return Err(InitError::InvalidConic(format!("scale term {s:e} is not positive")));
    }
    Ok(Intrinsics {
        fx: (s / w11).sqrt(),
        fy: (s / w22).sqrt(),
        cx,
        cy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetDiagnostics {
    pub per_view: Vec<SphericalOffset>,
    /// `(max r_i - min r_i) / mean r_i`.
    pub radius_spread: f64,
    /// Set when the radius spread exceeds 10%.
    pub spread_warning: bool,
    /// Per view, `|Ā₁₂ - Ā₁₃·Ā₂₃|` (zero for consistent data).
    pub xy_residuals: Vec<f64>,
}

/// `H⁻¹ K Kᵀ H⁻ᵀ` normalized by its `(3,3)` entry.
pub fn normalized_inverse_form(h: &Matrix3<f64>, k: &Intrinsics) -> Option<Matrix3<f64>> {
    let hi = h.try_inverse()?;
    let km = k.matrix();
    let a = hi * km * km.transpose() * hi.transpose();
    if a[(2, 2)] == 0.0 {
        return None;
    }
    Some(a / a[(2, 2)])
}

/// Recovers `(x, y, r)` from the normalized inverse form of every view.
pub fn spherical_offset_from_views(
    homographies: &[Homography],
    k: &Intrinsics,
) -> Result<(SphericalOffset, OffsetDiagnostics), InitError> {
    if homographies.is_empty() {
        return Err(InitError::InsufficientViews(0));
    }
    let mut per_view = Vec::with_capacity(homographies.len());
    let mut r2s = Vec::with_capacity(homographies.len());
    let mut xy_residuals = Vec::with_capacity(homographies.len());
    for (view, h) in homographies.iter().enumerate() {
        let a = normalized_inverse_form(h.matrix(), k).ok_or(InitError::Singular(view))?;
        let x = a[(0, 2)];
        let y = a[(1, 2)];
        let r2 = ((a[(0, 0)] - x * x) + (a[(1, 1)] - y * y)) / 2.0;
        if r2 <= 0.0 || !r2.is_finite() {
            return Err(InitError::InvalidGeometry {
                view,
                reason: format!("r² = {r2:e} is not positive"),
            });
        }
        xy_residuals.push((a[(0, 1)] - x * y).abs());
        per_view.push(SphericalOffset::new(x, y, r2.sqrt()));
        r2s.push(r2);
    }
    let n = per_view.len() as f64;
    let offset = SphericalOffset {
        x: per_view.iter().map(|o| o.x).sum::<f64>() / n,
        y: per_view.iter().map(|o| o.y).sum::<f64>() / n,
        r: (r2s.iter().sum::<f64>() / n).sqrt(),
    };
    let rmax = per_view.iter().map(|o| o.r).fold(f64::MIN, f64::max);
    let rmin = per_view.iter().map(|o| o.r).fold(f64::MAX, f64::min);
    let mean_r = per_view.iter().map(|o| o.r).sum::<f64>() / n;
    let radius_spread = (rmax - rmin) / mean_r;
    Ok((
        offset,
        OffsetDiagnostics {
            per_view,
            radius_spread,
            spread_warning: radius_spread > RADIUS_SPREAD_WARNING,
            xy_residuals,
        },
    ))
}

/// Scale, orientation and translation read off one homography.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewDecomposition {
    /// World-to-camera rotation (`R_epᵀ`), orthonormalized.
    pub rotation: Matrix3<f64>,
    /// `λ⁻¹ K⁻¹ h₃` with the sign that puts the target in front of the camera.
    pub translation: Vector3<f64>,
    /// Signed scale `λ`.
    pub lambda: f64,
}

/// Decomposes `K⁻¹H = λ [r₁ r₂ t]`, resolving the sign of `λ` by requiring
/// positive depth at every model point.
pub fn decompose_view(
    h: &Homography,
    k: &Intrinsics,
    model_points: &[Vector2<f64>],
    view: usize,
) -> Result<ViewDecomposition, InitError> {
    let b = k.inverse() * h.matrix();
    let b1: Vector3<f64> = b.column(0).into();
    let b2: Vector3<f64> = b.column(1).into();
    let b3: Vector3<f64> = b.column(2).into();
    let lambda = (b1.norm() + b2.norm()) / 2.0;
    if lambda == 0.0 || !lambda.is_finite() {
        return Err(InitError::Singular(view));
    }
    for sign in [1.0, -1.0] {
        let l = sign * lambda;
        let (r1, r2, t) = (b1 / l, b2 / l, b3 / l);
        let in_front = model_points
            .iter()
            .all(|p| (r1 * p.x + r2 * p.y + t).z > 0.0);
        if in_front {
            let mut m = Matrix3::zeros();
            m.set_column(0, &r1);
            m.set_column(1, &r2);
            m.set_column(2, &r1.cross(&r2));
            return Ok(ViewDecomposition {
                rotation: rotation::nearest_rotation(&m),
                translation: t,
                lambda: l,
            });
        }
    }
    Err(InitError::Orientation(view))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewDiagnostics {
    /// Signed homography scale `λ_i`.
    pub lambda: f64,
    /// `‖t_i + R_ep,iᵀ c‖ / ‖c‖`: disagreement between the third homography
    /// column and the shared offset.
    pub translation_residual: f64,
}

/// Rotation `R_ep` of one view given intrinsics and offset.
pub fn rotation_from_view(
    h: &Homography,
    k: &Intrinsics,
    offset: &SphericalOffset,
    model_points: &[Vector2<f64>],
    view: usize,
) -> Result<(Matrix3<f64>, ViewDiagnostics), InitError> {
    let d = decompose_view(h, k, model_points, view)?;
    let c = offset.center();
    let residual = (d.translation + d.rotation * c).norm() / c.norm();
    Ok((
        d.rotation.transpose(),
        ViewDiagnostics {
            lambda: d.lambda,
            translation_residual: residual,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitDiagnostics {
    pub iac: IacDiagnostics,
    pub offset: OffsetDiagnostics,
    pub views: Vec<ViewDiagnostics>,
}

/// Full linear initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearInit {
    pub intrinsics: Intrinsics,
    pub extrinsics: SphericalExtrinsics,
    pub diagnostics: InitDiagnostics,
}

/// Intrinsics, offset and rotations from `N >= 2` homographies.
pub fn linear_init(
    homographies: &[Homography],
    model_points: &[Vector2<f64>],
) -> Result<LinearInit, InitError> {
    let (w, iac) = solve_iac(homographies)?;
    let k = intrinsics_from_iac(&w)?;
    let (offset, offset_diag) = spherical_offset_from_views(homographies, &k)?;
    let mut rotations = Vec::with_capacity(homographies.len());
    let mut views = Vec::with_capacity(homographies.len());
    for (i, h) in homographies.iter().enumerate() {
        let (r, d) = rotation_from_view(h, &k, &offset, model_points, i)?;
        rotations.push(r);
        views.push(d);
    }
    Ok(LinearInit {
        intrinsics: k,
        extrinsics: SphericalExtrinsics { rotations, offset },
        diagnostics: InitDiagnostics {
            iac,
            offset: offset_diag,
            views,
        },
    })
}

/// Free-motion initialization (Zhang): same intrinsics, then an independent
/// `(R_i, t_i)` per view.
pub fn free_motion_init(
    homographies: &[Homography],
    model_points: &[Vector2<f64>],
) -> Result<(Intrinsics, Vec<ViewDecomposition>), InitError> {
    let (w, _) = solve_iac(homographies)?;
    let k = intrinsics_from_iac(&w)?;
    let poses = homographies
        .iter()
        .enumerate()
        .map(|(i, h)| decompose_view(h, &k, model_points, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((k, poses))
}

/// JSON form of a [`LinearInit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub intrinsics: Intrinsics,
    pub offset: SphericalOffset,
    pub rotations: Vec<RotationRecord>,
    pub diagnostics: InitDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationRecord {
    /// `[w, x, y, z]`, `w >= 0`.
    pub quaternion: [f64; 4],
    /// Row-major 3×3.
    pub matrix: [f64; 9],
}

impl RotationRecord {
    pub fn from_matrix(r: &Matrix3<f64>) -> Self {
        let mut matrix = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                matrix[3 * i + j] = r[(i, j)];
            }
        }
        Self {
            quaternion: rotation::to_quaternion(r),
            matrix,
        }
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.matrix)
    }
}

impl From<&LinearInit> for InitReport {
    fn from(init: &LinearInit) -> Self {
        Self {
            intrinsics: init.intrinsics,
            offset: init.extrinsics.offset,
            rotations: init
                .extrinsics
                .rotations
                .iter()
                .map(RotationRecord::from_matrix)
                .collect(),
            diagnostics: init.diagnostics.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const PAPER_K: Intrinsics = Intrinsics {
        fx: 3345.06,
        fy: 3345.27,
        cx: 642.10,
        cy: 363.32,
    };

    /// Builds `H = λ K [r₁ r₂ t]` column by column, with `t = -R_epᵀ c`.
    fn oracle_h(k: &Intrinsics, r_ep: &Matrix3<f64>, o: &SphericalOffset, lambda: f64) -> Homography {
        let r_wc = r_ep.transpose();
        let t = -(r_wc * Vector3::new(o.x, o.y, -o.r));
        let km = k.matrix();
        let mut h = Matrix3::zeros();
        h.set_column(0, &(km * r_wc.column(0) * lambda));
        h.set_column(1, &(km * r_wc.column(1) * lambda));
        h.set_column(2, &(km * t * lambda));
        Homography::new(h).unwrap()
    }

    fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        rotation::exp(&(axis * rng.random_range(0.05..max_angle)))
    }

    fn grid() -> Vec<Vector2<f64>> {
        (0..49).map(|i| Vector2::new((i % 7) as f64, (i / 7) as f64)).collect()
    }

    fn rel_frob(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn identity_camera_gives_identity_conic() {
        let o = SphericalOffset::new(0.0, 0.0, 1.0);
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0);
        let hs: Vec<_> = [Vector3::new(0.2, 0.1, 0.0), Vector3::new(-0.1, 0.3, 0.2)]
            .iter()
            .map(|w| oracle_h(&k, &rotation::exp(w), &o, 1.0))
            .collect();
        let (w, _) = solve_iac(&hs).unwrap();
        let wn = w.w / w.w.norm();
        let id = Matrix3::<f64>::identity() / 3f64.sqrt();
        assert!((wn - id).amax() < 1e-9, "{wn}");
    }

    #[test]
    fn paper_intrinsics_conic_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let o = SphericalOffset::new(3.1, 2.8, 70.0);
        let hs: Vec<_> = (0..3)
            .map(|_| oracle_h(&PAPER_K, &random_rotation(&mut rng, 0.3), &o, rng.random_range(0.5..2.0)))
            .collect();
        let (w, _) = solve_iac(&hs).unwrap();
        let truth = PAPER_K.absolute_conic().w;
        let scale = truth[(2, 2)] / w.w[(2, 2)];
        assert!(rel_frob(&(w.w * scale), &truth) < 1e-8);
    }

    #[test]
    fn single_view_is_insufficient() {
        let h = oracle_h(&PAPER_K, &Matrix3::identity(), &SphericalOffset::new(0.0, 0.0, 5.0), 1.0);
        assert_eq!(solve_iac(&[h]).unwrap_err(), InitError::InsufficientViews(1));
    }

    #[test]
    fn repeated_rotation_is_degenerate() {
        let o = SphericalOffset::new(0.3, 0.2, 10.0);
        let r = rotation::exp(&Vector3::new(0.1, -0.2, 0.3));
        let hs: Vec<_> = (0..3).map(|i| oracle_h(&PAPER_K, &r, &o, 1.0 + i as f64)).collect();
        assert!(matches!(solve_iac(&hs), Err(InitError::DegenerateMotion(_))));
    }

    #[test]
    fn intrinsics_examples() {
        let k = intrinsics_from_iac(&AbsoluteConicImage { w: Matrix3::identity() }).unwrap();
        assert_eq!(k, Intrinsics::new(1.0, 1.0, 0.0, 0.0));

        let k = intrinsics_from_iac(&PAPER_K.absolute_conic()).unwrap();
        for (a, b) in [(k.fx, PAPER_K.fx), (k.fy, PAPER_K.fy), (k.cx, PAPER_K.cx), (k.cy, PAPER_K.cy)] {
            assert!((a - b).abs() / b < 1e-9);
        }

        let bad = AbsoluteConicImage {
            w: Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)),
        };
        assert!(matches!(intrinsics_from_iac(&bad), Err(InitError::InvalidConic(_))));
    }

    #[test]
    fn identity_configuration_offset_and_rotation() {
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0);
        let o = SphericalOffset::new(0.0, 0.0, 1.0);
        let h = oracle_h(&k, &Matrix3::identity(), &o, 1.0);
        assert!((h.matrix() - Matrix3::identity()).amax() < 1e-15);
        let a = normalized_inverse_form(h.matrix(), &k).unwrap();
        assert!((a - Matrix3::identity()).amax() < 1e-15);
        let (off, _) = spherical_offset_from_views(&[h, h], &k).unwrap();
        assert!((off.x).abs() < 1e-15 && (off.y).abs() < 1e-15 && (off.r - 1.0).abs() < 1e-15);
        let pts = [Vector2::new(0.0, 0.0), Vector2::new(0.5, 0.5)];
        let (r, d) = rotation_from_view(&h, &k, &o, &pts, 0).unwrap();
        assert!((r - Matrix3::identity()).norm() < 1e-10);
        assert!(d.translation_residual < 1e-12);
    }

    #[test]
    fn offset_recovery_from_exact_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = Intrinsics::new(800.0, 820.0, 320.0, 240.0);
        let o = SphericalOffset::new(0.2, -0.1, 5.0);
        let hs: Vec<_> = (0..4)
            .map(|_| oracle_h(&k, &random_rotation(&mut rng, 0.5), &o, rng.random_range(0.1..3.0)))
            .collect();
        let (got, diag) = spherical_offset_from_views(&hs, &k).unwrap();
        assert!((got.x - o.x).abs() < 1e-9);
        assert!((got.y - o.y).abs() < 1e-9);
        assert!((got.r - o.r).abs() < 1e-9);
        assert!(!diag.spread_warning);
        assert!(diag.xy_residuals.iter().all(|&r| r < 1e-9));
    }

    #[test]
    fn radius_spread_is_flagged() {
        let k = Intrinsics::new(800.0, 800.0, 320.0, 240.0);
        let h1 = oracle_h(&k, &Matrix3::identity(), &SphericalOffset::new(0.0, 0.0, 5.0), 1.0);
        let h2 = oracle_h(&k, &Matrix3::identity(), &SphericalOffset::new(0.0, 0.0, 6.0), 1.0);
        let (_, diag) = spherical_offset_from_views(&[h1, h2], &k).unwrap();
        assert!(diag.spread_warning);
    }

    #[test]
    fn rotation_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let o = SphericalOffset::new(3.0, 3.0, 60.0);
        for _ in 0..20 {
            let r0 = random_rotation(&mut rng, 60f64.to_radians());
            // negative scale exercises the sign resolution
            let h = oracle_h(&PAPER_K, &r0, &o, -rng.random_range(0.1..3.0));
            let (r, _) = rotation_from_view(&h, &PAPER_K, &o, &grid(), 0).unwrap();
            assert!((r - r0).norm() < 1e-9, "{}", (r - r0).norm());
        }
    }

    #[test]
    fn noisy_homography_still_gives_rotation() {
        let o = SphericalOffset::new(3.0, 3.0, 60.0);
        let r0 = rotation::exp(&Vector3::new(0.05, 0.02, 0.3));
        let mut m = *oracle_h(&PAPER_K, &r0, &o, 1.0).matrix();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in m.iter_mut() {
            *v *= 1.0 + rng.random_range(-1e-3..1e-3);
        }
        let (r, _) = rotation_from_view(&Homography::new(m).unwrap(), &PAPER_K, &o, &grid(), 0).unwrap();
        assert!(rotation::orthonormality_error(&r) < 1e-10);
        assert!(r.determinant() > 0.0);
    }

    #[test]
    fn target_behind_camera_for_both_signs() {
        let k = Intrinsics::new(1.0, 1.0, 0.0, 0.0);
        let h = Homography::new(Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)).unwrap();
        // points on both sides of the plane's vanishing line → mixed depth signs
        let h2 = Homography::new(Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.1)).unwrap();
        let pts = [Vector2::new(-1.0, 0.0), Vector2::new(1.0, 0.0)];
        assert!(decompose_view(&h, &k, &pts, 0).is_ok());
        assert_eq!(decompose_view(&h2, &k, &pts, 3).unwrap_err(), InitError::Orientation(3));
    }

    #[test]
    fn forward_model_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let o = SphericalOffset::new(1.0, -2.0, 30.0);
        let r = random_rotation(&mut rng, 1.0);
        let a = Homography::new(spherical_homography(&PAPER_K, &r, &o)).unwrap();
        let b = oracle_h(&PAPER_K, &r, &o, 2.5);
        assert!(rel_frob(a.matrix(), b.matrix()) < 1e-12);
    }

    #[test]
    fn linear_pipeline_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let o = SphericalOffset::new(2.7, 3.4, 65.0);
        let rots: Vec<_> = (0..3).map(|_| random_rotation(&mut rng, 0.25)).collect();
        let hs: Vec<_> = rots.iter().map(|r| oracle_h(&PAPER_K, r, &o, 1.0)).collect();
        let init = linear_init(&hs, &grid()).unwrap();
        let k = init.intrinsics;
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
        assert!(rel(k.fx, PAPER_K.fx) < 1e-6 && rel(k.fy, PAPER_K.fy) < 1e-6);
        assert!(rel(k.cx, PAPER_K.cx) < 1e-6 && rel(k.cy, PAPER_K.cy) < 1e-6);
        let got = init.extrinsics.offset;
        assert!(rel(got.x, o.x) < 1e-6 && rel(got.y, o.y) < 1e-6 && rel(got.r, o.r) < 1e-6);
        for (r, r0) in init.extrinsics.rotations.iter().zip(&rots) {
            assert!((r - r0).norm() < 1e-6);
        }
        let report = InitReport::from(&init);
        let json = serde_json::to_string(&report).unwrap();
        let back: InitReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
