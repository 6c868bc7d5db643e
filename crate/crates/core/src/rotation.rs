//! SO(3) helpers shared by initialization, refinement and simulation.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

/// Skew-symmetric cross-product matrix: `skew(a) * b == a × b`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map from an axis-angle vector.
#[inline]
pub fn exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*omega).into_inner()
}

/// Logarithm map, magnitude in `[0, π]`.
#[inline]
pub fn log(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Nearest rotation in Frobenius norm: `U Vᵀ` with the sign of the last
/// singular direction flipped when needed so that `det = +1`.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

/// Angle in radians of `a⁻¹ b`.
pub fn geodesic_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    log(&(a.transpose() * b)).norm()
}

/// Unit quaternion as `[w, x, y, z]`.
pub fn to_quaternion(r: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    // Keep w >= 0 so the serialized form is unique.
    let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
    [q.w, q.i, q.j, q.k]
}

pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}
