//! Plane-to-image homography estimation with the normalized DLT.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::Correspondence;

#[derive(Debug, Error, PartialEq)]
pub enum HomographyError {
    #[error("need at least 4 correspondences, got {0}")]
    InsufficientData(usize),
    #[error("degenerate configuration: {0} points are collinear")]
    Degenerate(&'static str),
    #[error("homography is singular")]
    Singular,
    #[error("point maps to infinity (w = {0:e})")]
    PointAtInfinity(f64),
}

/// 3×3 projective map from target-plane `(X, Y)` to pixels, defined up to
/// scale. Stored with `H[2][2] = 1` when that entry is non-negligible,
/// otherwise with unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 9]", try_from = "[f64; 9]")]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    /// Normalizes `m` and checks it is full rank.
    pub fn new(m: Matrix3<f64>) -> Result<Self, HomographyError> {
        let norm = m.norm();
        if !norm.is_finite() || norm == 0.0 {
            return Err(HomographyError::Singular);
        }
        let unit = m / norm;
        if unit.determinant().abs() <= 1e-12 {
            return Err(HomographyError::Singular);
        }
        let m = if unit[(2, 2)].abs() > 1e-12 {
            m / m[(2, 2)]
        } else {
            unit
        };
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn inverse(&self) -> Matrix3<f64> {
        self.m.try_inverse().expect("homography is full rank")
    }

    /// Maps a target-plane point to the image.
    pub fn apply(&self, p: &Vector2<f64>) -> Result<Vector2<f64>, HomographyError> {
        let q = self.m * Vector3::new(p.x, p.y, 1.0);
        if q.z.abs() < 1e-15 {
            return Err(HomographyError::PointAtInfinity(q.z));
        }
        Ok(Vector2::new(q.x / q.z, q.y / q.z))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }
}

impl From<Homography> for [f64; 9] {
    fn from(h: Homography) -> Self {
        h.to_row_major()
    }
}

impl TryFrom<[f64; 9]> for Homography {
    type Error = HomographyError;

    fn try_from(a: [f64; 9]) -> Result<Self, Self::Error> {
        Homography::new(Matrix3::from_row_slice(&a))
    }
}

/// Free-function form of [`Homography::apply`].
pub fn apply_homography(
    h: &Homography,
    point: &Vector2<f64>,
) -> Result<Vector2<f64>, HomographyError> {
    h.apply(point)
}

/// Similarity that moves the centroid to the origin and scales the RMS
/// distance to √2.
fn hartley_normalization(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let rms = (points
        .iter()
        .map(|p| (p - centroid).norm_squared())
        .sum::<f64>()
        / n)
        .sqrt();
    let s = std::f64::consts::SQRT_2 / rms;
    Matrix3::new(s, 0.0, -s * centroid.x, 0.0, s, -s * centroid.y, 0.0, 0.0, 1.0)
}

/// True if all points lie (numerically) on one line: the smaller eigenvalue
/// of the scatter matrix is negligible relative to the larger one.
fn collinear(points: &[Vector2<f64>]) -> bool {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let d = p - c;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let tr = sxx + syy;
    if tr == 0.0 {
        return true;
    }
    let det = sxx * syy - sxy * sxy;
    let disc = ((tr * tr / 4.0) - det).max(0.0).sqrt();
    let small = tr / 2.0 - disc;
    small <= 1e-12 * tr
}

/// Normalized DLT on `(X, Y) -> (u, v)` pairs.
pub fn estimate_from_points(
    model: &[Vector2<f64>],
    image: &[Vector2<f64>],
) -> Result<Homography, HomographyError> {
    assert_eq!(model.len(), image.len(), "point sets must pair up");
    let n = model.len();
    if n < 4 {
        return Err(HomographyError::InsufficientData(n));
    }
    if collinear(model) {
        return Err(HomographyError::Degenerate("model"));
    }
    if collinear(image) {
        return Err(HomographyError::Degenerate("image"));
    }

    let t_model = hartley_normalization(model);
    let t_image = hartley_normalization(image);

    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for (i, (m, p)) in model.iter().zip(image).enumerate() {
        let mn = t_model * Vector3::new(m.x, m.y, 1.0);
        let pn = t_image * Vector3::new(p.x, p.y, 1.0);
        let (x, y) = (mn.x, mn.y);
        let (u, v) = (pn.x, pn.y);
        a.row_mut(2 * i)
            .copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(2 * i + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }

    let h = smallest_right_singular_vector(a);
    let hn = Matrix3::from_row_slice(h.as_slice());
    let t_image_inv = t_image.try_inverse().ok_or(HomographyError::Singular)?;
    Homography::new(t_image_inv * hn * t_model)
}

/// Right singular vector for the smallest singular value. Pads with zero rows
/// when the system has fewer rows than columns so the full right basis exists.
pub(crate) fn smallest_right_singular_vector(a: DMatrix<f64>) -> nalgebra::DVector<f64> {
    let cols = a.ncols();
    let a = if a.nrows() < cols {
        let mut padded = DMatrix::zeros(cols, cols);
        padded.rows_mut(0, a.nrows()).copy_from(&a);
        padded
    } else {
        a
    };
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("svd v_t");
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    v_t.row(imin).transpose()
}

/// Estimates the homography of one view.
pub fn estimate_homography(pairs: &[Correspondence]) -> Result<Homography, HomographyError> {
    let model: Vec<Vector2<f64>> = pairs
        .iter()
        .map(|c| Vector2::new(c.model.x, c.model.y))
        .collect();
    let image: Vec<Vector2<f64>> = pairs.iter().map(|c| c.image_point()).collect();
    estimate_from_points(&model, &image)
}
