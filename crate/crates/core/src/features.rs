//! Marker detection on accumulated frames and grid correspondence.
//!
//! Detection is a global threshold (Otsu over non-zero pixels by default),
//! 8-connected labeling, and an intensity-weighted centroid per component.
//! Pixel `(i, j)` has its center at coordinates `(i, j)`.
//!
//! Grid ordering recovers the in-plane grid angle from nearest-neighbour
//! vectors (folded modulo 90°), clusters markers into rows along the rotated
//! vertical axis and sorts each row along the horizontal one. In-plane
//! rotations close to or beyond 45° are ambiguous for a square grid and are
//! rejected when detectable.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_io::AccumFrame;

/// Half-width, in degrees, of the rejected band around ±45° in-plane rotation.
pub const AMBIGUOUS_ANGLE_MARGIN_DEG: f64 = 1.0;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("expected {expected} markers for the target grid, found {found} (deficit {})", *expected as i64 - *found as i64)]
    CountMismatch { expected: usize, found: usize },
    #[error("grid ordering is ambiguous: {0}")]
    Ambiguous(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("correspondence csv: {0}")]
    Csv(String),
}

/// Subpixel marker observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerPoint {
    pub u: f64,
    pub v: f64,
    /// Sum of pixel values in the blob.
    pub mass: f64,
    /// Number of pixels in the blob.
    pub area: usize,
}

/// Planar marker grid. Model points lie at `(col * spacing, row * spacing, 0)`
/// in row-major order, origin at the upper-left marker.
///
/// The 7×7 default is arbitrary; the physical star pattern layout is a
/// property of the user's hardware.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetGeometry {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
}

impl Default for TargetGeometry {
    fn default() -> Self {
        Self {
            rows: 7,
            cols: 7,
            spacing: 1.0,
        }
    }
}

impl TargetGeometry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn model_point(&self, ix: usize) -> Vector3<f64> {
        let (row, col) = (ix / self.cols, ix % self.cols);
        Vector3::new(col as f64 * self.spacing, row as f64 * self.spacing, 0.0)
    }

    pub fn model_points(&self) -> Vec<Vector3<f64>> {
        (0..self.len()).map(|i| self.model_point(i)).collect()
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(
            (self.cols - 1) as f64 * self.spacing / 2.0,
            (self.rows - 1) as f64 * self.spacing / 2.0,
        )
    }
}

/// One 2D-3D pair `{x_ij, X_ij}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub view: usize,
    /// Row-major index into the target grid.
    pub model_ix: usize,
    /// Target-plane point, `z == 0`.
    pub model: Vector3<f64>,
    pub u: f64,
    pub v: f64,
}

impl Correspondence {
    pub fn image_point(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    /// Otsu's method over the histogram of non-zero pixels.
    Otsu,
    /// Pixels with value `>=` this are foreground.
    Fixed(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionParams {
    pub threshold: Threshold,
    pub min_area: usize,
    /// Upper area bound as a fraction of the frame's pixel count.
    pub max_area_fraction: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            threshold: Threshold::Otsu,
            min_area: 5,
            max_area_fraction: 0.01,
        }
    }
}

impl DetectionParams {
    pub fn max_area(&self, frame: &AccumFrame) -> usize {
        (self.max_area_fraction * frame.values.len() as f64).floor() as usize
    }
}

/// Smallest foreground value chosen by Otsu's method on non-zero pixels.
/// Returns `None` for an all-zero frame.
pub fn otsu_threshold(values: &[u32]) -> Option<u32> {
    let mut nz: Vec<u32> = values.iter().copied().filter(|&v| v > 0).collect();
    if nz.is_empty() {
        return None;
    }
    nz.sort_unstable();
    // (value, count) runs
    let mut levels: Vec<(u32, f64)> = Vec::new();
    for v in nz {
        match levels.last_mut() {
            Some((lv, c)) if *lv == v => *c += 1.0,
            _ => levels.push((v, 1.0)),
        }
    }
    if levels.len() == 1 {
        return Some(levels[0].0);
    }
    let total: f64 = levels.iter().map(|l| l.1).sum();
    let sum_all: f64 = levels.iter().map(|l| l.0 as f64 * l.1).sum();
    let (mut w0, mut s0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, levels[1].0);
    for i in 0..levels.len() - 1 {
        w0 += levels[i].1;
        s0 += levels[i].0 as f64 * levels[i].1;
        let w1 = total - w0;
        let mu0 = s0 / w0;
        let mu1 = (sum_all - s0) / w1;
        let between = w0 * w1 * (mu0 - mu1).powi(2);
        if between > best.0 {
            best = (between, levels[i + 1].0);
        }
    }
    Some(best.1)
}

/// Detects marker blobs. Markers come out in raster order of their first pixel.
///
/// Pixels at or above the threshold seed a blob, which then grows through
/// every 8-connected non-zero pixel, so faint boundary pixels still carry
/// their weight in the centroid.
pub fn detect_markers(frame: &AccumFrame, params: &DetectionParams) -> Vec<MarkerPoint> {
    let thr = match params.threshold {
        Threshold::Otsu => match otsu_threshold(&frame.values) {
            Some(t) => t,
            None => return Vec::new(),
        },
        Threshold::Fixed(t) => t.max(1),
    };
    let (w, h) = (frame.width as usize, frame.height as usize);
    let max_area = params.max_area(frame);
    let mut visited = vec![false; w * h];
    let mut stack = Vec::new();
    let mut blob: Vec<(usize, usize)> = Vec::new();
    let mut out = Vec::new();

    for start in 0..w * h {
        if visited[start] || frame.values[start] < thr {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        blob.clear();
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            blob.push((x, y));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !visited[j] && frame.values[j] > 0 {
                        visited[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if blob.len() < params.min_area || blob.len() > max_area {
            continue;
        }
        // Centroid relative to the bounding-box corner so that integer shifts
        // of the frame shift the result exactly.
        let x0 = blob.iter().map(|p| p.0).min().unwrap();
        let y0 = blob.iter().map(|p| p.1).min().unwrap();
        let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
        for &(x, y) in &blob {
            let val = frame.values[y * w + x] as f64;
            m += val;
            mx += val * (x - x0) as f64;
            my += val * (y - y0) as f64;
        }
        if m <= 0.0 {
            continue;
        }
        out.push(MarkerPoint {
            u: x0 as f64 + mx / m,
            v: y0 as f64 + my / m,
            mass: m,
            area: blob.len(),
        });
    }
    out
}

/// In-plane grid angle in `(-45°, 45°]` from nearest-neighbour directions.
fn grid_angle(points: &[Vector2<f64>]) -> f64 {
    let (mut c, mut s) = (0.0, 0.0);
    for (i, p) in points.iter().enumerate() {
        let nearest = points
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, q)| (q - p).norm())
            .fold(f64::INFINITY, f64::min);
        for (j, q) in points.iter().enumerate() {
            let d = q - p;
            if j != i && d.norm() <= 1.3 * nearest {
                let phi = d.y.atan2(d.x);
                c += (4.0 * phi).cos();
                s += (4.0 * phi).sin();
            }
        }
    }
    s.atan2(c) / 4.0
}

/// Assigns detected markers to model points in row-major order.
pub fn order_grid(
    markers: &[MarkerPoint],
    geometry: &TargetGeometry,
    view: usize,
) -> Result<Vec<Correspondence>, FeatureError> {
    let n = geometry.len();
    if markers.len() != n {
        return Err(FeatureError::CountMismatch {
            expected: n,
            found: markers.len(),
        });
    }
    let pts: Vec<Vector2<f64>> = markers.iter().map(|m| Vector2::new(m.u, m.v)).collect();
    let theta = if n > 1 { grid_angle(&pts) } else { 0.0 };
    if (theta.abs().to_degrees() - 45.0).abs() < AMBIGUOUS_ANGLE_MARGIN_DEG {
        return Err(FeatureError::Ambiguous(format!(
            "in-plane grid rotation {:.1}° is too close to 45°",
            theta.to_degrees()
        )));
    }
    let (sin, cos) = theta.sin_cos();
    let rotated: Vec<Vector2<f64>> = pts
        .iter()
        .map(|p| Vector2::new(cos * p.x + sin * p.y, -sin * p.x + cos * p.y))
        .collect();

    let mut by_y: Vec<usize> = (0..n).collect();
    by_y.sort_by(|&a, &b| rotated[a].y.total_cmp(&rotated[b].y));

    // Split at the rows-1 largest gaps along the rotated vertical axis.
    let mut gaps: Vec<(f64, usize)> = by_y
        .windows(2)
        .enumerate()
        .map(|(k, w)| (rotated[w[1]].y - rotated[w[0]].y, k + 1))
        .collect();
    gaps.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut cuts: Vec<usize> = gaps
        .iter()
        .take(geometry.rows - 1)
        .map(|g| g.1)
        .collect();
    cuts.sort_unstable();
    cuts.push(n);

    let mut out = Vec::with_capacity(n);
    let mut begin = 0;
    for (row, &end) in cuts.iter().enumerate() {
        let mut members: Vec<usize> = by_y[begin..end].to_vec();
        if members.len() != geometry.cols {
            return Err(FeatureError::Ambiguous(format!(
                "row {row} has {} markers, expected {}",
                members.len(),
                geometry.cols
            )));
        }
        members.sort_by(|&a, &b| rotated[a].x.total_cmp(&rotated[b].x));
        for (col, &m) in members.iter().enumerate() {
            let model_ix = row * geometry.cols + col;
            out.push(Correspondence {
                view,
                model_ix,
                model: geometry.model_point(model_ix),
                u: markers[m].u,
                v: markers[m].v,
            });
        }
        begin = end;
    }
    Ok(out)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FeatureError + '_ {
    move |source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `view,u,v,mass,area`.
pub fn write_markers_csv(
    path: &Path,
    markers: &[(usize, MarkerPoint)],
) -> Result<(), FeatureError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    (|| {
        writeln!(w, "view,u,v,mass,area")?;
        for (view, m) in markers {
            writeln!(w, "{view},{},{},{},{}", m.u, m.v, m.mass, m.area)?;
        }
        w.flush()
    })()
    .map_err(io_err(path))
}

/// Writes `view,model_ix,u,v,X,Y`.
pub fn write_correspondences_csv(
    path: &Path,
    corrs: &[Correspondence],
) -> Result<(), FeatureError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    (|| {
        writeln!(w, "view,model_ix,u,v,X,Y")?;
        for c in corrs {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                c.view, c.model_ix, c.u, c.v, c.model.x, c.model.y
            )?;
        }
        w.flush()
    })()
    .map_err(io_err(path))
}

/// Reads a correspondence CSV written by [`write_correspondences_csv`].
/// Rows are returned in file order.
pub fn read_correspondences_csv(path: &Path) -> Result<Vec<Correspondence>, FeatureError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| FeatureError::Csv(e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(i as u64 + 1);
        if i == 0 && rec.get(0).is_some_and(|f| f.parse::<usize>().is_err()) {
            continue;
        }
        if rec.len() != 6 {
            return Err(FeatureError::Csv(format!(
                "line {line}: expected 6 fields view,model_ix,u,v,X,Y, found {}",
                rec.len()
            )));
        }
        let bad = |name: &str| FeatureError::Csv(format!("line {line}: invalid {name}"));
        let view = rec[0].parse().map_err(|_| bad("view"))?;
        let model_ix = rec[1].parse().map_err(|_| bad("model_ix"))?;
        let num = |k: usize, name: &str| -> Result<f64, FeatureError> {
            rec[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(name))
        };
        out.push(Correspondence {
            view,
            model_ix,
            u: num(2, "u")?,
            v: num(3, "v")?,
            model: Vector3::new(num(4, "X")?, num(5, "Y")?, 0.0),
        });
    }
    let mut seen = std::collections::BTreeSet::new();
    for c in &out {
        if !seen.insert((c.view, c.model_ix)) {
            return Err(FeatureError::Csv(format!(
                "model point {} appears twice in view {}",
                c.model_ix, c.view
            )));
        }
    }
    Ok(out)
}

/// Groups correspondences by view index, in ascending view order.
pub fn group_by_view(corrs: &[Correspondence]) -> Vec<Vec<Correspondence>> {
    let mut views: std::collections::BTreeMap<usize, Vec<Correspondence>> = Default::default();
    for c in corrs {
        views.entry(c.view).or_default().push(*c);
    }
    views.into_values().collect()
}
