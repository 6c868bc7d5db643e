//! Synthetic scenarios: poses, marker projections and flicker event streams.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collimator_init::{Intrinsics, SphericalOffset};
use crate::event_io::{Event, EventStream, SensorSize};
use crate::features::{Correspondence, TargetGeometry};
use crate::refine::{project, Distortion, ParameterVector};
use crate::rotation;

/// Markers must stay this far inside the sensor border, in pixels.
pub const BOUNDS_MARGIN_PX: f64 = 8.0;
/// Pose sets tried by [`GroundTruth::sample`] before giving up.
pub const MAX_SCENARIO_ATTEMPTS: u64 = 10_000;
/// Resamples allowed per pose in [`random_spherical_poses`].
pub const MAX_POSE_RESAMPLES: usize = 1000;
pub const MIN_POSE_ANGLE_DEG: f64 = 5.0;
pub const MIN_POSE_SEPARATION_DEG: f64 = 2.0;
pub const DEFAULT_MAX_ANGLE_DEG: f64 = 10.0;
/// Subsamples per pixel axis when computing disk coverage.
const COVERAGE_SUBSAMPLES: usize = 16;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("view {view}, marker {point}: projection ({u:.2}, {v:.2}) lies outside the sensor")]
    OutOfBounds {
        view: usize,
        point: usize,
        u: f64,
        v: f64,
    },
    #[error("view {view}, marker {point}: behind the camera")]
    BehindCamera { view: usize, point: usize },
    #[error("view {view}: disk radius {radius} px makes markers {spacing:.2} px apart overlap")]
    DiskOverlap {
        view: usize,
        radius: f64,
        spacing: f64,
    },
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("could not draw {n} rotations at least {MIN_POSE_SEPARATION_DEG} degrees apart after {MAX_POSE_RESAMPLES} resamples")]
    Sampling { n: usize },
    #[error("no pose set kept every marker inside the sensor after {0} attempts")]
    NoValidScenario(u64),
}

/// Full forward model of a synthetic collimator setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub intrinsics: Intrinsics,
    pub distortion: Distortion,
    pub offset: SphericalOffset,
    /// `R_ep` per view as axis-angle, radians.
    pub rotations: Vec<[f64; 3]>,
    pub target: TargetGeometry,
    pub sensor: SensorSize,
}

impl Default for GroundTruth {
    /// Long-focal setup on a 1280×720 sensor with three sampled views.
    fn default() -> Self {
        Self::sample(3, DEFAULT_MAX_ANGLE_DEG, 0).expect("default scenario is samplable")
    }
}

impl GroundTruth {
    /// Camera, target and offset of the default setup, without views.
    pub fn base() -> Self {
        let target = TargetGeometry::default();
        let c = target.center();
        Self {
            intrinsics: Intrinsics::new(3345.06, 3345.27, 642.10, 363.32),
            distortion: Distortion { k1: 0.06, k2: -0.90 },
            offset: SphericalOffset::new(c.x, c.y, 40.0),
            rotations: Vec::new(),
            target,
            sensor: SensorSize::new(1280, 720),
        }
    }

    /// Draws `n` pose sets from derived seeds until one keeps every marker
    /// in bounds.
    pub fn sample(n: usize, max_angle_deg: f64, seed: u64) -> Result<Self, SimulationError> {
        Self::base().with_sampled_poses(n, max_angle_deg, seed)
    }

    /// Replaces the views with a sampled in-bounds pose set.
    pub fn with_sampled_poses(
        mut self,
        n: usize,
        max_angle_deg: f64,
        seed: u64,
    ) -> Result<Self, SimulationError> {
        for attempt in 0..MAX_SCENARIO_ATTEMPTS {
            let s = seed ^ attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let rots = random_spherical_poses(n, max_angle_deg, s)?;
            self.rotations = rots.iter().map(|r| rotation::log(r).into()).collect();
            if self.validate().is_ok() {
                return Ok(self);
            }
        }
        Err(SimulationError::NoValidScenario(MAX_SCENARIO_ATTEMPTS))
    }

    pub fn rotation_matrices(&self) -> Vec<Matrix3<f64>> {
        self.rotations
            .iter()
            .map(|w| rotation::exp(&Vector3::from(*w)))
            .collect()
    }

    pub fn parameters(&self) -> ParameterVector {
        ParameterVector::spherical(
            self.intrinsics,
            self.distortion,
            &self.rotation_matrices(),
            self.offset,
        )
    }

    /// Noise-free marker projections of one view, in model order.
    pub fn projections(&self, view: usize) -> Result<Vec<Vector2<f64>>, SimulationError> {
        let theta = self.parameters();
        let w = self.sensor.width as f64 - 1.0 - BOUNDS_MARGIN_PX;
        let h = self.sensor.height as f64 - 1.0 - BOUNDS_MARGIN_PX;
        self.target
            .model_points()
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let p = project(&theta, view, x)
                    .map_err(|_| SimulationError::BehindCamera { view, point: i })?;
                if !(p.x >= BOUNDS_MARGIN_PX && p.x <= w && p.y >= BOUNDS_MARGIN_PX && p.y <= h) {
                    return Err(SimulationError::OutOfBounds {
                        view,
                        point: i,
                        u: p.x,
                        v: p.y,
                    });
                }
                Ok(p)
            })
            .collect()
    }

    /// Checks the camera and that every view keeps all markers in bounds.
    pub fn validate(&self) -> Result<(), SimulationError> {
        if !self.intrinsics.is_valid() {
            return Err(SimulationError::InvalidParameter(
                "intrinsics must be finite with positive focal lengths".into(),
            ));
        }
        if self.target.rows < 2 || self.target.cols < 2 || !(self.target.spacing > 0.0) {
            return Err(SimulationError::InvalidParameter(
                "target needs at least 2x2 markers and positive spacing".into(),
            ));
        }
        for view in 0..self.rotations.len() {
            self.projections(view)?;
        }
        Ok(())
    }
}

/// Centroid noise, outliers and flicker event parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Gaussian centroid jitter per image axis, pixels.
    pub centroid_sigma: f64,
    pub outlier_fraction: f64,
    /// Outliers move this far in a uniformly random direction, pixels.
    pub outlier_displacement: f64,
    /// Background events per second per pixel.
    pub background_rate: f64,
    pub flicker_hz: f64,
    /// Fraction of each flicker period the source is on.
    pub duty_cycle: f64,
    pub disk_radius_px: f64,
    /// Events fire up to this many microseconds after their flicker edge.
    pub timestamp_jitter_us: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            centroid_sigma: 0.0,
            outlier_fraction: 0.0,
            outlier_displacement: 10.0,
            background_rate: 0.0,
            flicker_hz: 60.0,
            duty_cycle: 0.5,
            disk_radius_px: 4.0,
            timestamp_jitter_us: 50,
        }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self::default()
    }

    pub fn gaussian(sigma: f64) -> Self {
        Self {
            centroid_sigma: sigma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: &str| Err(SimulationError::InvalidNoise(m.into()));
        if !(self.centroid_sigma >= 0.0 && self.centroid_sigma.is_finite()) {
            return bad("centroid_sigma must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must lie in [0, 1)");
        }
        if !(self.outlier_displacement >= 0.0 && self.outlier_displacement.is_finite()) {
            return bad("outlier_displacement must be finite and >= 0");
        }
        if !(self.background_rate >= 0.0 && self.background_rate.is_finite()) {
            return bad("background_rate must be finite and >= 0");
        }
        if !(self.flicker_hz > 0.0 && self.flicker_hz.is_finite()) {
            return bad("flicker_hz must be positive");
        }
        if !(self.duty_cycle > 0.0 && self.duty_cycle < 1.0) {
            return bad("duty_cycle must lie in (0, 1)");
        }
        if !(self.disk_radius_px > 0.0 && self.disk_radius_px.is_finite()) {
            return bad("disk_radius_px must be positive");
        }
        Ok(())
    }
}

/// Projects every marker of every view and applies centroid noise.
///
/// Jitter is drawn for all points first and outliers are chosen in a second
/// pass, so the inlier noise for a seed does not depend on the outlier
/// settings. Each view gets exactly `round(fraction · markers)` outliers.
pub fn simulate_views(
    gt: &GroundTruth,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Vec<Vec<Correspondence>>, SimulationError> {
    noise.validate()?;
    gt.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, noise.centroid_sigma)
        .map_err(|e| SimulationError::InvalidNoise(e.to_string()))?;
    let models = gt.target.model_points();

    let mut views = Vec::with_capacity(gt.rotations.len());
    for view in 0..gt.rotations.len() {
        let proj = gt.projections(view)?;
        let corrs: Vec<Correspondence> = proj
            .iter()
            .zip(&models)
            .enumerate()
            .map(|(i, (p, x))| Correspondence {
                view,
                model_ix: i,
                model: *x,
                u: p.x + jitter.sample(&mut rng),
                v: p.y + jitter.sample(&mut rng),
            })
            .collect();
        views.push(corrs);
    }

    if noise.outlier_fraction > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        for corrs in &mut views {
            let k = (noise.outlier_fraction * corrs.len() as f64).round() as usize;
            let mut picked = index::sample(&mut rng, corrs.len(), k).into_vec();
            picked.sort_unstable();
            for i in picked {
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                corrs[i].u += noise.outlier_displacement * phi.cos();
                corrs[i].v += noise.outlier_displacement * phi.sin();
            }
        }
    }
    Ok(views)
}

/// Flicker edge times in `[0, duration)`, microseconds, with polarity.
pub fn flicker_edges(noise: &NoiseModel, duration_us: u64) -> Vec<(f64, i8)> {
    let period = 1e6 / noise.flicker_hz;
    let mut edges = Vec::new();
    let mut k = 0u64;
    loop {
        let rise = k as f64 * period;
        if rise >= duration_us as f64 {
            break;
        }
        edges.push((rise, 1));
        let fall = rise + noise.duty_cycle * period;
        if fall < duration_us as f64 {
            edges.push((fall, -1));
        }
        k += 1;
    }
    edges
}

/// Fraction of pixel `(x, y)` (unit square centred on the integer
/// coordinate) covered by a disk.
fn disk_coverage(x: i64, y: i64, center: &Vector2<f64>, radius: f64) -> f64 {
    let n = COVERAGE_SUBSAMPLES;
    let r2 = radius * radius;
    let mut inside = 0usize;
    for j in 0..n {
        let sy = y as f64 - 0.5 + (j as f64 + 0.5) / n as f64 - center.y;
        for i in 0..n {
            let sx = x as f64 - 0.5 + (i as f64 + 0.5) / n as f64 - center.x;
            if sx * sx + sy * sy <= r2 {
                inside += 1;
            }
        }
    }
    inside as f64 / (n * n) as f64
}

/// Renders the flickering pattern seen in one view as an event stream.
///
/// Fully covered pixels fire one event per flicker edge. Partially covered
/// pixels fire on a subset of edges chosen by error diffusion, so the
/// per-pixel count over any run of edges tracks `coverage × edges`.
pub fn simulate_events(
    gt: &GroundTruth,
    noise: &NoiseModel,
    view: usize,
    duration_ms: f64,
    seed: u64,
) -> Result<EventStream, SimulationError> {
    noise.validate()?;
    if !(duration_ms >= 0.0 && duration_ms.is_finite()) {
        return Err(SimulationError::InvalidParameter(format!(
            "duration must be finite and >= 0, got {duration_ms} ms"
        )));
    }
    if view >= gt.rotations.len() {
        return Err(SimulationError::InvalidParameter(format!(
            "view {view} does not exist ({} views)",
            gt.rotations.len()
        )));
    }
    let centers = gt.projections(view)?;
    check_overlap(gt, &centers, view, noise.disk_radius_px)?;

    let duration_us = (duration_ms * 1000.0).round() as u64;
    if duration_us == 0 {
        return Ok(EventStream::empty(gt.sensor));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 + view as u64);
    let edges = flicker_edges(noise, duration_us);
    let radius = noise.disk_radius_px;
    let mut events = Vec::new();

    for c in &centers {
        let (x0, x1) = ((c.x - radius).floor() as i64, (c.x + radius).ceil() as i64);
        let (y0, y1) = ((c.y - radius).floor() as i64, (c.y + radius).ceil() as i64);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let cov = disk_coverage(x, y, c, radius);
                if cov <= 0.0 || !gt.sensor.contains(x as u32, y as u32) {
                    continue;
                }
                let mut acc = 0.5;
                for &(t, p) in &edges {
                    acc += cov;
                    if acc >= 1.0 {
                        acc -= 1.0;
                        let dt = rng.random_range(0..=noise.timestamp_jitter_us);
                        let t = (t.round() as u64 + dt).min(duration_us - 1);
                        events.push(Event { t, x: x as u16, y: y as u16, p });
                    }
                }
            }
        }
    }

    let expected = noise.background_rate * gt.sensor.pixel_count() as f64 * duration_us as f64 * 1e-6;
    if expected > 0.0 {
        let count = Poisson::new(expected)
            .map_err(|e| SimulationError::InvalidNoise(e.to_string()))?
            .sample(&mut rng) as u64;
        for _ in 0..count {
            let t = rng.random_range(0..duration_us);
            let x = rng.random_range(0..gt.sensor.width) as u16;
            let y = rng.random_range(0..gt.sensor.height) as u16;
            let p = if rng.random_bool(0.5) { 1 } else { -1 };
            events.push(Event { t, x, y, p });
        }
    }
    EventStream::new(events, gt.sensor)
        .map_err(|e| SimulationError::InvalidParameter(e.to_string()))
}

/// Rejects disks that would touch their grid neighbours in the image.
fn check_overlap(
    gt: &GroundTruth,
    centers: &[Vector2<f64>],
    view: usize,
    radius: f64,
) -> Result<(), SimulationError> {
    let cols = gt.target.cols;
    let mut min_spacing = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let (row, col) = (i / cols, i % cols);
        if col + 1 < cols {
            min_spacing = min_spacing.min((centers[i + 1] - c).norm());
        }
        if row + 1 < gt.target.rows {
            min_spacing = min_spacing.min((centers[i + cols] - c).norm());
        }
    }
    // one clear pixel between footprints keeps blobs 8-disconnected
    if 2.0 * radius + 2.0 >= min_spacing {
        return Err(SimulationError::DiskOverlap {
            view,
            radius,
            spacing: min_spacing,
        });
    }
    Ok(())
}

/// `n` rotations with angles uniform in `(5°, max_angle]` about uniformly
/// random axes, pairwise at least 2° apart.
pub fn random_spherical_poses(
    n: usize,
    max_angle_deg: f64,
    seed: u64,
) -> Result<Vec<Matrix3<f64>>, SimulationError> {
    if n < 2 {
        return Err(SimulationError::InvalidParameter(format!(
            "need at least 2 poses, got {n}"
        )));
    }
    if !(max_angle_deg > MIN_POSE_ANGLE_DEG && max_angle_deg < 90.0) {
        return Err(SimulationError::InvalidParameter(format!(
            "max angle must lie in ({MIN_POSE_ANGLE_DEG}, 90) degrees, got {max_angle_deg}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_sep = MIN_POSE_SEPARATION_DEG.to_radians();
    let mut out: Vec<Matrix3<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut accepted = None;
        for _ in 0..=MAX_POSE_RESAMPLES {
            let axis = loop {
                let v = Vector3::<f64>::from_fn(|_, _| StandardNormal.sample(&mut rng));
                if v.norm() > 1e-9 {
                    break v.normalize();
                }
            };
            // 1 - U lies in (0, 1], so the angle lies in (5°, max]
            let u: f64 = rng.random();
            let angle = MIN_POSE_ANGLE_DEG + (max_angle_deg - MIN_POSE_ANGLE_DEG) * (1.0 - u);
            let r = rotation::exp(&(axis * angle.to_radians()));
            if out.iter().all(|q| rotation::geodesic_distance(q, &r) >= min_sep) {
                accepted = Some(r);
                break;
            }
        }
        out.push(accepted.ok_or(SimulationError::Sampling { n })?);
    }
    Ok(out)
}

/// Ground truth, noise model and seed for one synthetic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub ground_truth: GroundTruth,
    pub noise: NoiseModel,
    pub seed: u64,
    pub duration_ms: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            ground_truth: GroundTruth::default(),
            noise: NoiseModel::default(),
            seed: 0,
            duration_ms: 33.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_io::{accumulate, AccumMode};
    use crate::features::{detect_markers, DetectionParams};

    #[test]
    fn default_scenario_is_valid() {
        let gt = GroundTruth::default();
        assert_eq!(gt.rotations.len(), 3);
        gt.validate().unwrap();
        assert_eq!(gt, GroundTruth::default());
    }

    #[test]
    fn zero_noise_passes_projections_through() {
        let gt = GroundTruth::default();
        let views = simulate_views(&gt, &NoiseModel::noiseless(), 5).unwrap();
        let theta = gt.parameters();
        for (vi, corrs) in views.iter().enumerate() {
            assert_eq!(corrs.len(), 49);
            for c in corrs {
                let p = project(&theta, vi, &c.model).unwrap();
                assert_eq!((c.u, c.v), (p.x, p.y));
            }
        }
    }

    #[test]
    fn jitter_standard_deviation() {
        let gt = GroundTruth::default();
        let clean = simulate_views(&gt, &NoiseModel::noiseless(), 0).unwrap();
        let noise = NoiseModel::gaussian(0.1);
        let mut samples = Vec::new();
        let mut seed = 0;
        while samples.len() < 10_000 {
            let noisy = simulate_views(&gt, &noise, seed).unwrap();
            for (a, b) in noisy.iter().flatten().zip(clean.iter().flatten()) {
                samples.push(a.u - b.u);
                samples.push(a.v - b.v);
            }
            seed += 1;
        }
        samples.truncate(10_000);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        assert!((var.sqrt() - 0.1).abs() < 0.005, "std {}", var.sqrt());
    }

    #[test]
    fn outliers_leave_inlier_noise_unchanged() {
        let gt = GroundTruth::default();
        let base = simulate_views(&gt, &NoiseModel::gaussian(0.1), 3).unwrap();
        let noise = NoiseModel {
            outlier_fraction: 0.1,
            ..NoiseModel::gaussian(0.1)
        };
        let with = simulate_views(&gt, &noise, 3).unwrap();
        for (a, b) in with.iter().zip(&base) {
            let moved: Vec<f64> = a
                .iter()
                .zip(b)
                .map(|(p, q)| (p.u - q.u).hypot(p.v - q.v))
                .filter(|d| *d > 0.0)
                .collect();
            assert_eq!(moved.len(), 5); // round(0.1 * 49)
            for d in moved {
                assert!((d - 10.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn same_seed_same_views() {
        let gt = GroundTruth::default();
        let noise = NoiseModel {
            outlier_fraction: 0.2,
            ..NoiseModel::gaussian(0.3)
        };
        assert_eq!(simulate_views(&gt, &noise, 9).unwrap(), simulate_views(&gt, &noise, 9).unwrap());
        assert_ne!(simulate_views(&gt, &noise, 9).unwrap(), simulate_views(&gt, &noise, 10).unwrap());
    }

    #[test]
    fn invalid_noise_rejected() {
        let gt = GroundTruth::default();
        for n in [
            NoiseModel { centroid_sigma: -1.0, ..Default::default() },
            NoiseModel { outlier_fraction: 1.0, ..Default::default() },
            NoiseModel { flicker_hz: 0.0, ..Default::default() },
        ] {
            assert!(matches!(simulate_views(&gt, &n, 0), Err(SimulationError::InvalidNoise(_))));
        }
    }

    #[test]
    fn out_of_bounds_view_is_named() {
        let mut gt = GroundTruth::base();
        gt.rotations = vec![[0.0; 3], [0.0, 0.3, 0.0]];
        match simulate_views(&gt, &NoiseModel::noiseless(), 0) {
            Err(SimulationError::OutOfBounds { view, .. }) => assert_eq!(view, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flicker_schedule_60hz() {
        let edges = flicker_edges(&NoiseModel::default(), 33_000);
        let times: Vec<u64> = edges.iter().map(|e| e.0.round() as u64).collect();
        assert_eq!(times, vec![0, 8333, 16667, 25000]);
        assert_eq!(edges.iter().map(|e| e.1).collect::<Vec<_>>(), vec![1, -1, 1, -1]);
    }

    #[test]
    fn fully_covered_pixels_carry_four_events() {
        let gt = GroundTruth::default();
        let noise = NoiseModel::default();
        let stream = simulate_events(&gt, &noise, 0, 33.0, 1).unwrap();
        let frame = accumulate(&stream, 33_000, AccumMode::Count).unwrap().remove(0);
        let r = noise.disk_radius_px;
        for c in gt.projections(0).unwrap() {
            for y in (c.y - r).floor() as u32..=(c.y + r).ceil() as u32 {
                for x in (c.x - r).floor() as u32..=(c.x + r).ceil() as u32 {
                    let cov = disk_coverage(x as i64, y as i64, &c, r);
                    if cov == 1.0 {
                        assert_eq!(frame.get(x, y), 4);
                    } else if cov == 0.0 {
                        assert_eq!(frame.get(x, y), 0);
                    } else {
                        // error diffusion: round(4 · coverage) up to one event
                        assert!((frame.get(x, y) as f64 - 4.0 * cov).abs() <= 1.0);
                    }
                }
            }
        }
        // every event belongs to a marker footprint when background is off
        let footprint: u64 = gt
            .projections(0)
            .unwrap()
            .iter()
            .map(|c| {
                let mut s = 0u64;
                for y in (c.y - r).floor() as i64..=(c.y + r).ceil() as i64 {
                    for x in (c.x - r).floor() as i64..=(c.x + r).ceil() as i64 {
                        let mut acc = 0.5;
                        let cov = disk_coverage(x, y, c, r);
                        for _ in 0..4 {
                            acc += cov;
                            if acc >= 1.0 {
                                acc -= 1.0;
                                s += 1;
                            }
                        }
                    }
                }
                s
            })
            .sum();
        assert_eq!(stream.len() as u64, footprint);
    }

    #[test]
    fn polarity_follows_edges() {
        let gt = GroundTruth::default();
        let noise = NoiseModel::default();
        let stream = simulate_events(&gt, &noise, 1, 33.0, 2).unwrap();
        for e in stream.events() {
            let expected = if (e.t % 16_667) < 8_333 { 1 } else { -1 };
            assert_eq!(e.p, expected, "{e:?}");
        }
    }

    #[test]
    fn zero_duration_is_empty() {
        let gt = GroundTruth::default();
        let s = simulate_events(&gt, &NoiseModel::default(), 0, 0.0, 0).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn background_events_are_added() {
        let gt = GroundTruth::default();
        let clean = simulate_events(&gt, &NoiseModel::default(), 0, 33.0, 4).unwrap();
        let noisy = NoiseModel {
            background_rate: 0.1,
            ..NoiseModel::default()
        };
        let s = simulate_events(&gt, &noisy, 0, 33.0, 4).unwrap();
        // expected 0.1 · 921600 · 0.033 ≈ 3041 background events
        let extra = s.len() as f64 - clean.len() as f64;
        assert!((extra - 3041.28).abs() < 5.0 * 3041.28f64.sqrt(), "{extra}");
    }

    #[test]
    fn overlapping_disks_rejected() {
        let gt = GroundTruth::default();
        let noise = NoiseModel {
            disk_radius_px: 45.0,
            ..NoiseModel::default()
        };
        assert!(matches!(
            simulate_events(&gt, &noise, 0, 33.0, 0),
            Err(SimulationError::DiskOverlap { view: 0, .. })
        ));
    }

    #[test]
    fn detected_centroids_match_projections() {
        let gt = GroundTruth::default();
        let noise = NoiseModel::default();
        for view in 0..gt.rotations.len() {
            let stream = simulate_events(&gt, &noise, view, 33.0, 7).unwrap();
            let frame = accumulate(&stream, 33_000, AccumMode::Count).unwrap().remove(0);
            let markers = detect_markers(&frame, &DetectionParams::default());
            let truth = gt.projections(view).unwrap();
            assert_eq!(markers.len(), truth.len());
            for t in &truth {
                let best = markers
                    .iter()
                    .map(|m| (m.u - t.x).hypot(m.v - t.y))
                    .fold(f64::INFINITY, f64::min);
                assert!(best < 0.2, "view {view}: {best}");
            }
        }
    }

    #[test]
    fn poses_are_distinct_and_in_range() {
        for seed in 0..50 {
            let rots = random_spherical_poses(4, 30.0, seed).unwrap();
            for (i, a) in rots.iter().enumerate() {
                let ang = rotation::log(a).norm().to_degrees();
                assert!(ang > 5.0 && ang <= 30.0 + 1e-9, "{ang}");
                for b in &rots[i + 1..] {
                    assert!(rotation::geodesic_distance(a, b).to_degrees() >= 2.0);
                }
            }
        }
        assert_eq!(random_spherical_poses(3, 20.0, 11).unwrap(), random_spherical_poses(3, 20.0, 11).unwrap());
    }

    #[test]
    fn pose_preconditions() {
        assert!(random_spherical_poses(1, 20.0, 0).is_err());
        assert!(random_spherical_poses(3, 95.0, 0).is_err());
        assert!(random_spherical_poses(3, 4.0, 0).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ScenarioConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(serde_json::to_string(&back).unwrap(), s);
    }
}
