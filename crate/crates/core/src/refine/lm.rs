use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use super::jacobian::point_jacobian;
use super::{
    huber, huber_weight, project, CalibrationMode, Distortion, ParameterVector, RefineError,
    Residual, TranslationModel, MIN_DEPTH,
};
use crate::collimator_init::{Intrinsics, RotationRecord, SphericalOffset};
use crate::features::Correspondence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the cost by less than this fraction,
    /// or when the model predicts no larger improvement.
    pub relative_tolerance: f64,
    /// Huber threshold in pixels; `None` gives the plain quadratic loss.
    pub huber_delta: Option<f64>,
    /// Starting Marquardt factor `μ`; the damping term is `μ · diag(JᵀJ)`.
    pub initial_damping: f64,
    pub min_damping: f64,
    pub max_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            relative_tolerance: 1e-10,
            huber_delta: Some(1.0),
            initial_damping: 1e-3,
            min_damping: 1e-12,
            max_damping: 1e8,
        }
    }
}

impl LmOptions {
    fn delta(&self) -> f64 {
        self.huber_delta.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Relative cost decrease (actual or predicted) fell below tolerance.
    Converged,
    MaxIterations,
    /// Damping exceeded its upper bound without finding a better point.
    NonConvergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    /// The optimized rotation: `R_ep` in spherical mode, world-to-camera in
    /// free mode.
    pub rotation: RotationRecord,
    pub axis_angle: [f64; 3],
    /// World-to-camera rotation and translation: `X_c = R X + t`.
    pub world_to_camera: RotationRecord,
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub mode: CalibrationMode,
    pub intrinsics: Intrinsics,
    pub distortion: Distortion,
    /// Shared offset; present in spherical mode only.
    pub offset: Option<SphericalOffset>,
    pub poses: Vec<PoseRecord>,
    pub huber_delta: Option<f64>,
    pub termination: Termination,
    pub iterations: usize,
    pub final_damping: f64,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_trace: Vec<f64>,
    pub point_count: usize,
    pub rms_error: f64,
    pub mean_error: f64,
    pub max_error: f64,
    pub residuals: Vec<Residual>,
}

impl CalibrationReport {
    /// Rebuilds the optimized parameter vector.
    pub fn parameters(&self) -> ParameterVector {
        let rotations = self
            .poses
            .iter()
            .map(|p| Vector3::from(p.axis_angle))
            .collect();
        let translation = match self.offset {
            Some(o) => TranslationModel::Spherical(o),
            None => TranslationModel::Free(
                self.poses
                    .iter()
                    .map(|p| Vector3::from(p.translation))
                    .collect(),
            ),
        };
        ParameterVector {
            intrinsics: self.intrinsics,
            distortion: self.distortion,
            rotations,
            translation,
        }
    }

    /// Writes the residual scatter as `view,point,du,dv`.
    pub fn write_residuals_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "view,point,du,dv")?;
        for r in &self.residuals {
            writeln!(w, "{},{},{},{}", r.view, r.point, r.du, r.dv)?;
        }
        w.flush()
    }
}

/// `π(θ, X_ij) − x_ij` for every correspondence, in input order.
pub fn residuals(
    theta: &ParameterVector,
    views: &[Vec<Correspondence>],
) -> Result<Vec<Residual>, RefineError> {
    let mut out = Vec::new();
    for (vi, corrs) in views.iter().enumerate() {
        for (pi, c) in corrs.iter().enumerate() {
            let p = project(theta, vi, &c.model).map_err(|e| match e {
                RefineError::BehindCamera { view, depth, .. } => RefineError::BehindCamera {
                    view,
                    point: pi,
                    depth,
                },
                other => other,
            })?;
            out.push(Residual {
                view: vi,
                point: c.model_ix,
                du: p.x - c.u,
                dv: p.y - c.v,
            });
        }
    }
    Ok(out)
}

/// Robust cost, or `None` if any point falls behind the camera.
fn robust_cost(theta: &ParameterVector, views: &[Vec<Correspondence>], delta: f64) -> Option<f64> {
    let mut total = 0.0;
    for (vi, corrs) in views.iter().enumerate() {
        let mut view_sum = 0.0;
        for c in corrs {
            let xc = theta.camera_point(vi, &c.model);
            if xc.z <= MIN_DEPTH {
                return None;
            }
            let p = super::project_camera_point(&theta.intrinsics, &theta.distortion, &xc);
            view_sum += huber((p.x - c.u).hypot(p.y - c.v), delta);
        }
        total += view_sum;
    }
    Some(total)
}

/// Cost at which residuals are indistinguishable from round-off in the
/// pixel coordinates themselves.
fn cost_floor(views: &[Vec<Correspondence>]) -> f64 {
    let scale = views
        .iter()
        .flatten()
        .map(|c| c.u.abs().max(c.v.abs()))
        .fold(1.0, f64::max);
    let px = 100.0 * f64::EPSILON * scale;
    views.iter().map(Vec::len).sum::<usize>() as f64 * px * px
}

/// Weighted normal equations split into shared (`U`), coupling (`W_i`) and
/// per-view (`V_i`) blocks.
struct Normal {
    cost: f64,
    u: DMatrix<f64>,
    w: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    gs: DVector<f64>,
    gv: Vec<DVector<f64>>,
}

fn linearize(
    theta: &ParameterVector,
    views: &[Vec<Correspondence>],
    delta: f64,
) -> Result<Normal, RefineError> {
    let ns = theta.shared_len();
    let np = theta.pose_len();
    let mut n = Normal {
        cost: 0.0,
        u: DMatrix::zeros(ns, ns),
        w: Vec::with_capacity(views.len()),
        v: Vec::with_capacity(views.len()),
        gs: DVector::zeros(ns),
        gv: Vec::with_capacity(views.len()),
    };
    for (vi, corrs) in views.iter().enumerate() {
        let mut u = DMatrix::zeros(ns, ns);
        let mut w = DMatrix::zeros(ns, np);
        let mut v = DMatrix::zeros(np, np);
        let mut gs = DVector::zeros(ns);
        let mut gv = DVector::zeros(np);
        let mut cost = 0.0;
        for (pi, c) in corrs.iter().enumerate() {
            let pj = point_jacobian(theta, c, vi, pi)?;
            let norm = pj.residual.norm();
            cost += huber(norm, delta);
            let weight = huber_weight(norm, delta);
            let js = pj.shared.columns(0, ns) * weight.sqrt();
            let jp = pj.pose.columns(0, np) * weight.sqrt();
            let e = pj.residual * weight.sqrt();
            u += js.transpose() * &js;
            w += js.transpose() * &jp;
            v += jp.transpose() * &jp;
            gs += js.transpose() * e;
            gv += jp.transpose() * e;
        }
        // per-view partial sums, then an ordered cross-view sum
        n.cost += cost;
        n.u += u;
        n.gs += gs;
        n.w.push(w);
        n.v.push(v);
        n.gv.push(gv);
    }
    Ok(n)
}

/// Cholesky solve after symmetric Jacobi scaling.
fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let s = DVector::from_iterator(
        a.nrows(),
        a.diagonal().iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 1.0 }),
    );
    let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * s[i] * s[j]);
    let chol = scaled.cholesky()?;
    let x = chol.solve(&b.component_mul(&s));
    let x = x.component_mul(&s);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let s = DVector::from_iterator(
        n,
        a.diagonal().iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 1.0 }),
    );
    let scaled = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * s[i] * s[j]);
    let inv = scaled.cholesky()?.inverse();
    Some(DMatrix::from_fn(n, n, |i, j| inv[(i, j)] * s[i] * s[j]))
}

/// Marquardt scaling `D = diag(JᵀJ)`, floored relative to its largest entry.
fn damping_diagonals(n: &Normal) -> (DVector<f64>, Vec<DVector<f64>>) {
    let max_diag = n
        .u
        .diagonal()
        .iter()
        .chain(n.v.iter().flat_map(|v| v.as_slice().iter().step_by(v.nrows() + 1)))
        .fold(0.0f64, |m, &d| m.max(d));
    let floor = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
    let du = n.u.diagonal().map(|d| d.max(floor));
    let dv = n.v.iter().map(|v| v.diagonal().map(|d| d.max(floor))).collect();
    (du, dv)
}

/// Solves `(JᵀJ + μ D) h = −g` via the Schur complement on the shared block.
fn damped_solve(
    n: &Normal,
    mu: f64,
    du: &DVector<f64>,
    dv: &[DVector<f64>],
    gs: &DVector<f64>,
    gv: &[DVector<f64>],
) -> Option<DVector<f64>> {
    let ns = n.u.nrows();
    let np = n.v.first().map_or(0, |v| v.nrows());
    let mut s = n.u.clone();
    for i in 0..ns {
        s[(i, i)] += mu * du[i];
    }
    let mut rhs = -gs;
    let mut v_inv = Vec::with_capacity(n.v.len());
    for (i, v) in n.v.iter().enumerate() {
        let mut vd = v.clone();
        for k in 0..np {
            vd[(k, k)] += mu * dv[i][k];
        }
        let vi = spd_inverse(&vd)?;
        let wvi = &n.w[i] * &vi;
        s -= &wvi * n.w[i].transpose();
        rhs += &wvi * &gv[i];
        v_inv.push(vi);
    }
    let hs = solve_spd(&s, &rhs)?;

    let mut h = DVector::zeros(ns + np * n.v.len());
    h.rows_mut(0, ns).copy_from(&hs);
    for i in 0..n.v.len() {
        let hv = &v_inv[i] * (-&gv[i] - n.w[i].transpose() * &hs);
        h.rows_mut(ns + np * i, np).copy_from(&hv);
    }
    h.iter().all(|v| v.is_finite()).then_some(h)
}

/// `hᵀ D h` over the shared and per-view blocks.
fn scaled_norm2(h: &DVector<f64>, du: &DVector<f64>, dv: &[DVector<f64>]) -> f64 {
    let d = du.iter().chain(dv.iter().flat_map(|d| d.iter()));
    h.iter().zip(d).map(|(x, d)| x * x * d).sum()
}

/// Damped step and the predicted decrease of the weighted quadratic model.
fn damped_step(n: &Normal, mu: f64, du: &DVector<f64>, dv: &[DVector<f64>]) -> Option<(DVector<f64>, f64)> {
    let h = damped_solve(n, mu, du, dv, &n.gs, &n.gv)?;
    let ns = n.u.nrows();
    let mut g = n.gs.iter().copied().collect::<Vec<_>>();
    g.extend(n.gv.iter().flat_map(|v| v.iter().copied()));
    let pred = -h.dot(&DVector::from_vec(g)) + mu * scaled_norm2(&h, du, dv);
    debug_assert_eq!(h.len(), ns + n.v.iter().map(|v| v.nrows()).sum::<usize>());
    Some((h, pred))
}

/// Steps below this size relative to the parameters count as converged.
const STEP_TOLERANCE: f64 = 1e-12;

/// Magnitude of each parameter in the update layout; rotations use 1.
fn parameter_scales(theta: &ParameterVector) -> Vec<f64> {
    let k = &theta.intrinsics;
    let d = &theta.distortion;
    let mut out = vec![k.fx, k.fy, k.cx, k.cy, d.k1, d.k2];
    match &theta.translation {
        TranslationModel::Spherical(o) => {
            out.extend([o.x, o.y, o.r]);
            out.extend(std::iter::repeat_n(0.0, 3 * theta.n_views()));
        }
        TranslationModel::Free(ts) => {
            for t in ts {
                out.extend([0.0, 0.0, 0.0, t.x, t.y, t.z]);
            }
        }
    }
    out.into_iter().map(|v| v.abs().max(1.0)).collect()
}

fn negligible_step(h: &DVector<f64>, scales: &[f64]) -> bool {
    h.iter().zip(scales).all(|(h, s)| h.abs() <= STEP_TOLERANCE * s)
}

/// Finite-difference step along `h` for the directional second derivative.
const ACCEL_FD_STEP: f64 = 0.1;
/// Largest accepted `2‖a‖ / ‖h‖` in the `D` norm.
const ACCEL_RATIO: f64 = 0.75;

/// Geodesic acceleration: the second-order correction `a` that bends the
/// step `h` along the curvature of the residual manifold. Solves
/// `(JᵀWJ + μ D) a = −JᵀW r''` with `r''` the directional second derivative
/// of the residuals along `h`, using the IRLS weights of the current point.
#[allow(clippy::too_many_arguments)]
fn acceleration(
    theta: &ParameterVector,
    views: &[Vec<Correspondence>],
    delta: f64,
    n: &Normal,
    mu: f64,
    du: &DVector<f64>,
    dv: &[DVector<f64>],
    h: &DVector<f64>,
) -> Option<DVector<f64>> {
    let ns = theta.shared_len();
    let np = theta.pose_len();
    let probe = theta.apply_update(&(h * ACCEL_FD_STEP));
    let mut gs = DVector::zeros(ns);
    let mut gv = Vec::with_capacity(views.len());
    for (vi, corrs) in views.iter().enumerate() {
        let hs = h.rows(0, ns);
        let hp = h.rows(ns + np * vi, np);
        let mut g = DVector::zeros(np);
        for (pi, c) in corrs.iter().enumerate() {
            let pj = point_jacobian(theta, c, vi, pi).ok()?;
            let moved = project(&probe, vi, &c.model).ok()? - c.image_point();
            let lin = pj.shared.columns(0, ns) * hs + pj.pose.columns(0, np) * hp;
            let r2 = ((moved - pj.residual) / ACCEL_FD_STEP - lin) * (2.0 / ACCEL_FD_STEP);
            let weight = huber_weight(pj.residual.norm(), delta);
            gs += pj.shared.columns(0, ns).transpose() * r2 * weight;
            g += pj.pose.columns(0, np).transpose() * r2 * weight;
        }
        gv.push(g);
    }
    damped_solve(n, mu, du, dv, &gs, &gv)
}

fn check_depths(theta: &ParameterVector, views: &[Vec<Correspondence>]) -> Result<(), RefineError> {
    for (vi, corrs) in views.iter().enumerate() {
        let depths: Vec<f64> = corrs.iter().map(|c| theta.camera_point(vi, &c.model).z).collect();
        if !depths.is_empty() && depths.iter().all(|&z| z <= MIN_DEPTH) {
            return Err(RefineError::Divergence(vi));
        }
        if let Some((pi, &z)) = depths.iter().enumerate().find(|(_, &z)| z <= MIN_DEPTH) {
            return Err(RefineError::BehindCamera {
                view: vi,
                point: pi,
                depth: z,
            });
        }
    }
    Ok(())
}

fn build_report(
    theta: &ParameterVector,
    views: &[Vec<Correspondence>],
    opts: &LmOptions,
    termination: Termination,
    iterations: usize,
    mu: f64,
    trace: Vec<f64>,
) -> Result<CalibrationReport, RefineError> {
    let res = residuals(theta, views)?;
    let norms: Vec<f64> = res.iter().map(Residual::norm).collect();
    let n = norms.len().max(1) as f64;
    let poses = (0..theta.n_views())
        .map(|i| {
            let (r, t) = theta.world_to_camera(i);
            PoseRecord {
                rotation: RotationRecord::from_matrix(&theta.rotation_matrix(i)),
                axis_angle: theta.rotations[i].into(),
                world_to_camera: RotationRecord::from_matrix(&r),
                translation: t.into(),
            }
        })
        .collect();
    Ok(CalibrationReport {
        mode: theta.mode(),
        intrinsics: theta.intrinsics,
        distortion: theta.distortion,
        offset: theta.offset(),
        poses,
        huber_delta: opts.huber_delta,
        termination,
        iterations,
        final_damping: mu,
        initial_cost: trace[0],
        final_cost: *trace.last().unwrap(),
        cost_trace: trace,
        point_count: norms.len(),
        rms_error: (norms.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mean_error: norms.iter().sum::<f64>() / n,
        max_error: norms.iter().copied().fold(0.0, f64::max),
        residuals: res,
    })
}

/// Levenberg-Marquardt on the Huber-robust reprojection cost.
///
/// `views[i]` holds the correspondences of view `i` and must line up with
/// `init.rotations[i]`. The damping factor is divided by 10 after an
/// accepted step and multiplied by 10 after a rejected one.
pub fn optimize(
    init: &ParameterVector,
    views: &[Vec<Correspondence>],
    opts: &LmOptions,
) -> Result<(ParameterVector, CalibrationReport), RefineError> {
    if views.len() != init.n_views() {
        return Err(RefineError::ViewMismatch {
            expected: init.n_views(),
            found: views.len(),
        });
    }
    if views.len() < 2 {
        return Err(RefineError::InsufficientViews(views.len()));
    }
    let points: usize = views.iter().map(Vec::len).sum();
    if points < init.len() {
        return Err(RefineError::Underdetermined {
            points,
            residuals: 2 * points,
            params: init.len(),
        });
    }
    if let Some(d) = opts.huber_delta {
        if d.is_nan() || d <= 0.0 {
            return Err(RefineError::InvalidDelta(d));
        }
    }
    check_depths(init, views)?;

    let delta = opts.delta();
    let tol = opts.relative_tolerance;
    let floor = cost_floor(views);
    let mut theta = init.clone();
    let mut mu = opts.initial_damping;
    let mut normal = linearize(&theta, views, delta)?;
    let mut trace = vec![normal.cost];
    let mut iterations = 0;

    let termination = 'outer: loop {
        if normal.cost <= floor {
            break Termination::Converged;
        }
        if iterations >= opts.max_iterations {
            break Termination::MaxIterations;
        }
        iterations += 1;
        let (du, dv) = damping_diagonals(&normal);
        loop {
            if let Some((h, pred)) = damped_step(&normal, mu, &du, &dv) {
                let small_pred =
                    pred <= tol * normal.cost || negligible_step(&h, &parameter_scales(&theta));
                // plain step when the correction is too large to trust
                let step = acceleration(&theta, views, delta, &normal, mu, &du, &dv, &h)
                    .filter(|a| {
                        2.0 * (scaled_norm2(a, &du, &dv) / scaled_norm2(&h, &du, &dv)).sqrt()
                            <= ACCEL_RATIO
                    })
                    .map_or_else(|| h.clone(), |a| &h + a * 0.5);
                let candidate = theta.apply_update(&step);
                let cost = robust_cost(&candidate, views, delta).map(|c| (candidate, c));
                match cost {
                    Some((candidate, c)) if c < normal.cost => {
                        let rel = (normal.cost - c) / normal.cost;
                        theta = candidate;
                        mu = (mu / 10.0).max(opts.min_damping);
                        normal = linearize(&theta, views, delta)?;
                        // same value up to summation order
                        normal.cost = c;
                        debug_assert!(normal.cost <= *trace.last().unwrap());
                        trace.push(normal.cost);
                        if rel < tol || small_pred {
                            break 'outer Termination::Converged;
                        }
                        continue 'outer;
                    }
                    _ if small_pred || normal.cost <= floor => {
                        break 'outer Termination::Converged
                    }
                    _ => {}
                }
            }
            mu *= 10.0;
            if mu > opts.max_damping {
                let report = build_report(
                    &theta,
                    views,
                    opts,
                    Termination::NonConvergence,
                    iterations,
                    mu,
                    trace,
                )?;
                return Err(RefineError::NonConvergence {
                    report: Box::new(report),
                });
            }
        }
    };

    let report = build_report(&theta, views, opts, termination, iterations, mu, trace)?;
    Ok((theta, report))
}
