//! Consistent video depth with a per-pixel uncertainty map.
//!
//! Free parameters are one log-depth grid and one uncertainty grid `Omega`
//! per frame; poses and intrinsics are fixed. The objective is
//!
//! `lambda_flow L_flow + lambda_temp L_temp + lambda_prior L_prior`
//!
//! where the pairwise terms run over adjacent frames in both directions and
//! the prior ties each frame to its initial depth through a scale-invariant
//! log term, multi-scale log-depth gradients and surface normals. In mask mode
//! `Omega` starts at `1 - M` (clamped to `[0.01, 1]`) and is fine-tuned with a
//! smaller step; in free mode it starts at 1.

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, PoseSE3};
use crate::mask_ops::DynamicMaskSequence;
use crate::optim::{sign0, Adam, Schedule, Trace};
use crate::raster::{Bilinear, DepthMap, Raster};
use crate::scene_io::FrameBundle;

pub const OMEGA_MIN: f64 = 0.01;
pub const OMEGA_MAX: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UncertaintyMode {
    /// Initialize from the dynamic mask, fine-tune slowly.
    Mask,
    /// Initialize to 1 and optimize at the full step.
    Free,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CvdConfig {
    pub lambda_flow: f64,
    pub lambda_temp: f64,
    pub lambda_prior: f64,
    pub lambda_grad: f64,
    pub lambda_normal: f64,
    pub grad_scales: usize,
    pub steps: usize,
    pub depth_lr: f64,
    pub lr_floor: f64,
    pub uncertainty: UncertaintyMode,
    /// Optimization resolution; `None` keeps the input resolution.
    pub resolution: Option<(usize, usize)>,
    /// Integer upsampling factor applied to the optimized depth.
    pub upsample: usize,
}

impl Default for CvdConfig {
    fn default() -> Self {
        Self {
            lambda_flow: 1.0,
            lambda_temp: 0.2,
            lambda_prior: 1.0,
            lambda_grad: 1.0,
            lambda_normal: 4.0,
            grad_scales: 4,
            steps: 300,
            depth_lr: 1e-2,
            lr_floor: 0.01,
            uncertainty: UncertaintyMode::Mask,
            resolution: Some((336, 144)),
            upsample: 2,
        }
    }
}

impl CvdConfig {
    /// Step size of `Omega` relative to the depth step.
    pub fn omega_lr_ratio(&self) -> f64 {
        match self.uncertainty {
            UncertaintyMode::Mask => 0.1,
            UncertaintyMode::Free => 1.0,
        }
    }
}

/// Image grid with pixel centers at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

/// Value and gradients of one directed pair term. `depth_from` / `omega`
/// index pixels of the source frame, `depth_to` those of the target frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PairEvaluation {
    pub value: f64,
    /// Pixels whose flow target landed inside the image.
    pub valid: usize,
    pub depth_from: Vec<f64>,
    pub depth_to: Vec<f64>,
    pub omega: Vec<f64>,
}

impl PairEvaluation {
    fn zeros(n: usize) -> Self {
        Self {
            value: 0.0,
            valid: 0,
            depth_from: vec![0.0; n],
            depth_to: vec![0.0; n],
            omega: vec![0.0; n],
        }
    }
}

/// Everything a directed pair term needs besides the parameters.
#[derive(Clone, Copy, Debug)]
pub struct PairGeometry<'a> {
    pub grid: Grid,
    pub intrinsics: &'a Intrinsics,
    /// Source-camera to target-camera transform.
    pub relative: &'a PoseSE3,
    /// Two-channel flow from source to target.
    pub flow: &'a Raster<f64>,
}

struct Warp {
    /// Camera-frame point of the source pixel (unit log-depth derivative).
    x: Vector3<f64>,
    /// Point in the target camera.
    y: Vector3<f64>,
    /// Flow target.
    q: Vector2<f64>,
    bilinear: Bilinear,
}

fn warp(g: &PairGeometry<'_>, log_depth: &[f64], px: usize, py: usize) -> Option<Warp> {
    let p = Vector2::new(px as f64, py as f64);
    let q = p + Vector2::new(g.flow.get(px, py, 0), g.flow.get(px, py, 1));
    let bilinear = Bilinear::at(&q, g.grid.width, g.grid.height)?;
    let x = g.intrinsics.ray(&p) * log_depth[g.grid.idx(px, py)].exp();
    let y = g.relative.transform(&x);
    if !(y.z > 0.0) {
        return None;
    }
    Some(Warp { x, y, q, bilinear })
}

/// `sum_p Omega |pi(P x(p)) - (p + F(p))|_1 + log(1 / Omega)` over pixels whose
/// flow target lies inside the image.
pub fn flow_loss(g: &PairGeometry<'_>, log_depth: &[f64], omega: &[f64]) -> PairEvaluation {
    let n = g.grid.len();
    let k = g.intrinsics;
    let rot = g.relative.rotation();
    let mut out = PairEvaluation::zeros(n);
    for py in 0..g.grid.height {
        for px in 0..g.grid.width {
            let Some(w) = warp(g, log_depth, px, py) else {
                continue;
            };
            let i = g.grid.idx(px, py);
            let inv_z = 1.0 / w.y.z;
            let proj = Vector2::new(k.fx * w.y.x * inv_z + k.cx, k.fy * w.y.y * inv_z + k.cy);
            let r = proj - w.q;
            let l1 = r.x.abs() + r.y.abs();
            let om = omega[i];
            out.value += om * l1 - om.ln();
            out.valid += 1;
            let s = Vector2::new(sign0(r.x), sign0(r.y));
            let g_y = Vector3::new(
                s.x * k.fx * inv_z,
                s.y * k.fy * inv_z,
                -(s.x * k.fx * w.y.x + s.y * k.fy * w.y.y) * inv_z * inv_z,
            );
            out.depth_from[i] += om * g_y.dot(&(rot * w.x));
            out.omega[i] += l1 - 1.0 / om;
        }
    }
    out
}

/// `max(a / b, b / a)`.
pub fn depth_ratio(a: f64, b: f64) -> f64 {
    (a / b).max(b / a)
}

/// `sum_p Omega max(a/b, b/a) + log(1 / Omega)` with `a` the warped depth and
/// `b` the target depth bilinearly sampled at the flow target.
pub fn temporal_loss(g: &PairGeometry<'_>, log_depth: &[f64], log_depth_to: &[f64], omega: &[f64]) -> PairEvaluation {
    let n = g.grid.len();
    let rot = g.relative.rotation();
    let mut out = PairEvaluation::zeros(n);
    for py in 0..g.grid.height {
        for px in 0..g.grid.width {
            let Some(w) = warp(g, log_depth, px, py) else {
                continue;
            };
            let i = g.grid.idx(px, py);
            let a = w.y.z;
            let corners = w.bilinear.corners();
            let b: f64 = corners
                .iter()
                .map(|&(cx, cy, cw)| cw * log_depth_to[g.grid.idx(cx, cy)].exp())
                .sum();
            let om = omega[i];
            let delta = depth_ratio(a, b);
            out.value += om * delta - om.ln();
            out.valid += 1;
            let (da, db) = if a >= b { (1.0 / b, -a / (b * b)) } else { (-b / (a * a), 1.0 / a) };
            out.depth_from[i] += om * da * (rot * w.x).z;
            for &(cx, cy, cw) in &corners {
                let j = g.grid.idx(cx, cy);
                out.depth_to[j] += om * db * cw * log_depth_to[j].exp();
            }
            out.omega[i] += delta - 1.0 / om;
        }
    }
    out
}

/// Scale-invariant log loss `mean(R^2) - mean(R)^2` and its gradient.
pub fn si_loss(residual: &[f64]) -> (f64, Vec<f64>) {
    let n = residual.len() as f64;
    let sum: f64 = residual.iter().sum();
    let sq: f64 = residual.iter().map(|r| r * r).sum();
    let mean = sum / n;
    let value = sq / n - mean * mean;
    let grad = residual.iter().map(|r| 2.0 * r / n - 2.0 * mean / n).collect();
    (value, grad)
}

fn pool2(values: &[f64], grid: Grid) -> (Vec<f64>, Grid) {
    let half = Grid {
        width: grid.width / 2,
        height: grid.height / 2,
    };
    let mut out = vec![0.0; half.len()];
    for y in 0..half.height {
        for x in 0..half.width {
            out[half.idx(x, y)] = 0.25
                * (values[grid.idx(2 * x, 2 * y)]
                    + values[grid.idx(2 * x + 1, 2 * y)]
                    + values[grid.idx(2 * x, 2 * y + 1)]
                    + values[grid.idx(2 * x + 1, 2 * y + 1)]);
        }
    }
    (out, half)
}

fn unpool2(grad: &[f64], half: Grid, grid: Grid) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    for y in 0..half.height {
        for x in 0..half.width {
            let g = 0.25 * grad[half.idx(x, y)];
            out[grid.idx(2 * x, 2 * y)] += g;
            out[grid.idx(2 * x + 1, 2 * y)] += g;
            out[grid.idx(2 * x, 2 * y + 1)] += g;
            out[grid.idx(2 * x + 1, 2 * y + 1)] += g;
        }
    }
    out
}

/// `(1/N) sum_s sum_p |dx R^s| + |dy R^s|` with forward differences (zero on
/// the last row/column) and `R^s` the residual average-pooled `s` times.
/// `N` is the full-resolution pixel count.
pub fn grad_loss(residual: &[f64], grid: Grid, scales: usize) -> (f64, Vec<f64>) {
    let norm = 1.0 / grid.len() as f64;
    let mut levels = vec![(residual.to_vec(), grid)];
    for _ in 1..scales {
        let (v, g) = levels.last().expect("non-empty");
        if g.width < 2 || g.height < 2 {
            break;
        }
        let next = pool2(v, *g);
        levels.push(next);
    }
    let mut value = 0.0;
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(levels.len());
    for (v, g) in &levels {
        let mut gr = vec![0.0; g.len()];
        for y in 0..g.height {
            for x in 0..g.width {
                let i = g.idx(x, y);
                if x + 1 < g.width {
                    let d = v[g.idx(x + 1, y)] - v[i];
                    value += norm * d.abs();
                    let s = norm * sign0(d);
                    gr[g.idx(x + 1, y)] += s;
                    gr[i] -= s;
                }
                if y + 1 < g.height {
                    let d = v[g.idx(x, y + 1)] - v[i];
                    value += norm * d.abs();
                    let s = norm * sign0(d);
                    gr[g.idx(x, y + 1)] += s;
                    gr[i] -= s;
                }
            }
        }
        grads.push(gr);
    }
    // back-propagate coarse levels through the pooling
    let mut acc = grads.pop().expect("at least one level");
    for level in (0..grads.len()).rev() {
        let fine = levels[level].1;
        let coarse = levels[level + 1].1;
        let up = unpool2(&acc, coarse, fine);
        acc = grads[level].iter().zip(&up).map(|(a, b)| a + b).collect();
    }
    (value, acc)
}

fn points(log_depth: &[f64], grid: Grid, k: &Intrinsics) -> Vec<Vector3<f64>> {
    (0..grid.len())
        .map(|i| {
            let p = Vector2::new((i % grid.width) as f64, (i / grid.width) as f64);
            k.ray(&p) * log_depth[i].exp()
        })
        .collect()
}

/// Unit normals from central differences of back-projected neighbours;
/// `None` on the border and where the cross product vanishes.
pub fn surface_normals(log_depth: &[f64], grid: Grid, k: &Intrinsics) -> Vec<Option<Vector3<f64>>> {
    let pts = points(log_depth, grid, k);
    let mut out = vec![None; grid.len()];
    if grid.width < 3 || grid.height < 3 {
        return out;
    }
    for y in 1..grid.height - 1 {
        for x in 1..grid.width - 1 {
            let a = pts[grid.idx(x + 1, y)] - pts[grid.idx(x - 1, y)];
            let b = pts[grid.idx(x, y + 1)] - pts[grid.idx(x, y - 1)];
            let c = a.cross(&b);
            let len = c.norm();
            if len > 0.0 && len.is_finite() {
                out[grid.idx(x, y)] = Some(c / len);
            }
        }
    }
    out
}

/// `sum_p 1 - n_hat(p) . n_ref(p)` over pixels where both normals exist.
pub fn normal_loss(
    log_depth: &[f64],
    grid: Grid,
    k: &Intrinsics,
    reference: &[Option<Vector3<f64>>],
) -> (f64, Vec<f64>) {
    let pts = points(log_depth, grid, k);
    let mut value = 0.0;
    let mut grad = vec![0.0; grid.len()];
    if grid.width < 3 || grid.height < 3 {
        return (value, grad);
    }
    for y in 1..grid.height - 1 {
        for x in 1..grid.width - 1 {
            let Some(nref) = reference[grid.idx(x, y)] else {
                continue;
            };
            let (ia, ib) = (grid.idx(x + 1, y), grid.idx(x - 1, y));
            let (ic, id) = (grid.idx(x, y + 1), grid.idx(x, y - 1));
            let a = pts[ia] - pts[ib];
            let b = pts[ic] - pts[id];
            let c = a.cross(&b);
            let len = c.norm();
            if !(len > 0.0 && len.is_finite()) {
                continue;
            }
            let n = c / len;
            value += 1.0 - n.dot(&nref);
            let g_c = -(Matrix3::identity() - n * n.transpose()) * nref / len;
            let g_a = b.cross(&g_c);
            let g_b = g_c.cross(&a);
            grad[ia] += g_a.dot(&pts[ia]);
            grad[ib] -= g_a.dot(&pts[ib]);
            grad[ic] += g_b.dot(&pts[ic]);
            grad[id] -= g_b.dot(&pts[id]);
        }
    }
    (value, grad)
}

/// Component values of the prior for one frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PriorTerms {
    pub si: f64,
    pub grad: f64,
    pub normal: f64,
}

/// `L_si + lambda_grad L_grad + lambda_normal L_normal` on
/// `R = log D_hat - log D`.
pub fn prior_loss(
    log_depth: &[f64],
    prior_log_depth: &[f64],
    prior_normals: &[Option<Vector3<f64>>],
    grid: Grid,
    k: &Intrinsics,
    config: &CvdConfig,
) -> (f64, Vec<f64>, PriorTerms) {
    let r: Vec<f64> = log_depth.iter().zip(prior_log_depth).map(|(a, b)| a - b).collect();
    let (si, g_si) = si_loss(&r);
    let (gl, g_gl) = grad_loss(&r, grid, config.grad_scales);
    let (nl, g_nl) = normal_loss(log_depth, grid, k, prior_normals);
    let value = si + config.lambda_grad * gl + config.lambda_normal * nl;
    let grad = (0..grid.len())
        .map(|i| g_si[i] + config.lambda_grad * g_gl[i] + config.lambda_normal * g_nl[i])
        .collect();
    (value, grad, PriorTerms { si, grad: gl, normal: nl })
}

/// Optimization state at the working resolution.
#[derive(Clone, Debug)]
pub struct CvdProblem {
    pub grid: Grid,
    pub intrinsics: Intrinsics,
    pub poses: Vec<PoseSE3>,
    pub log_depth: Vec<Vec<f64>>,
    pub omega: Vec<Vec<f64>>,
    pub prior_log_depth: Vec<Vec<f64>>,
    pub prior_normals: Vec<Vec<Option<Vector3<f64>>>>,
    /// `flows_forward[t]`: frame `t` to `t + 1`.
    pub flows_forward: Vec<Raster<f64>>,
    /// `flows_backward[t]`: frame `t + 1` to `t`, when available.
    pub flows_backward: Vec<Option<Raster<f64>>>,
}

/// Directed pairs `(from, to, flow)` over adjacent frames.
fn pairs(problem: &CvdProblem) -> Vec<(usize, usize, &Raster<f64>)> {
    let mut out = Vec::new();
    for t in 0..problem.flows_forward.len() {
        out.push((t, t + 1, &problem.flows_forward[t]));
        if let Some(b) = &problem.flows_backward[t] {
            out.push((t + 1, t, b));
        }
    }
    out
}

/// Breakdown of the objective, with the pairwise temporal value also reported
/// without its constant per-pixel offset of 1.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CvdTerms {
    pub flow: f64,
    pub temporal: f64,
    pub temporal_offset_free: f64,
    pub prior: f64,
    pub total: f64,
}

/// Objective value and gradient laid out as `[log-depths | omegas]`, each
/// frame-major.
pub fn cvd_objective(problem: &CvdProblem, config: &CvdConfig) -> (CvdTerms, Vec<f64>) {
    let n = problem.grid.len();
    let frames = problem.log_depth.len();
    let mut grad = vec![0.0; 2 * frames * n];
    let pair_list = pairs(problem);
    let pair_evals: Vec<(PairEvaluation, PairEvaluation)> = pair_list
        .par_iter()
        .map(|&(i, j, flow)| {
            let rel = problem.poses[j].inverse().compose(&problem.poses[i]);
            let g = PairGeometry {
                grid: problem.grid,
                intrinsics: &problem.intrinsics,
                relative: &rel,
                flow,
            };
            let f = flow_loss(&g, &problem.log_depth[i], &problem.omega[i]);
            let t = temporal_loss(&g, &problem.log_depth[i], &problem.log_depth[j], &problem.omega[i]);
            (f, t)
        })
        .collect();
    let priors: Vec<(f64, Vec<f64>, PriorTerms)> = (0..frames)
        .into_par_iter()
        .map(|t| {
            prior_loss(
                &problem.log_depth[t],
                &problem.prior_log_depth[t],
                &problem.prior_normals[t],
                problem.grid,
                &problem.intrinsics,
                config,
            )
        })
        .collect();

    let mut terms = CvdTerms::default();
    let omega_base = frames * n;
    for (&(i, j, _), (f, t)) in pair_list.iter().zip(&pair_evals) {
        terms.flow += f.value;
        terms.temporal += t.value;
        terms.temporal_offset_free += t.value - t.valid as f64;
        for p in 0..n {
            grad[i * n + p] += config.lambda_flow * f.depth_from[p] + config.lambda_temp * t.depth_from[p];
            grad[j * n + p] += config.lambda_temp * t.depth_to[p];
            grad[omega_base + i * n + p] += config.lambda_flow * f.omega[p] + config.lambda_temp * t.omega[p];
        }
    }
    for (t, (v, g, _)) in priors.iter().enumerate() {
        terms.prior += v;
        for p in 0..n {
            grad[t * n + p] += config.lambda_prior * g[p];
        }
    }
    terms.total = config.lambda_flow * terms.flow + config.lambda_temp * terms.temporal + config.lambda_prior * terms.prior;
    (terms, grad)
}

fn check_dims(frames: &[FrameBundle]) -> Result<(usize, usize)> {
    let first = frames.first().ok_or(Error::WindowTooShort { got: 0, need: 2 })?;
    if frames.len() < 2 {
        return Err(Error::WindowTooShort { got: 1, need: 2 });
    }
    let dims = (first.width, first.height);
    for f in frames {
        if (f.width, f.height) != dims {
            return Err(Error::DimensionMismatch(format!("frame {} size differs", f.index)));
        }
    }
    for f in &frames[..frames.len() - 1] {
        if f.flow_forward.is_none() {
            return Err(Error::Validation(format!("frame {} has no forward flow", f.index)));
        }
    }
    Ok(dims)
}

fn resample_flow(flow: &Raster<f32>, w: usize, h: usize) -> Raster<f64> {
    let (sw, sh) = (w as f64 / flow.width() as f64, h as f64 / flow.height() as f64);
    let f = flow.to_f64();
    let f = if flow.dims() == (w, h) { f } else { f.resample_bilinear(w, h) };
    Raster::from_fn(w, h, 2, |x, y, c| f.get(x, y, c) * if c == 0 { sw } else { sh })
}

/// Builds the problem at the configured resolution. `masks` drives the
/// uncertainty initialization in mask mode and may be `None` otherwise.
pub fn build_problem(
    frames: &[FrameBundle],
    poses: &[PoseSE3],
    intrinsics: &Intrinsics,
    masks: Option<&DynamicMaskSequence>,
    config: &CvdConfig,
) -> Result<CvdProblem> {
    let (w0, h0) = check_dims(frames)?;
    if poses.len() != frames.len() {
        return Err(Error::DimensionMismatch(format!("{} poses for {} frames", poses.len(), frames.len())));
    }
    let (w, h) = config.resolution.unwrap_or((w0, h0));
    let grid = Grid { width: w, height: h };
    let k = intrinsics.rescaled(w as f64 / w0 as f64, h as f64 / h0 as f64);
    let mut prior_log_depth = Vec::with_capacity(frames.len());
    for f in frames {
        if f.depth.data().iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::NonPositiveDepth(
                f.depth.data().iter().copied().find(|&d| !(d > 0.0) || !d.is_finite()).unwrap_or(0.0) as f64,
            ));
        }
        let d = f.depth.to_f64();
        let d = if (w, h) == (w0, h0) { d } else { d.resample_bilinear(w, h) };
        prior_log_depth.push(d.data().iter().map(|v| v.ln()).collect::<Vec<f64>>());
    }
    let prior_normals = prior_log_depth.iter().map(|l| surface_normals(l, grid, &k)).collect();
    let omega = match config.uncertainty {
        UncertaintyMode::Free => vec![vec![OMEGA_MAX; grid.len()]; frames.len()],
        UncertaintyMode::Mask => {
            let m = match masks {
                Some(m) => m.resampled(w, h),
                None => DynamicMaskSequence {
                    masks: frames.iter().map(|f| f.mask.clone()).collect(),
                }
                .resampled(w, h),
            };
            if m.len() != frames.len() {
                return Err(Error::DimensionMismatch(format!("{} masks for {} frames", m.len(), frames.len())));
            }
            m.masks
                .iter()
                .map(|mk| {
                    mk.data()
                        .iter()
                        .map(|&v| (1.0 - v as f64).clamp(OMEGA_MIN, OMEGA_MAX))
                        .collect()
                })
                .collect()
        }
    };
    let n = frames.len();
    Ok(CvdProblem {
        grid,
        intrinsics: k,
        poses: poses.to_vec(),
        log_depth: prior_log_depth.clone(),
        omega,
        prior_log_depth,
        prior_normals,
        flows_forward: frames[..n - 1]
            .iter()
            .map(|f| resample_flow(f.flow_forward.as_ref().expect("checked"), w, h))
            .collect(),
        flows_backward: frames[1..]
            .iter()
            .map(|f| f.flow_backward.as_ref().map(|b| resample_flow(b, w, h)))
            .collect(),
    })
}

#[derive(Clone, Debug)]
pub struct DepthSolution {
    pub grid: Grid,
    /// Optimized depth at the working resolution.
    pub depths: Vec<Raster<f64>>,
    pub omega: Vec<Raster<f64>>,
    /// Depth upsampled by the configured factor.
    pub upsampled: Vec<DepthMap>,
    pub trace: Trace,
    pub initial_terms: CvdTerms,
    pub final_terms: CvdTerms,
}

/// Runs Adam on the problem and returns the best-so-far state.
pub fn solve(problem: &CvdProblem, config: &CvdConfig) -> Result<DepthSolution> {
    let n = problem.grid.len();
    let frames = problem.log_depth.len();
    let mut state = problem.clone();
    let mut best = (state.log_depth.clone(), state.omega.clone());
    let mut best_value = f64::INFINITY;
    let mut trace = Trace::default();
    let mut adam = Adam::new(2 * frames * n);
    let schedule = Schedule {
        base: config.depth_lr,
        floor: config.lr_floor,
    };
    let ratio = config.omega_lr_ratio();
    let mut initial_terms = None;
    let mut best_terms = CvdTerms::default();
    for step in 0..=config.steps {
        let (terms, grad) = cvd_objective(&state, config);
        if !terms.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergenceDetected { step, value: terms.total });
        }
        initial_terms.get_or_insert(terms);
        trace.push(terms.total);
        if terms.total < best_value {
            best_value = terms.total;
            best = (state.log_depth.clone(), state.omega.clone());
            best_terms = terms;
        }
        if step == config.steps {
            break;
        }
        let lr = schedule.at(step, config.steps);
        let delta = adam.step(&grad, |i| if i < frames * n { lr } else { lr * ratio });
        for t in 0..frames {
            for p in 0..n {
                state.log_depth[t][p] -= delta[t * n + p];
                let o = &mut state.omega[t][p];
                *o = (*o - delta[(frames + t) * n + p]).clamp(OMEGA_MIN, OMEGA_MAX);
            }
        }
    }
    let grid = problem.grid;
    let to_raster = |v: &[f64]| Raster::from_vec(grid.width, grid.height, 1, v.to_vec()).expect("grid sized");
    let depths: Vec<Raster<f64>> = best.0.iter().map(|l| to_raster(&l.iter().map(|x| x.exp()).collect::<Vec<_>>())).collect();
    let up = config.upsample.max(1);
    let upsampled = depths
        .iter()
        .map(|d| {
            if up == 1 {
                d.to_f32()
            } else {
                d.resample_bilinear(grid.width * up, grid.height * up).to_f32()
            }
        })
        .collect();
    Ok(DepthSolution {
        grid,
        depths,
        omega: best.1.iter().map(|o| to_raster(o)).collect(),
        upsampled,
        trace,
        initial_terms: initial_terms.unwrap_or_default(),
        final_terms: best_terms,
    })
}

/// Builds and solves in one call.
pub fn optimize_depth(
    frames: &[FrameBundle],
    poses: &[PoseSE3],
    intrinsics: &Intrinsics,
    masks: Option<&DynamicMaskSequence>,
    config: &CvdConfig,
) -> Result<DepthSolution> {
    let problem = build_problem(frames, poses, intrinsics, masks, config)?;
    solve(&problem, config)
}
