//! Two-stage camera pose refinement.
//!
//! Stage one slides an 8-frame window with stride 1 over the sequence. In each
//! window a 16x16 grid of pixels in the first frame is chained through the
//! forward flows, giving tracks whose points carry a weight `m_i = 1 - M(p_i)`.
//! Poses, shared intrinsics and per-track anchor depths are fitted to the
//! masked L1 reprojection error plus a constant-velocity smoothness term.
//! Stage two refines all poses and all static anchor depths jointly.
//!
//! Parameter blocks are laid out as
//! `[6 per pose (omega, v) | log fx, log fy | one log-depth per track]`.
//! Pose gradients are taken with respect to a left perturbation
//! `T <- exp(xi) T` of the camera-to-world pose, evaluated at `xi = 0`.

use std::collections::VecDeque;

use nalgebra::{Matrix4, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::geometry::{se3_generators, Intrinsics, PoseSE3};
use crate::mask_ops::DynamicMaskSequence;
use crate::optim::{sign0, Adam, LossEvaluation, Schedule, Trace};
use crate::scene_io::FrameBundle;

pub const WINDOW_LEN: usize = 8;
pub const GRID_SIZE: usize = 16;

/// Flow-chained track anchored at one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PointTrack {
    pub anchor_frame: usize,
    /// Chained pixel positions; `points[0]` is the anchor pixel.
    pub points: Vec<Vector2<f64>>,
    /// `m_i`: 1 keeps the reprojection term, 0 drops it.
    pub mask_weights: Vec<f64>,
    /// Number of leading points that stayed inside the image.
    pub valid_len: usize,
    log_depth: f64,
}

impl PointTrack {
    pub fn new(
        anchor_frame: usize,
        points: Vec<Vector2<f64>>,
        mask_weights: Vec<f64>,
        anchor_depth: f64,
    ) -> Result<Self> {
        if !(anchor_depth > 0.0) {
            return Err(Error::NonPositiveDepth(anchor_depth));
        }
        if points.len() != mask_weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} points but {} mask weights",
                points.len(),
                mask_weights.len()
            )));
        }
        let valid_len = points.len();
        Ok(Self {
            anchor_frame,
            points,
            mask_weights,
            valid_len,
            log_depth: anchor_depth.ln(),
        })
    }

    pub fn anchor_depth(&self) -> f64 {
        self.log_depth.exp()
    }

    pub fn log_depth(&self) -> f64 {
        self.log_depth
    }

    pub fn set_log_depth(&mut self, v: f64) {
        self.log_depth = v;
    }

    /// No in-image point of the track is flagged dynamic.
    pub fn is_static(&self) -> bool {
        self.mask_weights[..self.valid_len].iter().all(|&m| m == 1.0)
    }
}

/// Poses, shared intrinsics and tracks for one optimization problem. Poses
/// cover consecutive frames starting at `first_frame`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowProblem {
    pub first_frame: usize,
    pub poses: Vec<PoseSE3>,
    pub intrinsics: Intrinsics,
    pub tracks: Vec<PointTrack>,
}

impl WindowProblem {
    pub fn param_len(&self) -> usize {
        6 * self.poses.len() + 2 + self.tracks.len()
    }

    fn intrinsics_offset(&self) -> usize {
        6 * self.poses.len()
    }

    fn depth_offset(&self) -> usize {
        6 * self.poses.len() + 2
    }

    /// Applies a parameter update: left-multiplied pose perturbations and
    /// additive steps on the log-parameters.
    pub fn retract(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.param_len());
        for (k, pose) in self.poses.iter_mut().enumerate() {
            let xi = Vector6::from_column_slice(&delta[6 * k..6 * k + 6]);
            if xi != Vector6::zeros() {
                *pose = pose.retract(&xi);
            }
        }
        let o = self.intrinsics_offset();
        self.intrinsics.fx = (self.intrinsics.fx.ln() + delta[o]).exp();
        self.intrinsics.fy = (self.intrinsics.fy.ln() + delta[o + 1]).exp();
        let o = self.depth_offset();
        for (t, d) in self.tracks.iter_mut().zip(&delta[o..]) {
            t.log_depth += d;
        }
    }
}

fn track_frame_index(problem: &WindowProblem, frame: usize) -> Option<usize> {
    frame
        .checked_sub(problem.first_frame)
        .filter(|&k| k < problem.poses.len())
}

/// Chains a 16x16 grid through the window's forward flows. `frames` must hold
/// at least 8 consecutive frames; masks are read from each frame bundle unless
/// `use_mask` is false, in which case every in-image weight is 1.
pub fn chain_tracks(frames: &[FrameBundle], grid: usize, use_mask: bool) -> Result<Vec<PointTrack>> {
    if frames.len() < WINDOW_LEN {
        return Err(Error::WindowTooShort {
            got: frames.len(),
            need: WINDOW_LEN,
        });
    }
    let frames = &frames[..WINDOW_LEN];
    for f in &frames[..WINDOW_LEN - 1] {
        if f.flow_forward.is_none() {
            return Err(Error::WindowTooShort {
                got: f.index - frames[0].index + 1,
                need: WINDOW_LEN,
            });
        }
    }
    let (w, h) = (frames[0].width, frames[0].height);
    let anchor = &frames[0];
    let masks = DynamicMaskSequence {
        masks: frames.iter().map(|f| f.mask.clone()).collect(),
    };
    let inside = |p: &Vector2<f64>| {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (w - 1) as f64 && p.y <= (h - 1) as f64
    };

    let mut tracks = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let x0 = ((gx as f64 + 0.5) * w as f64 / grid as f64).floor();
            let y0 = ((gy as f64 + 0.5) * h as f64 / grid as f64).floor();
            let p1 = Vector2::new(x0, y0);
            let depth = anchor.depth.get(x0 as usize, y0 as usize, 0) as f64;
            if !(depth > 0.0) {
                continue;
            }
            let mut points = Vec::with_capacity(WINDOW_LEN);
            let mut weights = Vec::with_capacity(WINDOW_LEN);
            let mut valid_len = 0;
            let mut p = p1;
            for i in 0..WINDOW_LEN {
                if i > 0 && valid_len == i {
                    let flow = frames[i - 1].flow_forward.as_ref().expect("checked above");
                    let fx = flow.bilinear(&p, 0);
                    let fy = flow.bilinear(&p, 1);
                    if let (Some(fx), Some(fy)) = (fx, fy) {
                        p += Vector2::new(fx, fy);
                    }
                }
                if valid_len == i && inside(&p) {
                    valid_len += 1;
                    let m = if use_mask {
                        1.0 - masks.masks[i].nearest(&p, 0) as f64
                    } else {
                        1.0
                    };
                    weights.push(m);
                } else {
                    weights.push(0.0);
                }
                points.push(p);
            }
            if valid_len < 2 {
                continue;
            }
            let mut t = PointTrack::new(anchor.index, points, weights, depth)?;
            t.valid_len = valid_len;
            tracks.push(t);
        }
    }
    Ok(tracks)
}

/// Masked L1 reprojection error summed over tracks and points `2..=8`.
pub fn reprojection_loss(problem: &WindowProblem) -> Result<LossEvaluation> {
    let mut eval = LossEvaluation::zeros(problem.param_len());
    let k = &problem.intrinsics;
    let io = problem.intrinsics_offset();
    let dof = problem.depth_offset();
    for (ti, track) in problem.tracks.iter().enumerate() {
        let depth = track.anchor_depth();
        if !(depth > 0.0) {
            return Err(Error::NonPositiveDepth(depth));
        }
        let Some(a) = track_frame_index(problem, track.anchor_frame) else {
            continue;
        };
        let pose_a = &problem.poses[a];
        let x1 = k.ray(&track.points[0]) * depth;
        let world = pose_a.transform(&x1);
        for i in 1..track.points.len() {
            let m = track.mask_weights[i];
            if m == 0.0 {
                continue;
            }
            let Some(b) = track_frame_index(problem, track.anchor_frame + i) else {
                continue;
            };
            let pose_b = &problem.poses[b];
            let rb = pose_b.rotation();
            let y = rb.transpose() * (world - pose_b.translation());
            if !(y.z > 0.0) {
                continue;
            }
            let inv_z = 1.0 / y.z;
            let proj = Vector2::new(k.fx * y.x * inv_z + k.cx, k.fy * y.y * inv_z + k.cy);
            let r = proj - track.points[i];
            eval.value += m * (r.x.abs() + r.y.abs());

            let g2 = Vector2::new(m * sign0(r.x), m * sign0(r.y));
            let g_y = Vector3::new(
                g2.x * k.fx * inv_z,
                g2.y * k.fy * inv_z,
                -(g2.x * k.fx * y.x + g2.y * k.fy * y.y) * inv_z * inv_z,
            );
            let g_w = rb * g_y;
            let rot_a = world.cross(&g_w);
            for c in 0..3 {
                eval.gradient[6 * a + c] += rot_a[c];
                eval.gradient[6 * a + 3 + c] += g_w[c];
                eval.gradient[6 * b + c] -= rot_a[c];
                eval.gradient[6 * b + 3 + c] -= g_w[c];
            }
            let g_x1 = pose_a.rotation().transpose() * g_w;
            eval.gradient[dof + ti] += g_x1.dot(&x1);
            eval.gradient[io] += g2.x * (proj.x - k.cx) - g_x1.x * x1.x;
            eval.gradient[io + 1] += g2.y * (proj.y - k.cy) - g_x1.y * x1.y;
        }
    }
    Ok(eval)
}

fn frobenius(a: &Matrix4<f64>, b: &Matrix4<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// Entrywise L1 deviation from constant velocity over every consecutive pose
/// triple. The gradient covers the 6-vector tangent of each pose.
pub fn smoothness_loss(poses: &[PoseSE3]) -> LossEvaluation {
    let mut eval = LossEvaluation::zeros(6 * poses.len());
    if poses.len() < 3 {
        return eval;
    }
    let gens = se3_generators();
    let mats: Vec<Matrix4<f64>> = poses.iter().map(|p| p.matrix()).collect();
    let invs: Vec<Matrix4<f64>> = poses.iter().map(|p| p.inverse().matrix()).collect();
    for t in 0..poses.len() - 2 {
        // (P^{t->t+1})^-1 P^{t+1->t+2} = T_t^-1 T_{t+1} T_{t+2}^-1 T_{t+1}
        let a = &invs[t];
        let b = &mats[t + 1];
        let c = &invs[t + 2];
        let d = &mats[t + 1];
        let abc = a * b * c;
        let m = abc * d;
        let diff = m - Matrix4::identity();
        eval.value += diff.abs().sum();
        let s = diff.map(sign0);
        let w1 = a.transpose() * s * (b * c * d).transpose();
        let w2 = abc.transpose() * s * d.transpose();
        for (j, g) in gens.iter().enumerate() {
            let g1 = frobenius(&w1, g);
            let g2 = frobenius(&w2, g);
            eval.gradient[6 * t + j] -= g1;
            eval.gradient[6 * (t + 1) + j] += g1 + g2;
            eval.gradient[6 * (t + 2) + j] -= g2;
        }
    }
    eval
}

/// `L_BA = L_repr + lambda_smooth * L_smooth` over the full parameter block.
pub fn ba_objective(problem: &WindowProblem, lambda_smooth: f64) -> Result<LossEvaluation> {
    let repr = reprojection_loss(problem)?;
    let smooth = smoothness_loss(&problem.poses);
    let mut total = repr;
    total.value += lambda_smooth * smooth.value;
    for (g, s) in total.gradient.iter_mut().zip(&smooth.gradient) {
        *g += lambda_smooth * s;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaConfig {
    pub lambda_smooth: f64,
    pub window_steps: usize,
    pub global_steps: usize,
    pub pose_lr: f64,
    pub intrinsics_lr: f64,
    pub depth_lr: f64,
    /// Final step size as a fraction of the initial one (cosine decay).
    pub lr_floor: f64,
    pub optimize_intrinsics: bool,
    pub use_mask: bool,
    pub grid: usize,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            lambda_smooth: 0.1,
            window_steps: 400,
            global_steps: 5000,
            pose_lr: 1e-3,
            intrinsics_lr: 1e-3,
            depth_lr: 1e-3,
            lr_floor: 0.01,
            optimize_intrinsics: true,
            use_mask: true,
            grid: GRID_SIZE,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WindowResult {
    pub problem: WindowProblem,
    pub trace: Trace,
}

/// Runs `steps` Adam iterations on the window. The first `fixed_poses` poses
/// are held constant (gauge). Returns the best-so-far state.
pub fn optimize_window(
    problem: &WindowProblem,
    config: &BaConfig,
    steps: usize,
    fixed_poses: usize,
) -> Result<WindowResult> {
    let mut current = problem.clone();
    let n = current.param_len();
    let io = current.intrinsics_offset();
    let dof = current.depth_offset();
    let mut adam = Adam::new(n);
    let mut trace = Trace::default();
    let mut best = current.clone();
    let mut best_value = f64::INFINITY;
    let schedule = |base: f64| Schedule {
        base,
        floor: config.lr_floor,
    };
    let (pose_s, intr_s, depth_s) = (
        schedule(config.pose_lr),
        schedule(config.intrinsics_lr),
        schedule(config.depth_lr),
    );

    for step in 0..=steps {
        let mut eval = ba_objective(&current, config.lambda_smooth)?;
        if !eval.is_finite() {
            return Err(Error::DivergenceDetected {
                step,
                value: eval.value,
            });
        }
        trace.push(eval.value);
        if eval.value < best_value {
            best_value = eval.value;
            best = current.clone();
        }
        if step == steps || eval.value == 0.0 {
            break;
        }
        eval.gradient[..6 * fixed_poses.min(current.poses.len())].fill(0.0);
        if !config.optimize_intrinsics {
            eval.gradient[io] = 0.0;
            eval.gradient[io + 1] = 0.0;
        }
        let delta = adam.step(&eval.gradient, |i| {
            let s = if i < io {
                &pose_s
            } else if i < dof {
                &intr_s
            } else {
                &depth_s
            };
            -s.at(step, steps)
        });
        current.retract(&delta);
    }
    Ok(WindowResult {
        problem: best,
        trace,
    })
}

#[derive(Clone, Debug)]
pub struct BaResult {
    pub poses: Vec<PoseSE3>,
    pub intrinsics: Intrinsics,
    /// Tracks used in the global stage, with refined anchor depths.
    pub tracks: Vec<PointTrack>,
    pub window_traces: Vec<Trace>,
    pub global_trace: Trace,
}

/// Full two-stage refinement over a frame stream. Only `WINDOW_LEN` frames are
/// held in memory at a time.
pub fn refine_sequence<I>(
    frames: I,
    initial_poses: &[PoseSE3],
    intrinsics: Intrinsics,
    config: &BaConfig,
) -> Result<BaResult>
where
    I: IntoIterator<Item = Result<FrameBundle>>,
{
    let total = initial_poses.len();
    if total < WINDOW_LEN {
        return Err(Error::WindowTooShort {
            got: total,
            need: WINDOW_LEN,
        });
    }
    let mut poses = initial_poses.to_vec();
    let mut intrinsics = intrinsics;
    let mut all_tracks = Vec::new();
    let mut window_traces = Vec::new();
    let mut buffer: VecDeque<FrameBundle> = VecDeque::with_capacity(WINDOW_LEN);
    let mut frames = frames.into_iter();
    let mut seen = 0usize;

    for t0 in 0..=total - WINDOW_LEN {
        while buffer.len() < WINDOW_LEN {
            let frame = frames.next().ok_or(Error::WindowTooShort {
                got: seen,
                need: total,
            })??;
            if frame.index != seen {
                return Err(Error::Validation(format!(
                    "frame stream out of order: got {}, expected {seen}",
                    frame.index
                )));
            }
            seen += 1;
            buffer.push_back(frame);
        }
        let window: Vec<FrameBundle> = buffer.iter().cloned().collect();
        if t0 > 0 {
            // constant-velocity hand-off for the newly entering frame
            let last = t0 + WINDOW_LEN - 1;
            let step = poses[last - 2].inverse().compose(&poses[last - 1]);
            poses[last] = poses[last - 1].compose(&step);
        }
        let tracks = chain_tracks(&window, config.grid, config.use_mask)?;
        let problem = WindowProblem {
            first_frame: t0,
            poses: poses[t0..t0 + WINDOW_LEN].to_vec(),
            intrinsics,
            tracks,
        };
        let result = optimize_window(&problem, config, config.window_steps, 1)?;
        poses[t0..t0 + WINDOW_LEN].copy_from_slice(&result.problem.poses);
        intrinsics = result.problem.intrinsics;
        all_tracks.extend(result.problem.tracks);
        window_traces.push(result.trace);
        buffer.pop_front();
    }

    let static_tracks: Vec<PointTrack> = all_tracks.into_iter().filter(|t| t.is_static()).collect();
    let problem = WindowProblem {
        first_frame: 0,
        poses,
        intrinsics,
        tracks: static_tracks,
    };
    let result = optimize_window(&problem, config, config.global_steps, 1)?;
    Ok(BaResult {
        poses: result.problem.poses,
        intrinsics: result.problem.intrinsics,
        tracks: result.problem.tracks,
        window_traces,
        global_trace: result.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;

    fn flat_frames(n: usize, w: usize, h: usize, flow: (f32, f32)) -> Vec<FrameBundle> {
        (0..n)
            .map(|t| FrameBundle {
                index: t,
                width: w,
                height: h,
                depth: Raster::filled(w, h, 1, 2.0),
                flow_forward: (t + 1 < n)
                    .then(|| Raster::from_fn(w, h, 2, |_, _, c| if c == 0 { flow.0 } else { flow.1 })),
                flow_backward: None,
                mask: Raster::filled(w, h, 1, 0),
            })
            .collect()
    }

    #[test]
    fn zero_flow_chains_in_place() {
        let frames = flat_frames(8, 32, 32, (0.0, 0.0));
        let tracks = chain_tracks(&frames, GRID_SIZE, true).unwrap();
        assert_eq!(tracks.len(), 256);
        for t in &tracks {
            assert!(t.points.iter().all(|p| *p == t.points[0]));
            assert!(t.mask_weights.iter().all(|&m| m == 1.0));
            assert_eq!(t.anchor_depth(), 2.0);
        }
    }

    #[test]
    fn constant_flow_chains_linearly() {
        let frames = flat_frames(8, 64, 32, (1.0, 0.0));
        let tracks = chain_tracks(&frames, GRID_SIZE, true).unwrap();
        let t = &tracks[0];
        for (i, p) in t.points.iter().enumerate() {
            assert_eq!(*p, t.points[0] + Vector2::new(i as f64, 0.0));
        }
    }

    #[test]
    fn exiting_track_is_truncated() {
        let frames = flat_frames(8, 64, 32, (1.0, 0.0));
        let tracks = chain_tracks(&frames, GRID_SIZE, true).unwrap();
        // rightmost grid column starts at x = 62, one pixel from the border
        let t = tracks.iter().find(|t| t.points[0].x == 62.0).unwrap();
        assert_eq!(t.valid_len, 2);
        assert_eq!(t.mask_weights, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn window_too_short() {
        let frames = flat_frames(5, 16, 16, (0.0, 0.0));
        assert!(matches!(
            chain_tracks(&frames, GRID_SIZE, true),
            Err(Error::WindowTooShort { .. })
        ));
    }

    #[test]
    fn masked_pixels_get_zero_weight() {
        let mut frames = flat_frames(8, 32, 32, (0.0, 0.0));
        for f in &mut frames[3..] {
            f.mask = Raster::from_fn(32, 32, 1, |x, _, _| (x < 16) as u8);
        }
        let tracks = chain_tracks(&frames, GRID_SIZE, true).unwrap();
        let left = tracks.iter().find(|t| t.points[0].x < 16.0).unwrap();
        assert_eq!(left.mask_weights, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(!left.is_static());
        let unmasked = chain_tracks(&frames, GRID_SIZE, false).unwrap();
        assert!(unmasked.iter().all(|t| t.is_static()));
    }

    #[test]
    fn static_problem_is_fixed_point() {
        let frames = flat_frames(8, 32, 32, (0.0, 0.0));
        let problem = WindowProblem {
            first_frame: 0,
            poses: vec![PoseSE3::identity(); 8],
            intrinsics: Intrinsics::centered(30.0, 30.0, 32, 32).unwrap(),
            tracks: chain_tracks(&frames, GRID_SIZE, true).unwrap(),
        };
        let eval = ba_objective(&problem, 0.1).unwrap();
        assert_eq!(eval.value, 0.0);
        let result = optimize_window(&problem, &BaConfig::default(), 50, 1).unwrap();
        assert!(result.trace.values.iter().all(|&v| v == 0.0));
        assert_eq!(result.problem, problem);
    }

    #[test]
    fn fully_masked_tracks_vanish() {
        let frames = flat_frames(8, 32, 32, (0.5, 0.25));
        let mut tracks = chain_tracks(&frames, GRID_SIZE, true).unwrap();
        for t in &mut tracks {
            t.mask_weights.iter_mut().for_each(|m| *m = 0.0);
        }
        let problem = WindowProblem {
            first_frame: 0,
            poses: (0..8)
                .map(|i| PoseSE3::exp(&Vector6::new(0.0, 0.01 * i as f64, 0.0, 0.1, 0.0, 0.0)))
                .collect(),
            intrinsics: Intrinsics::centered(30.0, 30.0, 32, 32).unwrap(),
            tracks,
        };
        let eval = reprojection_loss(&problem).unwrap();
        assert_eq!(eval.value, 0.0);
        assert!(eval.gradient.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn constant_velocity_is_smooth() {
        let step = PoseSE3::exp(&Vector6::new(0.01, -0.02, 0.005, 0.1, 0.0, -0.05));
        let mut poses = vec![PoseSE3::exp(&Vector6::new(0.3, 0.1, 0.0, 1.0, 2.0, 3.0))];
        for _ in 0..7 {
            let next = poses.last().unwrap().compose(&step);
            poses.push(next);
        }
        assert!(smoothness_loss(&poses).value < 1e-12);
        assert_eq!(smoothness_loss(&vec![PoseSE3::identity(); 8]).value, 0.0);
    }

    use crate::numdiff::{central_gradient, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(seed: u64, n_tracks: usize) -> WindowProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |s: f64| rng.gen_range(-s..s);
        let poses: Vec<PoseSE3> = (0..WINDOW_LEN)
            .map(|i| {
                let t = i as f64;
                PoseSE3::exp(&Vector6::new(
                    0.02 * t + r(0.01),
                    -0.01 * t + r(0.01),
                    r(0.01),
                    0.1 * t + r(0.02),
                    r(0.02),
                    0.03 * t + r(0.02),
                ))
            })
            .collect();
        let intrinsics = Intrinsics::new(60.0 + r(5.0), 55.0 + r(5.0), 32.0, 24.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let tracks = (0..n_tracks)
            .map(|_| {
                let p1 = Vector2::new(rng.gen_range(8.0..56.0), rng.gen_range(8.0..40.0));
                let depth = rng.gen_range(2.0..5.0);
                let world = poses[0].transform(&(intrinsics.ray(&p1) * depth));
                let points = (0..WINDOW_LEN)
                    .map(|i| {
                        let c = poses[i].inverse().transform(&world);
                        let noise = Vector2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
                        intrinsics.project(&c).unwrap() + if i == 0 { Vector2::zeros() } else { noise }
                    })
                    .collect();
                let weights = (0..WINDOW_LEN).map(|_| rng.gen_range(0..4).min(1) as f64).collect();
                PointTrack::new(0, points, weights, depth * rng.gen_range(0.9..1.1)).unwrap()
            })
            .collect();
        WindowProblem {
            first_frame: 0,
            poses,
            intrinsics,
            tracks,
        }
    }

    fn scalar_reprojection(problem: &WindowProblem) -> f64 {
        let k = &problem.intrinsics;
        let mut total = 0.0;
        for t in &problem.tracks {
            let d = t.anchor_depth();
            let p1 = t.points[0];
            let x1 = nalgebra::Vector4::new((p1.x - k.cx) / k.fx * d, (p1.y - k.cy) / k.fy * d, d, 1.0);
            let t1 = problem.poses[t.anchor_frame - problem.first_frame].matrix();
            for i in 1..t.points.len() {
                let ti = problem.poses[t.anchor_frame - problem.first_frame + i].matrix();
                let rel = ti.try_inverse().unwrap() * t1;
                let y = rel * x1;
                if y.z <= 0.0 {
                    continue;
                }
                let u = k.fx * y.x / y.z + k.cx;
                let v = k.fy * y.y / y.z + k.cy;
                total += t.mask_weights[i] * ((u - t.points[i].x).abs() + (v - t.points[i].y).abs());
            }
        }
        total
    }

    fn scalar_smoothness(poses: &[PoseSE3]) -> f64 {
        let m: Vec<Matrix4<f64>> = poses.iter().map(|p| p.matrix()).collect();
        let rel = |a: usize, b: usize| m[b].try_inverse().unwrap() * m[a];
        let mut total = 0.0;
        for t in 0..poses.len() - 2 {
            let d = rel(t, t + 1).try_inverse().unwrap() * rel(t + 1, t + 2) - Matrix4::identity();
            for v in d.iter() {
                total += v.abs();
            }
        }
        total
    }

    fn fd_objective(problem: &WindowProblem, f: impl Fn(&WindowProblem) -> f64) -> Vec<f64> {
        let zero = vec![0.0; problem.param_len()];
        central_gradient(
            |delta| {
                let mut p = problem.clone();
                p.retract(delta);
                f(&p)
            },
            &zero,
            1e-6,
        )
    }

    #[test]
    fn reprojection_matches_scalar_oracle() {
        for seed in 0..20 {
            let problem = random_problem(seed, 12);
            let fast = reprojection_loss(&problem).unwrap().value;
            let slow = scalar_reprojection(&problem);
            assert!((fast - slow).abs() <= 1e-10 * slow.abs().max(1.0), "{fast} vs {slow}");
        }
    }

    #[test]
    fn smoothness_matches_scalar_oracle() {
        for seed in 0..20 {
            let problem = random_problem(seed, 0);
            let fast = smoothness_loss(&problem.poses).value;
            let slow = scalar_smoothness(&problem.poses);
            assert!((fast - slow).abs() <= 1e-10 * slow.max(1.0), "{fast} vs {slow}");
        }
    }

    #[test]
    fn reprojection_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let problem = random_problem(seed, 6);
            let analytic = reprojection_loss(&problem).unwrap().gradient;
            let numeric = fd_objective(&problem, |p| reprojection_loss(p).unwrap().value);
            let err = relative_error(&analytic, &numeric, 1e-8);
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn smoothness_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let problem = random_problem(seed, 0);
            let analytic = smoothness_loss(&problem.poses).gradient;
            let numeric = fd_objective(&problem, |p| smoothness_loss(&p.poses).value);
            let err = relative_error(&analytic, &numeric[..analytic.len()], 1e-8);
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn objective_is_weighted_sum() {
        let problem = random_problem(3, 8);
        let repr = reprojection_loss(&problem).unwrap();
        let smooth = smoothness_loss(&problem.poses);
        let total = ba_objective(&problem, 0.1).unwrap();
        assert_eq!(total.value, repr.value + 0.1 * smooth.value);
        for i in 0..total.gradient.len() {
            let s = smooth.gradient.get(i).copied().unwrap_or(0.0);
            assert_eq!(total.gradient[i], repr.gradient[i] + 0.1 * s);
        }
    }

    #[test]
    fn optimization_is_deterministic_and_monotone() {
        let problem = random_problem(5, 20);
        let cfg = BaConfig::default();
        let a = optimize_window(&problem, &cfg, 60, 1).unwrap();
        let b = optimize_window(&problem, &cfg, 60, 1).unwrap();
        assert_eq!(a.problem, b.problem);
        assert!(a.trace.best.windows(2).all(|w| w[1] <= w[0]));
        assert!(a.trace.final_best() <= a.trace.initial());
        assert_eq!(a.problem.poses[0], problem.poses[0]);
    }
}
