//! Ray-offset refinement of 3D point tracks.
//!
//! Every observation `x_i` of a track may slide along its camera ray by a
//! scalar offset, `x'_i = x_i + delta_i r_i`. A motion score `mu` blends a
//! static objective (all positions coincide) with a dynamic one (no
//! acceleration along the rays), plus an inverse-depth fidelity term:
//!
//! `sigma(mu) L_static + (1 - sigma(mu)) L_dynamic + L_reg`

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, PoseSE3};
use crate::mask_ops::{track_motion_score, DynamicMaskSequence};
use crate::optim::{Adam, LossEvaluation, Schedule, Trace};
use crate::scene_io::{TrackPoint, TrackRecord, TrackSet};

pub const SIGMOID_CENTER: f64 = 20.0;
pub const DYNAMIC_STRIDES: [usize; 3] = [1, 3, 5];
pub const LAMBDA_REG: f64 = 0.1;

/// `1 / (1 + exp(mu - 20))`. Saturates to 0 or 1 for extreme scores.
pub fn sigmoid_weight(mu: f64) -> f64 {
    1.0 / (1.0 + (mu - SIGMOID_CENTER).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track3D {
    pub points: Vec<Vector3<f64>>,
    /// Unit vectors from the camera center towards each point.
    pub rays: Vec<Vector3<f64>>,
    pub centers: Vec<Vector3<f64>>,
    pub offsets: Vec<f64>,
    pub pixels: Vec<Vector2<f64>>,
    pub frames: Vec<usize>,
}

impl Track3D {
    /// Lifts pixel/depth observations into world space with the given poses.
    pub fn from_record(record: &TrackRecord, poses: &[PoseSE3], k: &Intrinsics) -> Result<Self> {
        let n = record.points.len();
        let mut t = Track3D {
            points: Vec::with_capacity(n),
            rays: Vec::with_capacity(n),
            centers: Vec::with_capacity(n),
            offsets: vec![0.0; n],
            pixels: Vec::with_capacity(n),
            frames: Vec::with_capacity(n),
        };
        for (i, p) in record.points.iter().enumerate() {
            let pose = poses.get(p.frame).ok_or_else(|| {
                Error::Validation(format!("track {} references frame {} without a pose", record.id, p.frame))
            })?;
            let px = Vector2::new(p.u, p.v);
            let x = pose.transform(&k.unproject(&px, p.depth)?);
            let c = *pose.translation();
            let dist = (x - c).norm();
            if !(dist > 0.0) {
                return Err(Error::DegenerateRay { index: i });
            }
            t.points.push(x);
            t.rays.push((x - c) / dist);
            t.centers.push(c);
            t.pixels.push(px);
            t.frames.push(p.frame);
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn refined(&self, i: usize) -> Vector3<f64> {
        self.points[i] + self.offsets[i] * self.rays[i]
    }

    pub fn refined_points(&self) -> Vec<Vector3<f64>> {
        (0..self.len()).map(|i| self.refined(i)).collect()
    }

    fn with_offsets(&self, offsets: &[f64]) -> Self {
        Self {
            offsets: offsets.to_vec(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreSource {
    TrailPercentile,
    MaskBinary,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionScore {
    pub mu: f64,
    pub source: ScoreSource,
}

/// Nearest-rank percentile (`q` in `(0, 100]`) of a non-empty sample.
pub fn nearest_rank_percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Ego-motion compensated trail length: for each observation `i >= 1`, the
/// largest pixel distance in camera `i` between the projections of `x_i` and
/// `x_{i-w}`, `w = 1..=window`. The score is the 90th percentile over `i`.
pub fn trail_length_score(track: &Track3D, poses: &[PoseSE3], k: &Intrinsics, window: usize) -> Result<MotionScore> {
    let n = track.len();
    if n < 2 {
        return Err(Error::TrackTooShort(n));
    }
    let mut trails = Vec::with_capacity(n - 1);
    for i in 1..n {
        let cam = poses[track.frames[i]].inverse();
        let here = k.project(&cam.transform(&track.points[i]));
        let mut trail: f64 = 0.0;
        for w in 1..=window.min(i) {
            if let (Ok(a), Ok(b)) = (&here, k.project(&cam.transform(&track.points[i - w]))) {
                trail = trail.max((a - b).norm());
            }
        }
        trails.push(trail);
    }
    Ok(MotionScore {
        mu: nearest_rank_percentile(&trails, 90.0),
        source: ScoreSource::TrailPercentile,
    })
}

/// Binary score from the dynamic mask at the track's pixels.
pub fn mask_score(track: &Track3D, masks: &DynamicMaskSequence) -> Result<MotionScore> {
    let pts: Vec<(usize, Vector2<f64>)> = track.frames.iter().copied().zip(track.pixels.iter().copied()).collect();
    Ok(MotionScore {
        mu: track_motion_score(&pts, masks)?,
        source: ScoreSource::MaskBinary,
    })
}

/// `sum_i sum_j |x'_i - x'_j|^2 / N^2`, gradient over the offsets.
pub fn static_loss(track: &Track3D) -> LossEvaluation {
    let n = track.len();
    let mut eval = LossEvaluation::zeros(n);
    if n == 0 {
        return eval;
    }
    let pts = track.refined_points();
    let mean = pts.iter().sum::<Vector3<f64>>() / n as f64;
    let nf = n as f64;
    for (i, p) in pts.iter().enumerate() {
        let d = p - mean;
        eval.value += 2.0 / nf * d.norm_squared();
        eval.gradient[i] = 4.0 / nf * d.dot(&track.rays[i]);
    }
    eval
}

/// Squared acceleration along each ray for strides 1, 3 and 5; terms whose
/// neighbours fall outside the track are dropped.
pub fn dynamic_loss(track: &Track3D) -> LossEvaluation {
    let n = track.len();
    let mut eval = LossEvaluation::zeros(n);
    let pts = track.refined_points();
    for i in 0..n {
        let r = &track.rays[i];
        for &s in &DYNAMIC_STRIDES {
            if i < s || i + s >= n {
                continue;
            }
            let e = (pts[i + s] - 2.0 * pts[i] + pts[i - s]).dot(r);
            eval.value += e * e;
            eval.gradient[i + s] += 2.0 * e * track.rays[i + s].dot(r);
            eval.gradient[i] += 2.0 * e * -2.0;
            eval.gradient[i - s] += 2.0 * e * track.rays[i - s].dot(r);
        }
    }
    eval
}

/// `lambda sum_i (1 / (delta_i + rho_i) - 1 / rho_i)^2` with `rho_i` the
/// original distance from the camera center.
pub fn reg_loss(track: &Track3D, lambda: f64) -> Result<LossEvaluation> {
    let n = track.len();
    let mut eval = LossEvaluation::zeros(n);
    for i in 0..n {
        let rho = (track.points[i] - track.centers[i]).norm();
        let dist = track.offsets[i] + rho;
        if !(dist > 0.0) {
            return Err(Error::DegenerateRay { index: i });
        }
        let e = 1.0 / dist - 1.0 / rho;
        eval.value += lambda * e * e;
        eval.gradient[i] = -2.0 * lambda * e / (dist * dist);
    }
    Ok(eval)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackConfig {
    pub steps: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub lambda_reg: f64,
    /// Trail window for the percentile score.
    pub trail_window: usize,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-2,
            lr_floor: 0.01,
            lambda_reg: LAMBDA_REG,
            trail_window: 8,
        }
    }
}

/// Full objective for a given static weight `sigma(mu)`.
pub fn track_objective(track: &Track3D, static_weight: f64, lambda_reg: f64) -> Result<LossEvaluation> {
    let mut total = LossEvaluation::zeros(track.len());
    total.add_scaled(&static_loss(track), static_weight);
    total.add_scaled(&dynamic_loss(track), 1.0 - static_weight);
    total.add_scaled(&reg_loss(track, lambda_reg)?, 1.0);
    Ok(total)
}

#[derive(Clone, Debug)]
pub struct TrackResult {
    pub track: Track3D,
    pub score: MotionScore,
    pub trace: Trace,
}

/// Optimizes the offsets of one track, returning the best-so-far state.
pub fn optimize_track(track: &Track3D, score: MotionScore, config: &TrackConfig) -> Result<TrackResult> {
    let weight = sigmoid_weight(score.mu);
    let mut offsets = track.offsets.clone();
    let mut best = offsets.clone();
    let mut best_value = f64::INFINITY;
    let mut trace = Trace::default();
    let mut adam = Adam::new(track.len());
    let schedule = Schedule {
        base: config.lr,
        floor: config.lr_floor,
    };
    for step in 0..=config.steps {
        let current = track.with_offsets(&offsets);
        let eval = track_objective(&current, weight, config.lambda_reg)?;
        if !eval.is_finite() {
            return Err(Error::DivergenceDetected { step, value: eval.value });
        }
        trace.push(eval.value);
        if eval.value < best_value {
            best_value = eval.value;
            best.clone_from(&offsets);
        }
        if step == config.steps {
            break;
        }
        let lr = schedule.at(step, config.steps);
        let delta = adam.step(&eval.gradient, |_| lr);
        for (o, d) in offsets.iter_mut().zip(delta) {
            *o -= d;
        }
    }
    Ok(TrackResult {
        track: track.with_offsets(&best),
        score,
        trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreMode {
    Mask,
    Trail,
}

/// Lifts, scores and refines every track. Tracks are solved in parallel and
/// returned in input order.
pub fn optimize_tracks(
    set: &TrackSet,
    poses: &[PoseSE3],
    masks: Option<&DynamicMaskSequence>,
    mode: ScoreMode,
    config: &TrackConfig,
) -> Result<Vec<TrackResult>> {
    set.tracks
        .par_iter()
        .map(|record| {
            let track = Track3D::from_record(record, poses, &set.intrinsics)?;
            let score = match (mode, masks) {
                (ScoreMode::Mask, Some(m)) => mask_score(&track, m)?,
                (ScoreMode::Mask, None) => {
                    return Err(Error::Validation("mask scores need a mask sequence".into()))
                }
                (ScoreMode::Trail, _) => trail_length_score(&track, poses, &set.intrinsics, config.trail_window)?,
            };
            optimize_track(&track, score, config)
        })
        .collect()
}

/// Re-expresses refined tracks as pixel/depth observations with scores.
pub fn to_track_set(results: &[TrackResult], poses: &[PoseSE3], k: &Intrinsics) -> TrackSet {
    let tracks = results
        .iter()
        .enumerate()
        .map(|(id, r)| TrackRecord {
            id,
            points: (0..r.track.len())
                .map(|i| {
                    let f = r.track.frames[i];
                    let c = poses[f].inverse().transform(&r.track.refined(i));
                    let p = r.track.pixels[i];
                    TrackPoint {
                        frame: f,
                        u: p.x,
                        v: p.y,
                        depth: c.z,
                    }
                })
                .collect(),
            score: Some(r.score.mu),
        })
        .collect();
    TrackSet { intrinsics: *k, tracks }
}

/// `sum_i |x_i - mean|^2 / N`.
pub fn spread(points: &[Vector3<f64>]) -> f64 {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector3<f64>>() / n;
    points.iter().map(|p| (p - mean).norm_squared()).sum::<f64>() / n
}

/// Mean distance from the centroid.
pub fn centroid_displacement(points: &[Vector3<f64>]) -> f64 {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector3<f64>>() / n;
    points.iter().map(|p| (p - mean).norm()).sum::<f64>() / n
}

/// Acceleration energy along the rays, all strides, unit weights.
pub fn ray_acceleration_energy(track: &Track3D) -> f64 {
    dynamic_loss(track).value
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numdiff::{central_gradient, relative_error};
    use nalgebra::Vector6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn track_from_world(world: &[Vector3<f64>], centers: &[Vector3<f64>]) -> Track3D {
        let n = world.len();
        Track3D {
            points: world.to_vec(),
            rays: world.iter().zip(centers).map(|(x, c)| (x - c).normalize()).collect(),
            centers: centers.to_vec(),
            offsets: vec![0.0; n],
            pixels: vec![Vector2::zeros(); n],
            frames: (0..n).collect(),
        }
    }

    fn random_track(seed: u64) -> Track3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=10);
        let centers: Vec<_> = (0..n).map(|i| Vector3::new(0.1 * i as f64, 0.0, 0.0)).collect();
        let world: Vec<_> = (0..n)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(2.0..5.0)))
            .collect();
        let mut t = track_from_world(&world, &centers);
        t.offsets = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
        t
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_weight(20.0), 0.5);
        assert!((sigmoid_weight(25.0) - 1.0 / (1.0 + 5f64.exp())).abs() < 1e-15);
        assert!((sigmoid_weight(25.0) - 0.006693).abs() < 1e-6);
        assert!((sigmoid_weight(15.0) - 0.993307).abs() < 1e-6);
        assert_eq!(sigmoid_weight(1e6), 0.0);
        assert_eq!(sigmoid_weight(-1e6), 1.0);
    }

    #[test]
    fn loss_zero_cases() {
        let c: Vec<_> = (0..6).map(|i| Vector3::new(0.2 * i as f64, 0.0, 0.0)).collect();
        let same = track_from_world(&vec![Vector3::new(0.5, 0.2, 3.0); 6], &c);
        assert!(static_loss(&same).value < 1e-24);
        let line: Vec<_> = (0..6).map(|i| Vector3::new(0.3 * i as f64, 0.1, 3.0 + 0.05 * i as f64)).collect();
        assert!(dynamic_loss(&track_from_world(&line, &c)).value < 1e-24);
        assert_eq!(reg_loss(&same, LAMBDA_REG).unwrap().value, 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..50 {
            let t = random_track(seed);
            let checks: [(&str, Box<dyn Fn(&Track3D) -> LossEvaluation>); 3] = [
                ("static", Box::new(static_loss)),
                ("dynamic", Box::new(dynamic_loss)),
                ("reg", Box::new(|t| reg_loss(t, LAMBDA_REG).unwrap())),
            ];
            for (name, f) in &checks {
                let analytic = f(&t).gradient;
                let numeric = central_gradient(|o| f(&t.with_offsets(o)).value, &t.offsets, 1e-6);
                let err = relative_error(&analytic, &numeric, 1e-8);
                assert!(err < 1e-5, "{name} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn static_loss_ignores_uniform_shift() {
        let t = random_track(3);
        let shift = Vector3::new(3.0, -1.0, 0.5);
        let moved = Track3D {
            points: t.points.iter().map(|p| p + shift).collect(),
            centers: t.centers.iter().map(|c| c + shift).collect(),
            ..t.clone()
        };
        assert!((static_loss(&t).value - static_loss(&moved).value).abs() < 1e-12);
    }

    #[test]
    fn reg_rejects_point_behind_center() {
        let mut t = random_track(1);
        t.offsets[0] = -10.0;
        assert!(matches!(reg_loss(&t, LAMBDA_REG), Err(Error::DegenerateRay { index: 0 })));
    }

    #[test]
    fn static_scalar_oracle() {
        for seed in 0..20 {
            let t = random_track(seed);
            let x = t.refined_points();
            let n = x.len() as f64;
            let mut brute = 0.0;
            for a in &x {
                for b in &x {
                    brute += (a - b).norm_squared();
                }
            }
            brute /= n * n;
            let fast = static_loss(&t).value;
            assert!((fast - brute).abs() <= 1e-10 * brute.max(1e-300));
        }
    }

    #[test]
    fn percentile_convention() {
        assert_eq!(nearest_rank_percentile(&[3.0], 90.0), 3.0);
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(nearest_rank_percentile(&v, 90.0), 9.0);
        assert_eq!(nearest_rank_percentile(&v, 100.0), 10.0);
    }

    fn moving_camera(n: usize) -> Vec<PoseSE3> {
        (0..n)
            .map(|i| PoseSE3::exp(&Vector6::new(0.0, 0.02 * i as f64, 0.0, 0.1 * i as f64, 0.0, 0.0)))
            .collect()
    }

    #[test]
    fn static_point_has_zero_trail() {
        let poses = moving_camera(6);
        let k = Intrinsics::centered(50.0, 50.0, 64, 48).unwrap();
        let t = track_from_world(&vec![Vector3::new(0.3, 0.1, 4.0); 6], &poses.iter().map(|p| *p.translation()).collect::<Vec<_>>());
        let s = trail_length_score(&t, &poses, &k, 8).unwrap();
        assert!(s.mu < 1e-9);
        assert!(matches!(
            trail_length_score(&track_from_world(&[Vector3::new(0.0, 0.0, 1.0)], &[Vector3::zeros()]), &poses, &k, 8),
            Err(Error::TrackTooShort(1))
        ));
    }

    #[test]
    fn constant_speed_trail() {
        let poses = vec![PoseSE3::identity(); 5];
        let k = Intrinsics::centered(50.0, 50.0, 64, 48).unwrap();
        let world: Vec<_> = (0..5).map(|i| Vector3::new(0.1 * i as f64, 0.0, 5.0)).collect();
        let t = track_from_world(&world, &vec![Vector3::zeros(); 5]);
        let s = trail_length_score(&t, &poses, &k, 1).unwrap();
        assert!((s.mu - 50.0 * 0.1 / 5.0).abs() < 1e-12);
        let two = track_from_world(&world[..2], &[Vector3::zeros(); 2]);
        assert!((trail_length_score(&two, &poses, &k, 1).unwrap().mu - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_static_track_stays_put() {
        let poses = moving_camera(8);
        let c: Vec<_> = poses.iter().map(|p| *p.translation()).collect();
        let t = track_from_world(&vec![Vector3::new(0.3, 0.1, 4.0); 8], &c);
        let r = optimize_track(&t, MotionScore { mu: 15.0, source: ScoreSource::MaskBinary }, &TrackConfig::default()).unwrap();
        assert!(r.track.offsets.iter().all(|o| o.abs() < 1e-6));
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn sigmoid_is_bounded_and_decreasing(a in -100.0f64..100.0, b in -100.0f64..100.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!((0.0..=1.0).contains(&sigmoid_weight(a)));
            prop_assert!(sigmoid_weight(lo) >= sigmoid_weight(hi));
        }

        #[test]
        fn spread_ignores_translation(
            pts in proptest::collection::vec(proptest::array::uniform3(-3.0f64..3.0), 1..10),
            t in proptest::array::uniform3(-10.0f64..10.0),
        ) {
            let pts: Vec<Vector3<f64>> = pts.into_iter().map(Vector3::from).collect();
            let moved: Vec<Vector3<f64>> = pts.iter().map(|p| p + Vector3::from(t)).collect();
            prop_assert!(spread(&pts) >= 0.0);
            prop_assert!((spread(&moved) - spread(&pts)).abs() < 1e-9);
        }
    }
}
