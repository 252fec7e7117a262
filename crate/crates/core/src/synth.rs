//! Analytic synthetic scenes with exact ground truth.
//!
//! A scene is a back wall, a floor and axis-aligned boxes, observed by a
//! pinhole camera on a parametric path. Movers are boxes that translate
//! rigidly. Depth is the nearest ray intersection, flow is the displacement of
//! the visible surface point (static or moving) between frames, and instance
//! masks are the pixels whose visible surface belongs to a mover.
//!
//! World axes follow the camera convention of frame 0: x right, y down,
//! z forward.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, PoseSE3};
use crate::mask_ops::{merge_masks, DynamicMaskSequence};
use crate::raster::{DepthMap, FlowField, Mask, Raster};
use crate::scene_io::{
    self, expect_len, lines, parse_num, write_bytes, FrameBundle, FrameEntry, InstanceMaskSequence,
    SequenceManifest, TrackPoint, TrackRecord, TrackSet,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AaBox {
    pub center: Vector3<f64>,
    pub half: Vector3<f64>,
}

impl AaBox {
    /// Entry distance of the ray `o + s d` with `s > 0`, if it hits.
    fn hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let mut near = f64::NEG_INFINITY;
        let mut far = f64::INFINITY;
        for k in 0..3 {
            let lo = self.center[k] - self.half[k];
            let hi = self.center[k] + self.half[k];
            if d[k] == 0.0 {
                if o[k] < lo || o[k] > hi {
                    return None;
                }
                continue;
            }
            let (a, b) = ((lo - o[k]) / d[k], (hi - o[k]) / d[k]);
            near = near.max(a.min(b));
            far = far.min(a.max(b));
        }
        if near <= far && near > 1e-9 {
            Some(near)
        } else {
            None
        }
    }

    fn translated(&self, by: &Vector3<f64>) -> Self {
        Self {
            center: self.center + by,
            half: self.half,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    /// Constant velocity per frame.
    Linear { velocity: Vector3<f64> },
    /// Circle in the x-z plane starting at the initial center.
    Circular { radius: f64, omega: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MoverSpec {
    pub id: u32,
    pub shape: AaBox,
    pub motion: Motion,
}

impl MoverSpec {
    /// Displacement of the mover at frame `t` relative to frame 0.
    pub fn displacement(&self, t: f64) -> Vector3<f64> {
        match self.motion {
            Motion::Linear { velocity } => velocity * t,
            Motion::Circular { radius, omega } => {
                Vector3::new(radius * ((omega * t).cos() - 1.0), 0.0, radius * (omega * t).sin())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CameraPath {
    Static,
    /// Sideways translation with a slight forward component.
    Linear,
    /// Translation combined with a constant yaw rate; the centers trace a
    /// helix, so the trajectory is never collinear.
    Arc,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoiseModel {
    /// Per-frame multiplicative log-normal depth scale.
    pub depth_sigma: f64,
    /// Per-pixel multiplicative log-normal depth noise.
    pub depth_pixel_sigma: f64,
    /// Additive Gaussian flow noise in pixels.
    pub flow_sigma: f64,
    /// RMS norm of the tangent perturbation applied to every pose but the first.
    pub pose_sigma: f64,
    /// Per-point multiplicative log-normal noise on track depths.
    pub track_depth_sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Option<Intrinsics>,
    pub camera: CameraPath,
    /// Translation per frame in scene units.
    pub camera_speed: f64,
    /// Yaw per frame in radians (arc path only).
    pub camera_turn: f64,
    pub wall_depth: f64,
    pub floor_height: f64,
    pub boxes: Vec<AaBox>,
    pub movers: Vec<MoverSpec>,
    pub noise: NoiseModel,
    pub seed: u64,
    /// Side of the grid of ground-truth 3D tracks seeded in frame 0.
    pub track_grid: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            frames: 12,
            width: 64,
            height: 48,
            intrinsics: None,
            camera: CameraPath::Arc,
            camera_speed: 0.05,
            camera_turn: 0.03,
            wall_depth: 6.0,
            floor_height: 1.2,
            boxes: vec![
                AaBox {
                    center: Vector3::new(-1.0, 0.6, 3.5),
                    half: Vector3::new(0.5, 0.6, 0.5),
                },
                AaBox {
                    center: Vector3::new(1.3, 0.2, 4.5),
                    half: Vector3::new(0.4, 1.0, 0.4),
                },
            ],
            movers: Vec::new(),
            noise: NoiseModel::default(),
            seed: 0,
            track_grid: 8,
        }
    }
}

impl SceneSpec {
    pub fn intrinsics(&self) -> Intrinsics {
        self.intrinsics.unwrap_or_else(|| {
            let f = 0.8 * self.width as f64;
            Intrinsics::centered(f, f, self.width, self.height).expect("positive focal length")
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecValidation(m));
        if self.frames < 2 {
            return bad(format!("frames must be >= 2, got {}", self.frames));
        }
        if self.width < 4 || self.height < 4 {
            return bad(format!("resolution {}x{} too small", self.width, self.height));
        }
        if !(self.wall_depth > 0.0) {
            return bad("wall_depth must be positive".into());
        }
        let n = &self.noise;
        for (name, v) in [
            ("depth_noise", n.depth_sigma),
            ("depth_pixel_noise", n.depth_pixel_sigma),
            ("flow_noise", n.flow_sigma),
            ("pose_noise", n.pose_sigma),
            ("track_depth_noise", n.track_depth_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        for (i, m) in self.movers.iter().enumerate() {
            if m.id == 0 {
                return bad("mover id 0 is reserved for static geometry".into());
            }
            if self.movers[..i].iter().any(|o| o.id == m.id) {
                return bad(format!("duplicate mover id {}", m.id));
            }
        }
        for b in self.boxes.iter().chain(self.movers.iter().map(|m| &m.shape)) {
            if b.half.iter().any(|&h| !(h > 0.0)) {
                return bad("box half extents must be positive".into());
            }
        }
        Ok(())
    }

    /// Camera-to-world pose of frame `t`.
    pub fn pose(&self, t: usize) -> PoseSE3 {
        let s = self.camera_speed;
        let twist = match self.camera {
            CameraPath::Static => Vector6::zeros(),
            CameraPath::Linear => Vector6::new(0.0, 0.0, 0.0, s, 0.0, 0.3 * s),
            CameraPath::Arc => Vector6::new(0.0, self.camera_turn, 0.0, s, 0.2 * s, 0.3 * s),
        };
        PoseSE3::exp(&(twist * t as f64))
    }
}

/// Parses the key-value scene description.
///
/// ```text
/// frames 12
/// width 64
/// height 48
/// camera linear            # static | linear | arc
/// box cx cy cz hx hy hz
/// mover 1 linear cx cy cz hx hy hz vx vy vz
/// mover 2 circular cx cy cz hx hy hz radius omega
/// pose_noise 0.01
/// ```
pub fn parse_spec(text: &str, file: &Path) -> Result<SceneSpec> {
    let mut spec = SceneSpec {
        boxes: Vec::new(),
        ..SceneSpec::default()
    };
    let mut default_boxes = true;
    for line in lines(text) {
        let off = line.offset;
        let t = &line.tokens;
        let f = |i: usize| parse_num::<f64>(t[i], file, off);
        let u = |i: usize| parse_num::<usize>(t[i], file, off);
        let v3 = |i: usize| -> Result<Vector3<f64>> { Ok(Vector3::new(f(i)?, f(i + 1)?, f(i + 2)?)) };
        let single = |n| expect_len(&line, n, file);
        match t[0] {
            "frames" => {
                single(2)?;
                spec.frames = u(1)?;
            }
            "width" => {
                single(2)?;
                spec.width = u(1)?;
            }
            "height" => {
                single(2)?;
                spec.height = u(1)?;
            }
            "intrinsics" => {
                single(5)?;
                spec.intrinsics = Some(
                    Intrinsics::new(f(1)?, f(2)?, f(3)?, f(4)?)
                        .map_err(|e| Error::parse(file, off, e.to_string()))?,
                );
            }
            "camera" => {
                single(2)?;
                spec.camera = match t[1] {
                    "static" => CameraPath::Static,
                    "linear" => CameraPath::Linear,
                    "arc" => CameraPath::Arc,
                    other => return Err(Error::parse(file, off, format!("unknown camera path '{other}'"))),
                };
            }
            "camera_speed" => {
                single(2)?;
                spec.camera_speed = f(1)?;
            }
            "camera_turn" => {
                single(2)?;
                spec.camera_turn = f(1)?;
            }
            "wall_depth" => {
                single(2)?;
                spec.wall_depth = f(1)?;
            }
            "floor_height" => {
                single(2)?;
                spec.floor_height = f(1)?;
            }
            "box" => {
                single(7)?;
                default_boxes = false;
                spec.boxes.push(AaBox {
                    center: v3(1)?,
                    half: v3(4)?,
                });
            }
            "no_boxes" => {
                single(1)?;
                default_boxes = false;
            }
            "mover" => {
                if t.len() < 3 {
                    return Err(Error::parse(file, off, "mover needs an id and a motion"));
                }
                let id = parse_num::<u32>(t[1], file, off)?;
                let motion = match t[2] {
                    "linear" => {
                        single(12)?;
                        Motion::Linear { velocity: v3(9)? }
                    }
                    "circular" => {
                        single(11)?;
                        Motion::Circular {
                            radius: f(9)?,
                            omega: f(10)?,
                        }
                    }
                    other => return Err(Error::parse(file, off, format!("unknown motion '{other}'"))),
                };
                spec.movers.push(MoverSpec {
                    id,
                    shape: AaBox {
                        center: v3(3)?,
                        half: v3(6)?,
                    },
                    motion,
                });
            }
            "depth_noise" => {
                single(2)?;
                spec.noise.depth_sigma = f(1)?;
            }
            "depth_pixel_noise" => {
                single(2)?;
                spec.noise.depth_pixel_sigma = f(1)?;
            }
            "flow_noise" => {
                single(2)?;
                spec.noise.flow_sigma = f(1)?;
            }
            "pose_noise" => {
                single(2)?;
                spec.noise.pose_sigma = f(1)?;
            }
            "track_depth_noise" => {
                single(2)?;
                spec.noise.track_depth_sigma = f(1)?;
            }
            "seed" => {
                single(2)?;
                spec.seed = parse_num(t[1], file, off)?;
            }
            "track_grid" => {
                single(2)?;
                spec.track_grid = u(1)?;
            }
            other => return Err(Error::parse(file, off, format!("unknown key '{other}'"))),
        }
    }
    if default_boxes {
        spec.boxes = SceneSpec::default().boxes;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn read_spec(path: &Path) -> Result<SceneSpec> {
    parse_spec(&scene_io::read_text(path)?, path)
}

pub fn format_spec(spec: &SceneSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "frames {}", spec.frames);
    let _ = writeln!(s, "width {}", spec.width);
    let _ = writeln!(s, "height {}", spec.height);
    if let Some(k) = spec.intrinsics {
        let _ = writeln!(s, "intrinsics {} {} {} {}", k.fx, k.fy, k.cx, k.cy);
    }
    let cam = match spec.camera {
        CameraPath::Static => "static",
        CameraPath::Linear => "linear",
        CameraPath::Arc => "arc",
    };
    let _ = writeln!(s, "camera {cam}");
    let _ = writeln!(s, "camera_speed {}", spec.camera_speed);
    let _ = writeln!(s, "camera_turn {}", spec.camera_turn);
    let _ = writeln!(s, "wall_depth {}", spec.wall_depth);
    let _ = writeln!(s, "floor_height {}", spec.floor_height);
    if spec.boxes.is_empty() {
        s.push_str("no_boxes\n");
    }
    for b in &spec.boxes {
        let (c, h) = (b.center, b.half);
        let _ = writeln!(s, "box {} {} {} {} {} {}", c.x, c.y, c.z, h.x, h.y, h.z);
    }
    for m in &spec.movers {
        let (c, h) = (m.shape.center, m.shape.half);
        let _ = write!(s, "mover {} ", m.id);
        match m.motion {
            Motion::Linear { velocity: v } => {
                let _ = write!(s, "linear {} {} {} {} {} {} {} {} {}", c.x, c.y, c.z, h.x, h.y, h.z, v.x, v.y, v.z);
            }
            Motion::Circular { radius, omega } => {
                let _ = write!(s, "circular {} {} {} {} {} {} {radius} {omega}", c.x, c.y, c.z, h.x, h.y, h.z);
            }
        }
        s.push('\n');
    }
    let n = &spec.noise;
    let _ = writeln!(s, "depth_noise {}", n.depth_sigma);
    let _ = writeln!(s, "depth_pixel_noise {}", n.depth_pixel_sigma);
    let _ = writeln!(s, "flow_noise {}", n.flow_sigma);
    let _ = writeln!(s, "pose_noise {}", n.pose_sigma);
    let _ = writeln!(s, "track_depth_noise {}", n.track_depth_sigma);
    let _ = writeln!(s, "seed {}", spec.seed);
    let _ = writeln!(s, "track_grid {}", spec.track_grid);
    s
}

/// Ground-truth 3D track: world position per frame and the object it sits on
/// (0 for static geometry).
#[derive(Clone, Debug, PartialEq)]
pub struct GtTrack {
    pub object: u32,
    pub world: Vec<Vector3<f64>>,
}

/// Clean ground truth in double precision.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub intrinsics: Intrinsics,
    pub poses: Vec<PoseSE3>,
    pub depths: Vec<Raster<f64>>,
    /// Visible object id per pixel (0 = static).
    pub labels: Vec<Raster<u32>>,
    /// `flows_forward[t]` maps frame `t` to `t + 1`.
    pub flows_forward: Vec<Raster<f64>>,
    /// `flows_backward[t]` maps frame `t + 1` to `t`.
    pub flows_backward: Vec<Raster<f64>>,
    pub instances: Vec<InstanceMaskSequence>,
    pub tracks: Vec<GtTrack>,
}

struct Hit {
    depth: f64,
    object: u32,
}

fn cast(spec: &SceneSpec, origin: &Vector3<f64>, dir: &Vector3<f64>, t: usize) -> Hit {
    let mut best = Hit {
        depth: f64::INFINITY,
        object: 0,
    };
    let mut consider = |s: Option<f64>, object: u32| {
        if let Some(s) = s {
            if s > 1e-9 && s < best.depth {
                best = Hit { depth: s, object };
            }
        }
    };
    consider((dir.z > 0.0).then(|| (spec.wall_depth - origin.z) / dir.z), 0);
    consider((dir.y > 0.0).then(|| (spec.floor_height - origin.y) / dir.y), 0);
    for b in &spec.boxes {
        consider(b.hit(origin, dir), 0);
    }
    for m in &spec.movers {
        consider(m.shape.translated(&m.displacement(t as f64)).hit(origin, dir), m.id);
    }
    best
}

fn object_displacement(spec: &SceneSpec, object: u32, from: usize, to: usize) -> Vector3<f64> {
    spec.movers
        .iter()
        .find(|m| m.id == object)
        .map_or(Vector3::zeros(), |m| {
            m.displacement(to as f64) - m.displacement(from as f64)
        })
}

fn flow_between(
    spec: &SceneSpec,
    k: &Intrinsics,
    poses: &[PoseSE3],
    depth: &Raster<f64>,
    labels: &Raster<u32>,
    from: usize,
    to: usize,
) -> Raster<f64> {
    let (w, h) = (spec.width, spec.height);
    let mut flow = Raster::filled(w, h, 2, 0.0);
    let still_camera = poses[from] == poses[to];
    for y in 0..h {
        for x in 0..w {
            let p = Vector2::new(x as f64, y as f64);
            let offset = object_displacement(spec, labels.get(x, y, 0), from, to);
            if still_camera && offset == Vector3::zeros() {
                continue;
            }
            let world = poses[from].transform(&(k.ray(&p) * depth.get(x, y, 0)));
            let moved = world + offset;
            let cam = poses[to].inverse().transform(&moved);
            let q = if cam.z > 0.0 {
                k.project(&cam).expect("positive depth")
            } else {
                p
            };
            flow.set(x, y, 0, q.x - p.x);
            flow.set(x, y, 1, q.y - p.y);
        }
    }
    flow
}

/// Renders the clean scene.
pub fn generate(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let k = spec.intrinsics();
    let (w, h) = (spec.width, spec.height);
    let poses: Vec<PoseSE3> = (0..spec.frames).map(|t| spec.pose(t)).collect();

    let rendered: Vec<(Raster<f64>, Raster<u32>)> = (0..spec.frames)
        .into_par_iter()
        .map(|t| {
            let pose = &poses[t];
            let mut depth = Raster::filled(w, h, 1, 0.0);
            let mut labels = Raster::filled(w, h, 1, 0u32);
            for y in 0..h {
                for x in 0..w {
                    let dir = pose.rotation() * k.ray(&Vector2::new(x as f64, y as f64));
                    let hit = cast(spec, pose.translation(), &dir, t);
                    depth.set(x, y, 0, hit.depth);
                    labels.set(x, y, 0, hit.object);
                }
            }
            (depth, labels)
        })
        .collect();
    for (t, (d, _)) in rendered.iter().enumerate() {
        if d.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::SpecValidation(format!(
                "frame {t} has rays that hit no surface; move the wall or floor into view"
            )));
        }
    }
    let (depths, labels): (Vec<_>, Vec<_>) = rendered.into_iter().unzip();

    let flows_forward = (0..spec.frames - 1)
        .into_par_iter()
        .map(|t| flow_between(spec, &k, &poses, &depths[t], &labels[t], t, t + 1))
        .collect();
    let flows_backward = (0..spec.frames - 1)
        .into_par_iter()
        .map(|t| flow_between(spec, &k, &poses, &depths[t + 1], &labels[t + 1], t + 1, t))
        .collect();

    let instances = spec
        .movers
        .iter()
        .map(|m| InstanceMaskSequence {
            instance_id: m.id,
            masks: labels.iter().map(|l| l.map(|v| (v == m.id) as u8)).collect(),
        })
        .collect();

    let mut tracks = Vec::new();
    let g = spec.track_grid;
    for gy in 0..g {
        for gx in 0..g {
            let x = ((gx as f64 + 0.5) * w as f64 / g as f64).floor() as usize;
            let y = ((gy as f64 + 0.5) * h as f64 / g as f64).floor() as usize;
            let object = labels[0].get(x, y, 0);
            let x0 = poses[0].transform(&(k.ray(&Vector2::new(x as f64, y as f64)) * depths[0].get(x, y, 0)));
            let world = (0..spec.frames)
                .map(|t| x0 + object_displacement(spec, object, 0, t))
                .collect();
            tracks.push(GtTrack { object, world });
        }
    }

    Ok(SyntheticScene {
        spec: spec.clone(),
        intrinsics: k,
        poses,
        depths,
        labels,
        flows_forward,
        flows_backward,
        instances,
        tracks,
    })
}

impl SyntheticScene {
    pub fn dynamic_masks(&self) -> DynamicMaskSequence {
        merge_masks(&self.instances, self.spec.frames, (self.spec.width, self.spec.height))
            .expect("instances rendered at scene resolution")
    }

    /// Tracks as pixel/depth observations, optionally with depth noise.
    fn track_set(&self, depth_noise: impl Fn(usize, usize) -> f64) -> TrackSet {
        let tracks = self
            .tracks
            .iter()
            .enumerate()
            .map(|(id, tr)| {
                let points = tr
                    .world
                    .iter()
                    .enumerate()
                    .filter_map(|(t, x)| {
                        let c = self.poses[t].inverse().transform(x);
                        let p = self.intrinsics.project(&c).ok()?;
                        Some(TrackPoint {
                            frame: t,
                            u: p.x,
                            v: p.y,
                            depth: c.z * depth_noise(id, t),
                        })
                    })
                    .collect();
                TrackRecord {
                    id,
                    points,
                    score: None,
                }
            })
            .collect();
        TrackSet {
            intrinsics: self.intrinsics,
            tracks,
        }
    }

    pub fn gt_tracks(&self) -> TrackSet {
        self.track_set(|_, _| 1.0)
    }
}

/// Observations handed to the pipelines: clean or perturbed.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyObservations {
    pub poses: Vec<PoseSE3>,
    pub depths: Vec<DepthMap>,
    pub flows_forward: Vec<FlowField>,
    pub flows_backward: Vec<FlowField>,
    pub tracks: TrackSet,
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Derives noisy observations from the clean scene. Zero sigmas leave the
/// corresponding quantity untouched.
pub fn perturb(scene: &SyntheticScene, noise: &NoiseModel, seed: u64) -> NoisyObservations {
    let poses = if noise.pose_sigma > 0.0 {
        let mut rng = stream(seed, 1);
        let per_component = noise.pose_sigma / 6f64.sqrt();
        scene
            .poses
            .iter()
            .enumerate()
            .map(|(t, p)| {
                let eps = Vector6::from_fn(|_, _| per_component * normal(&mut rng));
                if t == 0 {
                    *p
                } else {
                    p.retract(&eps)
                }
            })
            .collect()
    } else {
        scene.poses.clone()
    };

    let mut rng = stream(seed, 2);
    let depths = scene
        .depths
        .iter()
        .map(|d| {
            let frame_scale = if noise.depth_sigma > 0.0 {
                (noise.depth_sigma * normal(&mut rng)).exp()
            } else {
                1.0
            };
            d.map(|v| v * frame_scale).map(|v| v as f32).map(|v| {
                if noise.depth_pixel_sigma > 0.0 {
                    (v as f64 * (noise.depth_pixel_sigma * normal(&mut rng)).exp()) as f32
                } else {
                    v
                }
            })
        })
        .collect();

    let noisy_flow = |flows: &[Raster<f64>], s: u64| -> Vec<FlowField> {
        let mut rng = stream(seed, s);
        flows
            .iter()
            .map(|f| {
                f.map(|v| {
                    if noise.flow_sigma > 0.0 {
                        (v + noise.flow_sigma * normal(&mut rng)) as f32
                    } else {
                        v as f32
                    }
                })
            })
            .collect()
    };
    let flows_forward = noisy_flow(&scene.flows_forward, 3);
    let flows_backward = noisy_flow(&scene.flows_backward, 4);

    let tracks = if noise.track_depth_sigma > 0.0 {
        let n_frames = scene.spec.frames;
        let draws: Vec<f64> = {
            let mut rng = stream(seed, 5);
            (0..scene.tracks.len() * n_frames)
                .map(|_| (noise.track_depth_sigma * normal(&mut rng)).exp())
                .collect()
        };
        scene.track_set(|id, t| draws[id * n_frames + t])
    } else {
        scene.gt_tracks()
    };

    NoisyObservations {
        poses,
        depths,
        flows_forward,
        flows_backward,
        tracks,
    }
}

/// In-memory frame bundles; `masks` replaces the per-frame dynamic mask.
pub fn frame_bundles(obs: &NoisyObservations, masks: &DynamicMaskSequence) -> Vec<FrameBundle> {
    let n = obs.depths.len();
    (0..n)
        .map(|t| {
            let d = &obs.depths[t];
            FrameBundle {
                index: t,
                width: d.width(),
                height: d.height(),
                depth: d.clone(),
                flow_forward: obs.flows_forward.get(t).cloned(),
                flow_backward: t.checked_sub(1).map(|s| obs.flows_backward[s].clone()),
                mask: masks.masks[t].clone(),
            }
        })
        .collect()
}

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Writes a complete sequence directory and returns the manifest path.
///
/// ```text
/// manifest.txt  poses.txt  tracks.txt  spec.txt
/// frames/{depth,flow,flow_back}_NNNN.rast
/// masks/<id>/mask_NNNN.rast
/// gt/poses.txt  gt/tracks.txt  gt/depth_NNNN.rast
/// ```
pub fn write_scene(scene: &SyntheticScene, obs: &NoisyObservations, dir: &Path) -> Result<PathBuf> {
    let t_count = scene.spec.frames;
    let frames_dir = dir.join("frames");
    let gt_dir = dir.join("gt");
    let masks_dir = dir.join("masks");
    let mut entries = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let depth = frames_dir.join(format!("depth_{t:04}.rast"));
        scene_io::write_depth(&depth, &obs.depths[t])?;
        let flow = if t + 1 < t_count {
            let p = frames_dir.join(format!("flow_{t:04}.rast"));
            scene_io::write_flow(&p, &obs.flows_forward[t])?;
            Some(p)
        } else {
            None
        };
        let flow_back = if t > 0 {
            let p = frames_dir.join(format!("flow_back_{t:04}.rast"));
            scene_io::write_flow(&p, &obs.flows_backward[t - 1])?;
            Some(p)
        } else {
            None
        };
        let gt_depth = gt_dir.join(format!("depth_{t:04}.rast"));
        scene_io::write_depth(&gt_depth, &scene.depths[t].to_f32())?;
        entries.push(FrameEntry {
            depth,
            flow,
            flow_back,
            mask: None,
            gt_depth: Some(gt_depth),
        });
    }
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    scene_io::write_instance_masks(&masks_dir, &scene.instances)?;
    scene_io::write_poses(&gt_dir.join("poses.txt"), &scene.poses)?;
    scene_io::write_tracks(&gt_dir.join("tracks.txt"), &scene.gt_tracks())?;
    scene_io::write_tracks(&dir.join("tracks.txt"), &obs.tracks)?;
    write_bytes(&dir.join("spec.txt"), format_spec(&scene.spec).as_bytes())?;

    let manifest = SequenceManifest {
        path: dir.join(MANIFEST_FILE),
        frame_count: t_count,
        width: scene.spec.width,
        height: scene.spec.height,
        intrinsics: scene.intrinsics,
        frames: entries,
        poses: Some(obs.poses.clone()),
        masks_dir: Some(masks_dir.clone()),
        tracks: Some(dir.join("tracks.txt")),
        gt_poses: Some(gt_dir.join("poses.txt")),
        gt_tracks: Some(gt_dir.join("tracks.txt")),
        gt_masks: Some(masks_dir),
    };
    scene_io::write_manifest(&manifest, Some(Path::new("poses.txt")))?;
    Ok(manifest.path)
}

/// Merged dynamic masks as per-frame rasters.
pub fn merged_masks(scene: &SyntheticScene) -> Vec<Mask> {
    scene.dynamic_masks().masks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mover_spec() -> SceneSpec {
        SceneSpec {
            frames: 6,
            movers: vec![MoverSpec {
                id: 3,
                shape: AaBox {
                    center: Vector3::new(0.0, 0.0, 3.0),
                    half: Vector3::new(0.4, 0.4, 0.4),
                },
                motion: Motion::Linear {
                    velocity: Vector3::new(0.05, 0.0, 0.0),
                },
            }],
            ..SceneSpec::default()
        }
    }

    #[test]
    fn static_camera_static_scene_has_no_motion() {
        let spec = SceneSpec {
            camera: CameraPath::Static,
            frames: 3,
            ..SceneSpec::default()
        };
        let scene = generate(&spec).unwrap();
        for f in scene.flows_forward.iter().chain(&scene.flows_backward) {
            assert!(f.data().iter().all(|&v| v == 0.0));
        }
        assert!(scene.instances.is_empty());
        assert!(merged_masks(&scene).iter().all(|m| m.data().iter().all(|&v| v == 0)));
    }

    #[test]
    fn static_flow_matches_reprojection() {
        let spec = SceneSpec {
            camera: CameraPath::Arc,
            frames: 3,
            ..SceneSpec::default()
        };
        let scene = generate(&spec).unwrap();
        let k = scene.intrinsics;
        for t in 0..2 {
            let rel = scene.poses[t + 1].inverse().compose(&scene.poses[t]);
            let mut worst: f64 = 0.0;
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let p = Vector2::new(x as f64, y as f64);
                    let x3 = k.unproject(&p, scene.depths[t].get(x, y, 0)).unwrap();
                    let q = k.project(&rel.transform(&x3)).unwrap() - p;
                    let f = &scene.flows_forward[t];
                    worst = worst.max((q.x - f.get(x, y, 0)).abs()).max((q.y - f.get(x, y, 1)).abs());
                }
            }
            assert!(worst < 1e-9, "{worst}");
        }
    }

    #[test]
    fn masks_cover_mover_pixels() {
        let scene = generate(&mover_spec()).unwrap();
        let merged = merged_masks(&scene);
        for (m, l) in merged.iter().zip(&scene.labels) {
            for (&mv, &lv) in m.data().iter().zip(l.data()) {
                assert_eq!(mv == 1, lv == 3);
            }
            assert!(m.data().iter().any(|&v| v == 1));
        }
    }

    #[test]
    fn mover_flow_includes_object_motion() {
        let scene = generate(&mover_spec()).unwrap();
        let k = scene.intrinsics;
        let (x, y) = (32, 24);
        assert_eq!(scene.labels[0].get(x, y, 0), 3);
        let p = Vector2::new(x as f64, y as f64);
        let world = scene.poses[0].transform(&k.unproject(&p, scene.depths[0].get(x, y, 0)).unwrap());
        let moved = world + Vector3::new(0.05, 0.0, 0.0);
        let q = k.project(&scene.poses[1].inverse().transform(&moved)).unwrap() - p;
        let f = &scene.flows_forward[0];
        assert!((q.x - f.get(x, y, 0)).abs() < 1e-9 && (q.y - f.get(x, y, 1)).abs() < 1e-9);
    }

    #[test]
    fn zero_noise_is_identity() {
        let scene = generate(&mover_spec()).unwrap();
        let obs = perturb(&scene, &NoiseModel::default(), 9);
        assert_eq!(obs.poses, scene.poses);
        assert_eq!(obs.depths, scene.depths.iter().map(|d| d.to_f32()).collect::<Vec<_>>());
        assert_eq!(obs.tracks, scene.gt_tracks());
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let scene = generate(&mover_spec()).unwrap();
        let noise = NoiseModel {
            depth_sigma: 0.1,
            depth_pixel_sigma: 0.02,
            flow_sigma: 0.3,
            pose_sigma: 0.01,
            track_depth_sigma: 0.05,
        };
        assert_eq!(perturb(&scene, &noise, 4), perturb(&scene, &noise, 4));
        assert_ne!(perturb(&scene, &noise, 4).poses, perturb(&scene, &noise, 5).poses);
    }

    #[test]
    fn pose_noise_magnitude() {
        let spec = SceneSpec {
            frames: 2,
            ..SceneSpec::default()
        };
        let scene = generate(&spec).unwrap();
        let noise = NoiseModel {
            pose_sigma: 0.01,
            ..NoiseModel::default()
        };
        let mean: f64 = (0..100)
            .map(|s| {
                let obs = perturb(&scene, &noise, s);
                obs.poses[1].compose(&scene.poses[1].inverse()).log().norm()
            })
            .sum::<f64>()
            / 100.0;
        assert!((0.005..=0.02).contains(&mean), "{mean}");
    }

    #[test]
    fn spec_text_round_trip() {
        let mut spec = mover_spec();
        spec.movers.push(MoverSpec {
            id: 7,
            shape: AaBox {
                center: Vector3::new(1.0, 0.5, 4.0),
                half: Vector3::new(0.2, 0.3, 0.2),
            },
            motion: Motion::Circular { radius: 0.5, omega: 0.2 },
        });
        spec.noise.pose_sigma = 0.01;
        let text = format_spec(&spec);
        assert_eq!(parse_spec(&text, Path::new("s.txt")).unwrap(), spec);
        assert!(matches!(
            parse_spec("frames 1\n", Path::new("s.txt")),
            Err(Error::SpecValidation(_))
        ));
        assert!(matches!(
            parse_spec("colour red\n", Path::new("s.txt")),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn written_scene_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate(&SceneSpec {
            frames: 8,
            ..mover_spec()
        })
        .unwrap();
        let obs = perturb(&scene, &NoiseModel::default(), 0);
        let path = write_scene(&scene, &obs, dir.path()).unwrap();
        let (m, reader) = scene_io::read_sequence(&path).unwrap();
        assert_eq!(m.frame_count, 8);
        assert_eq!(m.poses.as_deref(), Some(&obs.poses[..]));
        let frames: Vec<_> = reader.collect::<Result<_>>().unwrap();
        assert_eq!(frames.len(), 8);
        assert!(frames.iter().all(|f| f.width == 64 && f.height == 48));
        assert_eq!(frames[3].depth, obs.depths[3]);
        let inst = scene_io::read_instance_masks(m.masks_dir.as_ref().unwrap(), 8).unwrap();
        assert_eq!(inst, scene.instances);
    }
}
