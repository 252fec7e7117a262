//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dynrefine::ba::{refine_sequence, BaResult};
use dynrefine::cvd::{optimize_depth, DepthSolution};
use dynrefine::geometry::umeyama_align;
use dynrefine::mask_ops::merge_masks;
use dynrefine::metrics::{
    aligned_trajectory_metrics, depth_metrics, mask_metrics, DepthMetrics, ScaleAlignment,
};
use dynrefine::scene_io::{
    self, depth_file_name, mask_file_name, read_instance_masks, read_poses, read_sequence, read_tracks,
    write_outputs, Outputs, POSES_FILE, TRACKS_FILE,
};
use dynrefine::synth::{generate, perturb, read_spec, write_scene};
use dynrefine::track4d::{optimize_tracks, spread, to_track_set, ScoreMode, Track3D, TrackResult};
use dynrefine::{DepthMap, DynamicMaskSequence, Intrinsics, Mask, PoseSE3, SequenceManifest, TrackSet};

use crate::config::{MaskMode, RunConfig};
use crate::report::{histogram, write_columns, write_trace, Report};
use crate::UsageError;

pub const REPORT_FILE: &str = "report.txt";
const HIST_BINS: usize = 20;

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(UsageError(format!("{what} not found: {}", path.display())).into());
    }
    Ok(())
}

/// Dynamic masks for `frames` frames of size `dims`: the instance directory
/// merged by union, or all-static when no directory is given.
fn load_masks(dir: Option<&Path>, frames: usize, dims: (usize, usize)) -> Result<DynamicMaskSequence> {
    match dir {
        Some(d) => {
            require(d, "mask directory")?;
            let instances = read_instance_masks(d, frames)?;
            Ok(merge_masks(&instances, frames, dims)?)
        }
        None => Ok(DynamicMaskSequence::empty(frames, dims.0, dims.1)),
    }
}

fn read_manifest(path: &Path) -> Result<SequenceManifest> {
    require(path, "manifest")?;
    Ok(read_sequence(path)?.0)
}

fn mask_dir<'a>(flag: Option<&'a Path>, manifest: &'a SequenceManifest, config: &RunConfig) -> Option<&'a Path> {
    if config.mask_mode == MaskMode::None {
        return None;
    }
    flag.or(manifest.masks_dir.as_deref())
}

fn initial_poses(manifest: &SequenceManifest) -> Vec<PoseSE3> {
    manifest
        .poses
        .clone()
        .unwrap_or_else(|| vec![PoseSE3::identity(); manifest.frame_count])
}

// ---------------------------------------------------------------------------
// synth

pub fn synth(spec_path: &Path, out: &Path, config: &RunConfig, seed_flag: Option<u64>) -> Result<Report> {
    require(spec_path, "scene spec")?;
    let mut spec = read_spec(spec_path)?;
    if let Some(s) = seed_flag {
        spec.seed = s;
    }
    let scene = generate(&spec)?;
    let obs = perturb(&scene, &spec.noise, spec.seed);
    let manifest = write_scene(&scene, &obs, out)?;
    let mut r = Report::new();
    r.config(config);
    r.put("synth.manifest", manifest.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()));
    r.put("synth.frames", spec.frames);
    r.put("synth.width", spec.width);
    r.put("synth.height", spec.height);
    r.put("synth.seed", spec.seed);
    r.put("synth.movers", spec.movers.len());
    r.put("synth.tracks", obs.tracks.tracks.len());
    let dynamic: usize = scene.dynamic_masks().masks.iter().map(|m| m.data().iter().filter(|&&v| v != 0).count()).sum();
    r.put("synth.dynamic_pixels", dynamic);
    r.write(&out.join(REPORT_FILE))?;
    Ok(r)
}

// ---------------------------------------------------------------------------
// ba

fn run_ba(manifest_path: &Path, masks: &DynamicMaskSequence, config: &RunConfig) -> Result<(SequenceManifest, BaResult)> {
    let (manifest, reader) = read_sequence(manifest_path)?;
    let reader = reader.with_masks(masks.masks.clone());
    let poses = initial_poses(&manifest);
    let result = refine_sequence(reader, &poses, manifest.intrinsics, &config.ba)?;
    Ok((manifest, result))
}

fn report_ba(r: &mut Report, result: &BaResult, plots: &Path) -> Result<()> {
    r.put("ba.fx", result.intrinsics.fx);
    r.put("ba.fy", result.intrinsics.fy);
    r.put("ba.global_tracks", result.tracks.len());
    r.put("ba.static_tracks", result.tracks.iter().filter(|t| t.is_static()).count());
    r.put("ba.windows", result.window_traces.len());
    for (i, t) in result.window_traces.iter().enumerate() {
        r.trace(&format!("ba.window{i}"), t);
    }
    r.trace("ba.global", &result.global_trace);
    write_trace(&plots.join("trace_ba_global.dat"), &result.global_trace)
}

fn report_trajectory(r: &mut Report, est: &[PoseSE3], gt: &[PoseSE3], prefix: &str, plots: Option<&Path>) -> Result<()> {
    let centers = |p: &[PoseSE3]| p.iter().map(|q| *q.translation()).collect::<Vec<_>>();
    let sim = umeyama_align(&centers(est), &centers(gt))?;
    let m = aligned_trajectory_metrics(est, gt, &sim);
    r.put(format!("{prefix}.ate"), m.ate);
    r.put(format!("{prefix}.rte"), m.rte);
    r.put(format!("{prefix}.rre"), m.rre);
    if let Some(plots) = plots {
        let aligned: Vec<PoseSE3> = est.iter().map(|p| sim.apply_pose(p)).collect();
        let rows: Vec<Vec<f64>> = aligned
            .iter()
            .zip(gt)
            .enumerate()
            .map(|(t, (a, g))| {
                let (a, g) = (a.translation(), g.translation());
                vec![t as f64, a.x, a.y, a.z, g.x, g.y, g.z]
            })
            .collect();
        write_columns(&plots.join("trajectory.dat"), &["frame", "x", "y", "z", "gt_x", "gt_y", "gt_z"], &rows)?;
        let errors: Vec<f64> = aligned.iter().zip(gt).map(|(a, g)| (a.translation() - g.translation()).norm()).collect();
        write_columns(&plots.join("position_error_hist.dat"), &["lo", "hi", "count"], &histogram(&errors, HIST_BINS))?;
    }
    Ok(())
}

pub fn ba(manifest_path: &Path, masks_flag: Option<&Path>, out: &Path, config: &RunConfig) -> Result<Report> {
    let manifest = read_manifest(manifest_path)?;
    let masks = load_masks(
        mask_dir(masks_flag, &manifest, config),
        manifest.frame_count,
        (manifest.width, manifest.height),
    )?;
    let (manifest, result) = run_ba(manifest_path, &masks, config)?;
    write_outputs(&Outputs { poses: Some(&result.poses), ..Default::default() }, out)?;
    let mut r = Report::new();
    r.config(config);
    let plots = out.join("plots");
    report_ba(&mut r, &result, &plots)?;
    if let Some(gt) = &manifest.gt_poses {
        let gt = read_poses(gt)?;
        report_trajectory(&mut r, &initial_poses(&manifest), &gt, "traj_initial", None)?;
        report_trajectory(&mut r, &result.poses, &gt, "traj", Some(&plots))?;
    }
    r.write(&out.join(REPORT_FILE))?;
    Ok(r)
}

// ---------------------------------------------------------------------------
// cvd

fn run_cvd(
    manifest_path: &Path,
    masks: &DynamicMaskSequence,
    poses: &[PoseSE3],
    intrinsics: &Intrinsics,
    config: &RunConfig,
) -> Result<(Vec<dynrefine::FrameBundle>, DepthSolution)> {
    let (_, frames) = scene_io::read_all_frames(manifest_path, Some(masks.masks.clone()))?;
    let solution = optimize_depth(&frames, poses, intrinsics, Some(masks), &config.cvd)?;
    Ok((frames, solution))
}

fn fit_to(depths: &[DepthMap], dims: (usize, usize)) -> Vec<DepthMap> {
    depths
        .iter()
        .map(|d| {
            if d.dims() == dims {
                d.clone()
            } else {
                d.to_f64().resample_bilinear(dims.0, dims.1).to_f32()
            }
        })
        .collect()
}

fn put_depth(r: &mut Report, prefix: &str, m: &DepthMetrics) {
    r.put(format!("{prefix}.abs_rel"), m.abs_rel);
    r.put(format!("{prefix}.log_rmse"), m.log_rmse);
    r.put(format!("{prefix}.delta_125"), m.delta_125);
}

fn relative_errors(pred: &[DepthMap], gt: &[DepthMap], scale: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        for (&a, &b) in p.data().iter().zip(g.data()) {
            let (a, b) = (a as f64 * scale, b as f64);
            if a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() {
                out.push((a - b).abs() / b);
            }
        }
    }
    out
}

fn report_depth(
    r: &mut Report,
    manifest: &SequenceManifest,
    initial: &[DepthMap],
    refined: &[DepthMap],
    masks: &DynamicMaskSequence,
    plots: &Path,
) -> Result<()> {
    let gt_paths: Option<Vec<&PathBuf>> = manifest.frames.iter().map(|f| f.gt_depth.as_ref()).collect();
    let Some(gt_paths) = gt_paths else {
        return Ok(());
    };
    let gt: Vec<DepthMap> = gt_paths.iter().map(|p| scene_io::read_depth(p)).collect::<dynrefine::Result<_>>()?;
    let dims = gt[0].dims();
    let initial = fit_to(initial, dims);
    let refined = fit_to(refined, dims);
    let m0 = depth_metrics(&initial, &gt, None, ScaleAlignment::Median)?;
    let m1 = depth_metrics(&refined, &gt, None, ScaleAlignment::Median)?;
    put_depth(r, "depth_initial", &m0);
    put_depth(r, "depth", &m1);
    let masks = masks.resampled(dims.0, dims.1);
    let stat: Vec<Mask> = masks.masks.iter().map(|m| m.map(|v| (v == 0) as u8)).collect();
    if let (Ok(s0), Ok(s1)) = (
        depth_metrics(&initial, &gt, Some(&stat), ScaleAlignment::Median),
        depth_metrics(&refined, &gt, Some(&stat), ScaleAlignment::Median),
    ) {
        put_depth(r, "depth_static_initial", &s0);
        put_depth(r, "depth_static", &s1);
    }
    if let (Ok(d0), Ok(d1)) = (
        depth_metrics(&initial, &gt, Some(&masks.masks), ScaleAlignment::Median),
        depth_metrics(&refined, &gt, Some(&masks.masks), ScaleAlignment::Median),
    ) {
        put_depth(r, "depth_dynamic_initial", &d0);
        put_depth(r, "depth_dynamic", &d1);
    }
    let errs = relative_errors(&refined, &gt, m1.scale);
    write_columns(&plots.join("depth_error_hist.dat"), &["lo", "hi", "count"], &histogram(&errs, HIST_BINS))
}

fn report_cvd(r: &mut Report, solution: &DepthSolution, plots: &Path) -> Result<()> {
    r.put("cvd.width", solution.grid.width);
    r.put("cvd.height", solution.grid.height);
    r.put("cvd.flow_initial", solution.initial_terms.flow);
    r.put("cvd.flow_final", solution.final_terms.flow);
    r.put("cvd.temporal_initial", solution.initial_terms.temporal);
    r.put("cvd.temporal_final", solution.final_terms.temporal);
    r.put("cvd.temporal_offset_free_initial", solution.initial_terms.temporal_offset_free);
    r.put("cvd.temporal_offset_free_final", solution.final_terms.temporal_offset_free);
    r.put("cvd.prior_initial", solution.initial_terms.prior);
    r.put("cvd.prior_final", solution.final_terms.prior);
    let omega: Vec<f64> = solution.omega.iter().flat_map(|o| o.data().iter().copied()).collect();
    r.put("cvd.omega_mean", omega.iter().sum::<f64>() / omega.len().max(1) as f64);
    r.trace("cvd", &solution.trace);
    write_trace(&plots.join("trace_cvd.dat"), &solution.trace)
}

pub fn cvd(
    manifest_path: &Path,
    masks_flag: Option<&Path>,
    poses_path: Option<&Path>,
    out: &Path,
    config: &RunConfig,
) -> Result<Report> {
    let manifest = read_manifest(manifest_path)?;
    let poses = match poses_path {
        Some(p) => {
            require(p, "poses file")?;
            read_poses(p)?
        }
        None => initial_poses(&manifest),
    };
    let masks = load_masks(
        mask_dir(masks_flag, &manifest, config),
        manifest.frame_count,
        (manifest.width, manifest.height),
    )?;
    let (frames, solution) = run_cvd(manifest_path, &masks, &poses, &manifest.intrinsics, config)?;
    write_outputs(&Outputs { depths: Some(&solution.upsampled), ..Default::default() }, out)?;
    let mut r = Report::new();
    r.config(config);
    let plots = out.join("plots");
    report_cvd(&mut r, &solution, &plots)?;
    let initial: Vec<DepthMap> = frames.iter().map(|f| f.depth.clone()).collect();
    report_depth(&mut r, &manifest, &initial, &solution.upsampled, &masks, &plots)?;
    r.write(&out.join(REPORT_FILE))?;
    Ok(r)
}

// ---------------------------------------------------------------------------
// track4d

fn run_tracks(
    set: &TrackSet,
    poses: &[PoseSE3],
    masks: Option<&DynamicMaskSequence>,
    score_trail: bool,
    config: &RunConfig,
) -> Result<Vec<TrackResult>> {
    let mode = if score_trail || masks.is_none() { ScoreMode::Trail } else { ScoreMode::Mask };
    Ok(optimize_tracks(set, poses, masks, mode, &config.track)?)
}

fn report_tracks(
    r: &mut Report,
    results: &[TrackResult],
    gt: Option<(&TrackSet, &[PoseSE3])>,
    plots: Option<&Path>,
) -> Result<()> {
    let dynamic = results.iter().filter(|t| t.score.mu > dynrefine::track4d::SIGMOID_CENTER).count();
    r.put("track.count", results.len());
    r.put("track.dynamic", dynamic);
    let (mut s0, mut s1) = (0.0, 0.0);
    for t in results.iter().filter(|t| t.score.mu <= dynrefine::track4d::SIGMOID_CENTER) {
        s0 += spread(&t.track.points);
        s1 += spread(&t.track.refined_points());
    }
    r.put("track.static_spread_initial", s0);
    r.put("track.static_spread", s1);
    let finals: Vec<f64> = results.iter().filter_map(|t| t.trace.final_best()).collect();
    r.put("track.objective_final_sum", finals.iter().sum::<f64>());
    let Some((gt_set, gt_poses)) = gt else {
        return Ok(());
    };
    if gt_set.tracks.len() != results.len() {
        return Ok(());
    }
    let (mut e0, mut e1, mut n) = (0.0, 0.0, 0usize);
    let mut errors = Vec::new();
    for (res, rec) in results.iter().zip(&gt_set.tracks) {
        let g = Track3D::from_record(rec, gt_poses, &gt_set.intrinsics)?;
        if g.len() != res.track.len() {
            continue;
        }
        for i in 0..g.len() {
            e0 += (res.track.points[i] - g.points[i]).norm();
            let e = (res.track.refined(i) - g.points[i]).norm();
            e1 += e;
            errors.push(e);
            n += 1;
        }
    }
    if n > 0 {
        r.put("track.mean_error_initial", e0 / n as f64);
        r.put("track.mean_error", e1 / n as f64);
    }
    if let Some(plots) = plots {
        write_columns(&plots.join("track_error_hist.dat"), &["lo", "hi", "count"], &histogram(&errors, HIST_BINS))?;
    }
    Ok(())
}

pub fn track4d(
    tracks_path: &Path,
    masks_flag: Option<&Path>,
    poses_path: &Path,
    out: &Path,
    score_trail: bool,
    config: &RunConfig,
) -> Result<Report> {
    require(tracks_path, "tracks file")?;
    require(poses_path, "poses file")?;
    let set = read_tracks(tracks_path)?;
    let poses = read_poses(poses_path)?;
    let masks = match masks_flag {
        Some(d) if !score_trail => {
            require(d, "mask directory")?;
            let instances = read_instance_masks(d, poses.len())?;
            let dims = instances
                .first()
                .and_then(|i| i.masks.first())
                .map(|m| m.dims())
                .unwrap_or((1, 1));
            Some(merge_masks(&instances, poses.len(), dims)?)
        }
        _ => None,
    };
    let results = run_tracks(&set, &poses, masks.as_ref(), score_trail, config)?;
    let refined = to_track_set(&results, &poses, &set.intrinsics);
    scene_io::write_tracks(out, &refined)?;
    let mut r = Report::new();
    r.config(config);
    r.put("track.score", if score_trail || masks.is_none() { "trail" } else { "mask" });
    report_tracks(&mut r, &results, None, None)?;
    let report_path = out.with_extension("report.txt");
    r.write(&report_path)?;
    Ok(r)
}

// ---------------------------------------------------------------------------
// eval

pub fn eval_traj(pred: &Path, gt: &Path, report: &Path) -> Result<Report> {
    require(pred, "predicted poses")?;
    require(gt, "reference poses")?;
    let mut r = Report::new();
    report_trajectory(&mut r, &read_poses(pred)?, &read_poses(gt)?, "traj", None)?;
    r.write(report)?;
    Ok(r)
}

/// Depth rasters `depth_NNNN.rast` in `dir`, or the `depth/` subdirectory.
fn read_depth_dir(dir: &Path) -> Result<Vec<DepthMap>> {
    require(dir, "depth directory")?;
    let dir = if dir.join("depth").is_dir() { dir.join("depth") } else { dir.to_path_buf() };
    let mut out = Vec::new();
    loop {
        let p = dir.join(depth_file_name(out.len()));
        if !p.exists() {
            break;
        }
        out.push(scene_io::read_depth(&p)?);
    }
    if out.is_empty() {
        return Err(UsageError(format!("no depth maps in {}", dir.display())).into());
    }
    Ok(out)
}

pub fn eval_depth(pred: &Path, gt: &Path, report: &Path) -> Result<Report> {
    let p = read_depth_dir(pred)?;
    let g = read_depth_dir(gt)?;
    let p = fit_to(&p, g[0].dims());
    let m = depth_metrics(&p, &g, None, ScaleAlignment::Median)?;
    let mut r = Report::new();
    put_depth(&mut r, "depth", &m);
    r.put("depth.scale", m.scale);
    r.write(report)?;
    Ok(r)
}

/// Frame count of an instance-mask directory, from its first instance.
fn instance_frames(dir: &Path) -> Result<(usize, (usize, usize))> {
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let Some(first) = subdirs.first() else {
        return Err(UsageError(format!("no instance masks in {}", dir.display())).into());
    };
    let mut n = 0;
    while first.join(mask_file_name(n)).exists() {
        n += 1;
    }
    let dims = scene_io::read_mask(&first.join(mask_file_name(0)))?.dims();
    Ok((n, dims))
}

pub fn eval_mask(pred: &Path, gt: &Path, report: &Path) -> Result<Report> {
    require(pred, "predicted masks")?;
    require(gt, "reference masks")?;
    let (frames, dims) = instance_frames(gt)?;
    let g = merge_masks(&read_instance_masks(gt, frames)?, frames, dims)?;
    let p = merge_masks(&read_instance_masks(pred, frames)?, frames, dims)?;
    let m = mask_metrics(&p.masks, &g.masks, None)?;
    let mut r = Report::new();
    r.put("mask.j", m.j);
    r.put("mask.f", m.f);
    r.write(report)?;
    Ok(r)
}

// ---------------------------------------------------------------------------
// pipeline

pub fn pipeline(manifest_path: &Path, masks_flag: Option<&Path>, out: &Path, config: &RunConfig) -> Result<Report> {
    let manifest = read_manifest(manifest_path)?;
    let dims = (manifest.width, manifest.height);
    let masks = load_masks(mask_dir(masks_flag, &manifest, config), manifest.frame_count, dims)?;
    let plots = out.join("plots");
    let mut r = Report::new();
    r.config(config);

    let (manifest, ba_result) = run_ba(manifest_path, &masks, config)?;
    report_ba(&mut r, &ba_result, &plots)?;
    let gt_poses = manifest.gt_poses.as_ref().map(|p| read_poses(p)).transpose()?;
    if let Some(gt) = &gt_poses {
        report_trajectory(&mut r, &initial_poses(&manifest), gt, "traj_initial", None)?;
        report_trajectory(&mut r, &ba_result.poses, gt, "traj", Some(&plots))?;
    }

    let (frames, depth) = run_cvd(manifest_path, &masks, &ba_result.poses, &ba_result.intrinsics, config)?;
    report_cvd(&mut r, &depth, &plots)?;
    let initial: Vec<DepthMap> = frames.iter().map(|f| f.depth.clone()).collect();
    report_depth(&mut r, &manifest, &initial, &depth.upsampled, &masks, &plots)?;

    let mut refined_tracks = None;
    if let Some(tp) = &manifest.tracks {
        let mut set = read_tracks(tp)?;
        set.intrinsics = ba_result.intrinsics;
        let track_masks = (config.mask_mode != MaskMode::None).then_some(&masks);
        let results = run_tracks(&set, &ba_result.poses, track_masks, track_masks.is_none(), config)?;
        let gt_set = manifest.gt_tracks.as_ref().map(|p| read_tracks(p)).transpose()?;
        let gt = match (&gt_set, &gt_poses) {
            (Some(s), Some(p)) => Some((s, p.as_slice())),
            _ => None,
        };
        report_tracks(&mut r, &results, gt, Some(&plots))?;
        refined_tracks = Some(to_track_set(&results, &ba_result.poses, &ba_result.intrinsics));
    }

    write_outputs(
        &Outputs {
            poses: Some(&ba_result.poses),
            depths: Some(&depth.upsampled),
            tracks: refined_tracks.as_ref(),
        },
        out,
    )?;
    r.put("out.poses", POSES_FILE);
    if refined_tracks.is_some() {
        r.put("out.tracks", TRACKS_FILE);
    }
    r.write(&out.join(REPORT_FILE))?;
    Ok(r)
}
