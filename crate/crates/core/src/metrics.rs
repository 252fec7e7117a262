//! Trajectory, depth and segmentation evaluation.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{umeyama_align, PoseSE3, SimilarityTransform};
use crate::raster::{DepthMap, Mask};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryMetrics {
    pub ate: f64,
    pub rte: f64,
    /// Degrees.
    pub rre: f64,
}

/// Aligns camera centers with Umeyama, then reports the RMS center residual
/// (ATE) and the RMS translation / rotation magnitude of the consecutive
/// relative-pose error (RTE, RRE).
pub fn trajectory_metrics(estimated: &[PoseSE3], reference: &[PoseSE3]) -> Result<TrajectoryMetrics> {
    if estimated.len() != reference.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimated poses vs {} reference poses",
            estimated.len(),
            reference.len()
        )));
    }
    let est: Vec<Vector3<f64>> = estimated.iter().map(|p| *p.translation()).collect();
    let gt: Vec<Vector3<f64>> = reference.iter().map(|p| *p.translation()).collect();
    let sim = umeyama_align(&est, &gt)?;
    Ok(aligned_trajectory_metrics(estimated, reference, &sim))
}

/// Metrics for an explicit alignment.
pub fn aligned_trajectory_metrics(
    estimated: &[PoseSE3],
    reference: &[PoseSE3],
    sim: &SimilarityTransform,
) -> TrajectoryMetrics {
    let aligned: Vec<PoseSE3> = estimated.iter().map(|p| sim.apply_pose(p)).collect();
    let n = aligned.len() as f64;
    let ate = (aligned
        .iter()
        .zip(reference)
        .map(|(a, r)| (a.translation() - r.translation()).norm_squared())
        .sum::<f64>()
        / n)
        .sqrt();

    let steps = aligned.len().saturating_sub(1);
    if steps == 0 {
        return TrajectoryMetrics { ate, rte: 0.0, rre: 0.0 };
    }
    let (mut t2, mut r2) = (0.0, 0.0);
    for k in 0..steps {
        let rel_est = aligned[k].inverse().compose(&aligned[k + 1]);
        let rel_gt = reference[k].inverse().compose(&reference[k + 1]);
        let err = rel_gt.inverse().compose(&rel_est);
        t2 += err.translation().norm_squared();
        r2 += err.angle().to_degrees().powi(2);
    }
    TrajectoryMetrics {
        ate,
        rte: (t2 / steps as f64).sqrt(),
        rre: (r2 / steps as f64).sqrt(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub log_rmse: f64,
    /// Percentage in [0, 100].
    pub delta_125: f64,
    /// Scale applied to the prediction before scoring.
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScaleAlignment {
    #[default]
    Median,
    None,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Depth metrics pooled over all frames with a single per-sequence scale.
/// A pixel is valid where `valid` is non-zero (or everywhere if `None`) and
/// both depths are positive and finite.
pub fn depth_metrics(
    predicted: &[DepthMap],
    reference: &[DepthMap],
    valid: Option<&[Mask]>,
    alignment: ScaleAlignment,
) -> Result<DepthMetrics> {
    if predicted.len() != reference.len() || valid.is_some_and(|v| v.len() != predicted.len()) {
        return Err(Error::DimensionMismatch("depth sequence lengths differ".into()));
    }
    let mut pairs = Vec::new();
    for (t, (p, g)) in predicted.iter().zip(reference).enumerate() {
        if p.dims() != g.dims() || valid.is_some_and(|v| v[t].dims() != g.dims()) {
            return Err(Error::DimensionMismatch(format!("frame {t} depth dimensions differ")));
        }
        for i in 0..g.len_pixels() {
            let (dp, dg) = (p.data()[i] as f64, g.data()[i] as f64);
            let ok = valid.map_or(true, |v| v[t].data()[i] != 0);
            if ok && dp > 0.0 && dg > 0.0 && dp.is_finite() && dg.is_finite() {
                pairs.push((dp, dg));
            }
        }
    }
    depth_metrics_from_pairs(&pairs, alignment)
}

/// Metrics over `(predicted, reference)` depth pairs.
pub fn depth_metrics_from_pairs(pairs: &[(f64, f64)], alignment: ScaleAlignment) -> Result<DepthMetrics> {
    if pairs.is_empty() {
        return Err(Error::EmptyValidSet);
    }
    let scale = match alignment {
        ScaleAlignment::Median => {
            median(pairs.iter().map(|p| p.1).collect()) / median(pairs.iter().map(|p| p.0).collect())
        }
        ScaleAlignment::None => 1.0,
    };
    let n = pairs.len() as f64;
    let (mut abs_rel, mut log2, mut inliers) = (0.0, 0.0, 0usize);
    for &(p, g) in pairs {
        let p = p * scale;
        abs_rel += (p - g).abs() / g;
        log2 += (p.ln() - g.ln()).powi(2);
        if (p / g).max(g / p) < 1.25 {
            inliers += 1;
        }
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        log_rmse: (log2 / n).sqrt(),
        delta_125: 100.0 * inliers as f64 / n,
        scale,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskMetrics {
    pub j: f64,
    pub f: f64,
}

/// Boundary tolerance in pixels: 0.8% of the image diagonal, at least 1.
pub fn boundary_tolerance(width: usize, height: usize) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    ((0.008 * diag).ceil() as usize).max(1)
}

pub fn jaccard(pred: &Mask, gt: &Mask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (a != 0, b != 0);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Foreground pixels with a 4-neighbour outside the foreground (image border
/// counts as outside).
pub fn boundary(mask: &Mask) -> Vec<(usize, usize)> {
    let (w, h) = mask.dims();
    let fg = |x: isize, y: isize| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && mask.get(x as usize, y as usize, 0) != 0
    };
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if fg(x, y) && !(fg(x - 1, y) && fg(x + 1, y) && fg(x, y - 1) && fg(x, y + 1)) {
                out.push((x as usize, y as usize));
            }
        }
    }
    out
}

fn matched_fraction(from: &[(usize, usize)], to: &Mask, radius: usize) -> f64 {
    let (w, h) = to.dims();
    // squared-distance disk
    let r2 = (radius * radius) as isize;
    let r = radius as isize;
    let hit = from
        .iter()
        .filter(|&&(x, y)| {
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy > r2 {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && to.get(nx as usize, ny as usize, 0) != 0 {
                        return true;
                    }
                }
            }
            false
        })
        .count();
    hit as f64 / from.len() as f64
}

/// Boundary F-measure for one frame.
pub fn contour_f(pred: &Mask, gt: &Mask, radius: usize) -> f64 {
    let bp = boundary(pred);
    let bg = boundary(gt);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let as_mask = |b: &[(usize, usize)]| {
        let mut m = Mask::filled(gt.width(), gt.height(), 1, 0);
        for &(x, y) in b {
            m.set(x, y, 0, 1);
        }
        m
    };
    let precision = matched_fraction(&bp, &as_mask(&bg), radius);
    let recall = matched_fraction(&bg, &as_mask(&bp), radius);
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-frame J and F averaged over the sequence. `tolerance` overrides the
/// boundary radius.
pub fn mask_metrics(predicted: &[Mask], reference: &[Mask], tolerance: Option<usize>) -> Result<MaskMetrics> {
    if predicted.len() != reference.len() || predicted.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} predicted vs {} reference masks",
            predicted.len(),
            reference.len()
        )));
    }
    let (mut j, mut f) = (0.0, 0.0);
    for (t, (p, g)) in predicted.iter().zip(reference).enumerate() {
        if p.dims() != g.dims() {
            return Err(Error::DimensionMismatch(format!("frame {t} mask dimensions differ")));
        }
        let radius = tolerance.unwrap_or_else(|| boundary_tolerance(g.width(), g.height()));
        j += jaccard(p, g);
        f += contour_f(p, g, radius);
    }
    let n = predicted.len() as f64;
    Ok(MaskMetrics { j: j / n, f: f / n })
}


#[cfg(test)]
mod properties {
    use super::*;
    use crate::geometry::{so3_exp, SimilarityTransform};
    use crate::raster::Raster;
    use nalgebra::{Vector3, Vector6};
    use proptest::prelude::*;

    fn mask() -> impl Strategy<Value = Mask> {
        proptest::collection::vec(0u8..2, 20).prop_map(|d| Raster::from_vec(5, 4, 1, d).unwrap())
    }

    proptest! {
        #[test]
        fn jaccard_is_symmetric_and_bounded(a in mask(), b in mask()) {
            let j = jaccard(&a, &b);
            prop_assert!((0.0..=1.0).contains(&j));
            prop_assert_eq!(j, jaccard(&b, &a));
            prop_assert_eq!(jaccard(&a, &a), 1.0);
        }

        #[test]
        fn trajectory_errors_ignore_similarity(
            w in proptest::array::uniform3(-2.0f64..2.0),
            t in proptest::array::uniform3(-5.0f64..5.0),
            scale in 0.2f64..5.0,
        ) {
            let reference: Vec<PoseSE3> = (0..8)
                .map(|i| {
                    let s = i as f64;
                    PoseSE3::exp(&Vector6::new(0.05 * s, 0.02 * s.sin(), 0.01, 0.3 * s, 0.1 * s * s, (0.4 * s).cos()))
                })
                .collect();
            let sim = SimilarityTransform { scale, rotation: so3_exp(&Vector3::from(w)), translation: Vector3::from(t) };
            let moved: Vec<PoseSE3> = reference.iter().map(|p| sim.apply_pose(p)).collect();
            let m = trajectory_metrics(&moved, &reference).unwrap();
            prop_assert!(m.ate < 1e-8 && m.rte < 1e-8 && m.rre < 1e-8, "{:?}", m);
        }
    }
}
