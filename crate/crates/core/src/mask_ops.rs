//! Dynamic-mask merging, sub-pixel mask lookup and mask-derived motion scores.

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::raster::{Mask, Raster};
pub use crate::scene_io::InstanceMaskSequence;

/// Motion score assigned to a track touching the dynamic mask.
pub const MU_DYNAMIC: f64 = 25.0;
/// Motion score assigned to a track that never touches the dynamic mask.
pub const MU_STATIC: f64 = 15.0;

/// Per-frame binary masks, 1 = dynamic.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicMaskSequence {
    pub masks: Vec<Mask>,
}

impl DynamicMaskSequence {
    pub fn empty(frames: usize, width: usize, height: usize) -> Self {
        Self {
            masks: vec![Raster::filled(width, height, 1, 0); frames],
        }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Nearest-neighbour resampling of every frame.
    pub fn resampled(&self, width: usize, height: usize) -> Self {
        Self {
            masks: self
                .masks
                .iter()
                .map(|m| {
                    if m.dims() == (width, height) {
                        m.clone()
                    } else {
                        m.resample_nearest(width, height)
                    }
                })
                .collect(),
        }
    }
}

/// Element-wise union of instance masks. `frames`/`dims` give the shape used
/// when the instance list is empty.
pub fn merge_masks(
    instances: &[InstanceMaskSequence],
    frames: usize,
    dims: (usize, usize),
) -> Result<DynamicMaskSequence> {
    let mut out = DynamicMaskSequence::empty(frames, dims.0, dims.1);
    for inst in instances {
        if inst.masks.len() != frames {
            return Err(Error::DimensionMismatch(format!(
                "instance {} has {} frames, expected {frames}",
                inst.instance_id,
                inst.masks.len()
            )));
        }
        for (acc, m) in out.masks.iter_mut().zip(&inst.masks) {
            if m.dims() != dims || m.channels() != 1 {
                return Err(Error::DimensionMismatch(format!(
                    "instance {} mask is {}x{}, expected {}x{}",
                    inst.instance_id,
                    m.width(),
                    m.height(),
                    dims.0,
                    dims.1
                )));
            }
            for (a, &b) in acc.data_mut().iter_mut().zip(m.data()) {
                *a |= (b != 0) as u8;
            }
        }
    }
    Ok(out)
}

/// Mask value at the pixel nearest `p`; positions outside the image clamp.
pub fn sample_mask(masks: &DynamicMaskSequence, t: usize, p: &Vector2<f64>) -> u8 {
    masks.masks[t].nearest(p, 0)
}

/// `MU_DYNAMIC` if any point of the track lies on the dynamic mask, else
/// `MU_STATIC`. Points are `(frame, pixel)`.
pub fn track_motion_score(
    track_points: &[(usize, Vector2<f64>)],
    masks: &DynamicMaskSequence,
) -> Result<f64> {
    if track_points.is_empty() {
        return Err(Error::EmptyTrack);
    }
    let dynamic = track_points
        .iter()
        .any(|(t, p)| sample_mask(masks, *t, p) == 1);
    Ok(if dynamic { MU_DYNAMIC } else { MU_STATIC })
}
