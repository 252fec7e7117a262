//! Mask-conditioned refinement of camera poses, video depth and 4D point
//! tracks for videos containing moving objects.
//!
//! Three optimization pipelines consume a per-frame binary dynamic mask:
//!
//! * [`ba`]: sliding-window bundle adjustment over flow-chained tracks, with
//!   masked points removed from the reprojection loss;
//! * [`cvd`]: consistent video depth, with the uncertainty map initialized
//!   from the mask;
//! * [`track4d`]: ray-offset refinement of 3D tracks, with the static/dynamic
//!   weighting driven by a mask-derived motion score.
//!
//! [`synth`] generates analytic scenes with exact ground truth, and
//! [`metrics`] implements the trajectory, depth and mask evaluation protocols.

pub mod ba;
pub mod cvd;
pub mod error;
pub mod geometry;
pub mod mask_ops;
pub mod metrics;
pub mod numdiff;
pub mod optim;
pub mod raster;
pub mod scene_io;
pub mod synth;
pub mod track4d;

pub use error::{Error, Result};
pub use geometry::{Intrinsics, PoseSE3, SimilarityTransform};
pub use mask_ops::{DynamicMaskSequence, InstanceMaskSequence};
pub use optim::LossEvaluation;
pub use raster::{DepthMap, FlowField, Mask, Raster};
pub use scene_io::{FrameBundle, SequenceManifest, TrackSet};
