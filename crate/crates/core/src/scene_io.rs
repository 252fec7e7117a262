//! On-disk formats: binary rasters, the sequence manifest, pose files, track
//! files and instance-mask directories.
//!
//! Raster files are little-endian with a fixed 32-byte header:
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `DYRF`                           |
//! | 4      | 2    | format version (1)                     |
//! | 6      | 2    | dtype code (1 = f32, 2 = u8)           |
//! | 8      | 4    | height                                 |
//! | 12     | 4    | width                                  |
//! | 16     | 4    | channels                               |
//! | 20     | 12   | reserved, zero                         |
//!
//! followed by `height * width * channels` values, row-major with interleaved
//! channels. Text formats print floats with the shortest representation that
//! parses back to the same bits.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, PoseSE3};
use crate::raster::{DepthMap, FlowField, Mask, Raster};

pub const RASTER_MAGIC: [u8; 4] = *b"DYRF";
pub const RASTER_VERSION: u16 = 1;
pub const RASTER_HEADER_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    U8 = 2,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

/// Element types that can be stored in a raster file.
pub trait RasterElement: Copy + Sized {
    const DTYPE: DType;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl RasterElement for f32 {
    const DTYPE: DType = DType::F32;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl RasterElement for u8 {
    const DTYPE: DType = DType::U8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

pub fn encode_raster<T: RasterElement>(raster: &Raster<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(RASTER_HEADER_LEN + raster.data().len() * T::DTYPE.size());
    out.extend_from_slice(&RASTER_MAGIC);
    out.extend_from_slice(&RASTER_VERSION.to_le_bytes());
    out.extend_from_slice(&(T::DTYPE as u16).to_le_bytes());
    out.extend_from_slice(&(raster.height() as u32).to_le_bytes());
    out.extend_from_slice(&(raster.width() as u32).to_le_bytes());
    out.extend_from_slice(&(raster.channels() as u32).to_le_bytes());
    out.extend_from_slice(&[0u8; 12]);
    for &v in raster.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode_raster<T: RasterElement>(bytes: &[u8], file: &Path) -> Result<Raster<T>> {
    if bytes.len() < RASTER_HEADER_LEN {
        return Err(Error::parse(
            file,
            bytes.len() as u64,
            format!("truncated header: {} of {RASTER_HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if bytes[0..4] != RASTER_MAGIC {
        return Err(Error::parse(file, 0, "bad magic"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = u16_at(4);
    if version != RASTER_VERSION {
        return Err(Error::parse(file, 4, format!("unsupported version {version}")));
    }
    let dtype = u16_at(6);
    if dtype != T::DTYPE as u16 {
        return Err(Error::parse(
            file,
            6,
            format!("dtype code {dtype}, expected {}", T::DTYPE as u16),
        ));
    }
    let height = u32_at(8) as usize;
    let width = u32_at(12) as usize;
    let channels = u32_at(16) as usize;
    if width == 0 || height == 0 || channels == 0 {
        return Err(Error::parse(file, 8, "zero-sized raster"));
    }
    let elem = T::DTYPE.size();
    let count = width * height * channels;
    let expected = RASTER_HEADER_LEN + count * elem;
    if bytes.len() < expected {
        return Err(Error::parse(
            file,
            bytes.len() as u64,
            format!("truncated payload: expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::parse(file, expected as u64, "trailing bytes after payload"));
    }
    let data = bytes[RASTER_HEADER_LEN..]
        .chunks_exact(elem)
        .map(T::read_le)
        .collect();
    Raster::from_vec(width, height, channels, data)
}

pub fn read_raster<T: RasterElement>(path: &Path) -> Result<Raster<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes, path)
}

pub fn write_raster<T: RasterElement>(path: &Path, raster: &Raster<T>) -> Result<()> {
    write_bytes(path, &encode_raster(raster))
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let d: DepthMap = read_raster(path)?;
    check_channels(&d, 1, path)?;
    if let Some(i) = d.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::parse(
            path,
            (RASTER_HEADER_LEN + 4 * i) as u64,
            "non-finite depth",
        ));
    }
    Ok(d)
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let f: FlowField = read_raster(path)?;
    check_channels(&f, 2, path)?;
    if let Some(i) = f.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::parse(
            path,
            (RASTER_HEADER_LEN + 4 * i) as u64,
            "non-finite flow",
        ));
    }
    Ok(f)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let m: Mask = read_raster(path)?;
    check_channels(&m, 1, path)?;
    if let Some(i) = m.data().iter().position(|&v| v > 1) {
        return Err(Error::parse(
            path,
            (RASTER_HEADER_LEN + i) as u64,
            "mask values must be 0 or 1",
        ));
    }
    Ok(m)
}

fn check_channels<T>(r: &Raster<T>, channels: usize, path: &Path) -> Result<()>
where
    T: Copy,
{
    if r.channels() != channels {
        return Err(Error::parse(
            path,
            16,
            format!("expected {channels} channel(s), found {}", r.channels()),
        ));
    }
    Ok(())
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    if depth.channels() != 1 {
        return Err(Error::Validation("depth map must have one channel".into()));
    }
    if depth.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "depth map for {} contains non-finite values",
            path.display()
        )));
    }
    write_raster(path, depth)
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    if flow.channels() != 2 || flow.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "flow field for {} must be two finite channels",
            path.display()
        )));
    }
    write_raster(path, flow)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    if mask.channels() != 1 || mask.data().iter().any(|&v| v > 1) {
        return Err(Error::Validation(format!(
            "mask for {} must be single-channel binary",
            path.display()
        )));
    }
    write_raster(path, mask)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// line-oriented text helpers

/// One non-blank, non-comment line with its byte offset.
pub(crate) struct Line<'a> {
    pub offset: u64,
    pub tokens: Vec<&'a str>,
}

pub(crate) fn lines(text: &str) -> impl Iterator<Item = Line<'_>> {
    let mut offset = 0u64;
    text.split_inclusive('\n').filter_map(move |raw| {
        let start = offset;
        offset += raw.len() as u64;
        let content = raw.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.is_empty() {
            None
        } else {
            Some(Line {
                offset: start,
                tokens,
            })
        }
    })
}

pub(crate) fn parse_num<T: std::str::FromStr>(tok: &str, file: &Path, offset: u64) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::parse(file, offset, format!("invalid number '{tok}'")))
}

pub(crate) fn expect_len(line: &Line<'_>, n: usize, file: &Path) -> Result<()> {
    if line.tokens.len() != n {
        return Err(Error::parse(
            file,
            line.offset,
            format!(
                "'{}' expects {} value(s), found {}",
                line.tokens[0],
                n - 1,
                line.tokens.len() - 1
            ),
        ));
    }
    Ok(())
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| Error::parse(path, e.utf8_error().valid_up_to() as u64, "not UTF-8"))
}

// ---------------------------------------------------------------------------
// poses

pub fn format_poses(poses: &[PoseSE3]) -> String {
    let mut s = String::from("# frame r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz (camera-to-world)\n");
    for (i, p) in poses.iter().enumerate() {
        let r = p.rotation();
        let t = p.translation();
        let _ = write!(s, "pose {i}");
        for row in 0..3 {
            for col in 0..3 {
                let _ = write!(s, " {}", r[(row, col)]);
            }
        }
        let _ = writeln!(s, " {} {} {}", t.x, t.y, t.z);
    }
    s
}

pub fn parse_poses(text: &str, file: &Path) -> Result<Vec<PoseSE3>> {
    let mut poses = Vec::new();
    for line in lines(text) {
        if line.tokens[0] != "pose" {
            return Err(Error::parse(file, line.offset, format!("unknown key '{}'", line.tokens[0])));
        }
        expect_len(&line, 14, file)?;
        let idx: usize = parse_num(line.tokens[1], file, line.offset)?;
        if idx != poses.len() {
            return Err(Error::parse(
                file,
                line.offset,
                format!("pose index {idx} out of order, expected {}", poses.len()),
            ));
        }
        let v: Vec<f64> = line.tokens[2..]
            .iter()
            .map(|t| parse_num(t, file, line.offset))
            .collect::<Result<_>>()?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::parse(file, line.offset, "non-finite pose entry"));
        }
        let r = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        poses.push(PoseSE3::from_parts(r, Vector3::new(v[9], v[10], v[11])));
    }
    Ok(poses)
}

pub fn read_poses(path: &Path) -> Result<Vec<PoseSE3>> {
    parse_poses(&read_text(path)?, path)
}

pub fn write_poses(path: &Path, poses: &[PoseSE3]) -> Result<()> {
    for p in poses {
        let m = p.matrix();
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("pose contains non-finite values".into()));
        }
    }
    write_bytes(path, format_poses(poses).as_bytes())
}

// ---------------------------------------------------------------------------
// tracks

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackPoint {
    pub frame: usize,
    pub u: f64,
    pub v: f64,
    /// Depth along the camera z axis, in scene units.
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackRecord {
    pub id: usize,
    pub points: Vec<TrackPoint>,
    /// Motion score attached by the track optimizer, if any.
    pub score: Option<f64>,
}

/// A set of 2D point tracks with per-point depth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackSet {
    pub intrinsics: Intrinsics,
    pub tracks: Vec<TrackRecord>,
}

pub fn format_tracks(set: &TrackSet) -> String {
    let k = &set.intrinsics;
    let mut s = String::from("# track <id> <count> [score]; p <frame> <u> <v> <depth>\n");
    let _ = writeln!(s, "intrinsics {} {} {} {}", k.fx, k.fy, k.cx, k.cy);
    for t in &set.tracks {
        match t.score {
            Some(mu) => {
                let _ = writeln!(s, "track {} {} {}", t.id, t.points.len(), mu);
            }
            None => {
                let _ = writeln!(s, "track {} {}", t.id, t.points.len());
            }
        }
        for p in &t.points {
            let _ = writeln!(s, "p {} {} {} {}", p.frame, p.u, p.v, p.depth);
        }
    }
    s
}

pub fn parse_tracks(text: &str, file: &Path) -> Result<TrackSet> {
    let mut intrinsics = None;
    let mut tracks: Vec<TrackRecord> = Vec::new();
    let mut remaining = 0usize;
    let mut last_offset = 0;
    for line in lines(text) {
        last_offset = line.offset;
        let num = |i: usize| parse_num::<f64>(line.tokens[i], file, line.offset);
        match line.tokens[0] {
            "intrinsics" => {
                expect_len(&line, 5, file)?;
                let k = Intrinsics::new(num(1)?, num(2)?, num(3)?, num(4)?)
                    .map_err(|e| Error::parse(file, line.offset, e.to_string()))?;
                intrinsics = Some(k);
            }
            "track" => {
                if remaining != 0 {
                    return Err(Error::parse(file, line.offset, "previous track is incomplete"));
                }
                if line.tokens.len() != 3 && line.tokens.len() != 4 {
                    return Err(Error::parse(file, line.offset, "'track' expects <id> <count> [score]"));
                }
                let id = parse_num(line.tokens[1], file, line.offset)?;
                remaining = parse_num(line.tokens[2], file, line.offset)?;
                let score = if line.tokens.len() == 4 { Some(num(3)?) } else { None };
                tracks.push(TrackRecord {
                    id,
                    points: Vec::with_capacity(remaining),
                    score,
                });
            }
            "p" => {
                expect_len(&line, 5, file)?;
                let Some(track) = tracks.last_mut().filter(|_| remaining > 0) else {
                    return Err(Error::parse(file, line.offset, "point outside a track"));
                };
                let point = TrackPoint {
                    frame: parse_num(line.tokens[1], file, line.offset)?,
                    u: num(2)?,
                    v: num(3)?,
                    depth: num(4)?,
                };
                if !(point.u.is_finite() && point.v.is_finite() && point.depth.is_finite()) {
                    return Err(Error::parse(file, line.offset, "non-finite track point"));
                }
                track.points.push(point);
                remaining -= 1;
            }
            other => {
                return Err(Error::parse(file, line.offset, format!("unknown key '{other}'")));
            }
        }
    }
    if remaining != 0 {
        return Err(Error::parse(file, last_offset, "last track is incomplete"));
    }
    let intrinsics =
        intrinsics.ok_or_else(|| Error::parse(file, 0, "missing 'intrinsics' line"))?;
    Ok(TrackSet { intrinsics, tracks })
}

pub fn read_tracks(path: &Path) -> Result<TrackSet> {
    parse_tracks(&read_text(path)?, path)
}

pub fn write_tracks(path: &Path, set: &TrackSet) -> Result<()> {
    write_bytes(path, format_tracks(set).as_bytes())
}

// ---------------------------------------------------------------------------
// instance masks

/// Binary mask sequence of one object instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMaskSequence {
    pub instance_id: u32,
    pub masks: Vec<Mask>,
}

pub fn mask_file_name(frame: usize) -> String {
    format!("mask_{frame:04}.rast")
}

/// Reads `<dir>/<instance_id>/mask_NNNN.rast` for every numeric subdirectory,
/// in ascending instance order.
pub fn read_instance_masks(dir: &Path, frame_count: usize) -> Result<Vec<InstanceMaskSequence>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if !entry.path().is_dir() {
            continue;
        }
        if let Some(id) = entry.file_name().to_str().and_then(|s| s.parse::<u32>().ok()) {
            ids.push(id);
        }
    }
    ids.sort_unstable();
    ids.into_iter()
        .map(|id| {
            let sub = dir.join(id.to_string());
            let masks = (0..frame_count)
                .map(|t| read_mask(&sub.join(mask_file_name(t))))
                .collect::<Result<Vec<_>>>()?;
            Ok(InstanceMaskSequence {
                instance_id: id,
                masks,
            })
        })
        .collect()
}

pub fn write_instance_masks(dir: &Path, instances: &[InstanceMaskSequence]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for inst in instances {
        let sub = dir.join(inst.instance_id.to_string());
        for (t, m) in inst.masks.iter().enumerate() {
            write_mask(&sub.join(mask_file_name(t)), m)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// manifest and frame stream

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameEntry {
    pub depth: PathBuf,
    pub flow: Option<PathBuf>,
    pub flow_back: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub gt_depth: Option<PathBuf>,
}

/// Parsed sequence manifest. Relative paths are resolved against the manifest
/// directory.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceManifest {
    pub path: PathBuf,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub frames: Vec<FrameEntry>,
    pub poses: Option<Vec<PoseSE3>>,
    pub masks_dir: Option<PathBuf>,
    pub tracks: Option<PathBuf>,
    pub gt_poses: Option<PathBuf>,
    pub gt_tracks: Option<PathBuf>,
    pub gt_masks: Option<PathBuf>,
}

impl SequenceManifest {
    pub fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }
}

/// One frame of a sequence: initial depth, flows and the dynamic mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBundle {
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub depth: DepthMap,
    /// Displacement to frame `index + 1`; absent on the last frame.
    pub flow_forward: Option<FlowField>,
    /// Displacement to frame `index - 1`; optional, absent on the first frame.
    pub flow_backward: Option<FlowField>,
    pub mask: Mask,
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<SequenceManifest> {
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let resolve = |s: &str| -> PathBuf {
        let p = Path::new(s);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };

    let mut frame_count = None;
    let mut width = None;
    let mut height = None;
    let mut intrinsics = None;
    let mut poses_path: Option<PathBuf> = None;
    let mut masks_dir = None;
    let mut tracks = None;
    let mut gt_poses = None;
    let mut gt_tracks = None;
    let mut gt_masks = None;
    let mut frames: Vec<(u64, usize, FrameEntry)> = Vec::new();
    let mut frame_count_offset = 0;

    for line in lines(text) {
        let off = line.offset;
        match line.tokens[0] {
            "version" => {
                expect_len(&line, 2, path)?;
                if line.tokens[1] != "1" {
                    return Err(Error::parse(path, off, "unsupported manifest version"));
                }
            }
            "frame_count" => {
                expect_len(&line, 2, path)?;
                frame_count = Some(parse_num::<usize>(line.tokens[1], path, off)?);
                frame_count_offset = off;
            }
            "width" => {
                expect_len(&line, 2, path)?;
                width = Some(parse_num::<usize>(line.tokens[1], path, off)?);
            }
            "height" => {
                expect_len(&line, 2, path)?;
                height = Some(parse_num::<usize>(line.tokens[1], path, off)?);
            }
            "intrinsics" => {
                expect_len(&line, 5, path)?;
                let v: Vec<f64> = line.tokens[1..]
                    .iter()
                    .map(|t| parse_num(t, path, off))
                    .collect::<Result<_>>()?;
                intrinsics = Some(
                    Intrinsics::new(v[0], v[1], v[2], v[3])
                        .map_err(|e| Error::parse(path, off, e.to_string()))?,
                );
            }
            "poses" | "masks" | "tracks" | "gt_poses" | "gt_tracks" | "gt_masks" => {
                expect_len(&line, 2, path)?;
                let p = Some(resolve(line.tokens[1]));
                match line.tokens[0] {
                    "poses" => poses_path = p,
                    "masks" => masks_dir = p,
                    "tracks" => tracks = p,
                    "gt_poses" => gt_poses = p,
                    "gt_tracks" => gt_tracks = p,
                    _ => gt_masks = p,
                }
            }
            "frame" => {
                if line.tokens.len() < 3 {
                    return Err(Error::parse(path, off, "'frame' expects an index and depth=<path>"));
                }
                let idx: usize = parse_num(line.tokens[1], path, off)?;
                let mut entry = FrameEntry::default();
                let mut have_depth = false;
                for kv in &line.tokens[2..] {
                    let Some((k, v)) = kv.split_once('=') else {
                        return Err(Error::parse(path, off, format!("expected key=value, got '{kv}'")));
                    };
                    match k {
                        "depth" => {
                            entry.depth = resolve(v);
                            have_depth = true;
                        }
                        "flow" => entry.flow = Some(resolve(v)),
                        "flow_back" => entry.flow_back = Some(resolve(v)),
                        "mask" => entry.mask = Some(resolve(v)),
                        "gt_depth" => entry.gt_depth = Some(resolve(v)),
                        _ => return Err(Error::parse(path, off, format!("unknown frame key '{k}'"))),
                    }
                }
                if !have_depth {
                    return Err(Error::parse(path, off, "frame is missing depth=<path>"));
                }
                frames.push((off, idx, entry));
            }
            other => {
                return Err(Error::parse(path, off, format!("unknown key '{other}'")));
            }
        }
    }

    let frame_count =
        frame_count.ok_or_else(|| Error::parse(path, 0, "missing 'frame_count'"))?;
    if frame_count < 2 {
        return Err(Error::parse(path, frame_count_offset, "frame_count ≥ 2 required"));
    }
    let width = width.ok_or_else(|| Error::parse(path, 0, "missing 'width'"))?;
    let height = height.ok_or_else(|| Error::parse(path, 0, "missing 'height'"))?;
    if width < 2 || height < 2 {
        return Err(Error::parse(path, 0, "image must be at least 2x2"));
    }
    let intrinsics = intrinsics.ok_or_else(|| Error::parse(path, 0, "missing 'intrinsics'"))?;
    if frames.len() != frame_count {
        return Err(Error::parse(
            path,
            text.len() as u64,
            format!("frame_count is {frame_count} but {} frame lines found", frames.len()),
        ));
    }
    for (i, (off, idx, entry)) in frames.iter().enumerate() {
        if *idx != i {
            return Err(Error::parse(path, *off, format!("frame {idx} out of order, expected {i}")));
        }
        let last = i + 1 == frame_count;
        if last && entry.flow.is_some() {
            return Err(Error::parse(path, *off, "last frame must not carry forward flow"));
        }
        if !last && entry.flow.is_none() {
            return Err(Error::parse(path, *off, format!("frame {i} is missing forward flow")));
        }
        if i == 0 && entry.flow_back.is_some() {
            return Err(Error::parse(path, *off, "first frame must not carry backward flow"));
        }
    }
    let poses = match poses_path {
        Some(p) => {
            let poses = read_poses(&p)?;
            if poses.len() != frame_count {
                return Err(Error::parse(
                    &p,
                    0,
                    format!("{} poses for {frame_count} frames", poses.len()),
                ));
            }
            Some(poses)
        }
        None => None,
    };

    Ok(SequenceManifest {
        path: path.to_path_buf(),
        frame_count,
        width,
        height,
        intrinsics,
        frames: frames.into_iter().map(|(_, _, e)| e).collect(),
        poses,
        masks_dir,
        tracks,
        gt_poses,
        gt_tracks,
        gt_masks,
    })
}

pub fn format_manifest(m: &SequenceManifest) -> String {
    let base = m.base_dir();
    let rel = |p: &Path| -> String {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let k = &m.intrinsics;
    let mut s = String::from("# dynrefine sequence manifest\nversion 1\n");
    let _ = writeln!(s, "frame_count {}", m.frame_count);
    let _ = writeln!(s, "width {}", m.width);
    let _ = writeln!(s, "height {}", m.height);
    let _ = writeln!(s, "intrinsics {} {} {} {}", k.fx, k.fy, k.cx, k.cy);
    for (key, p) in [
        ("masks", &m.masks_dir),
        ("tracks", &m.tracks),
        ("gt_poses", &m.gt_poses),
        ("gt_tracks", &m.gt_tracks),
        ("gt_masks", &m.gt_masks),
    ] {
        if let Some(p) = p {
            let _ = writeln!(s, "{key} {}", rel(p));
        }
    }
    for (i, f) in m.frames.iter().enumerate() {
        let _ = write!(s, "frame {i} depth={}", rel(&f.depth));
        for (key, p) in [
            ("flow", &f.flow),
            ("flow_back", &f.flow_back),
            ("mask", &f.mask),
            ("gt_depth", &f.gt_depth),
        ] {
            if let Some(p) = p {
                let _ = write!(s, " {key}={}", rel(p));
            }
        }
        s.push('\n');
    }
    s
}

/// Writes the manifest text. When `poses_file` is set, the manifest references
/// it and the poses are written there.
pub fn write_manifest(m: &SequenceManifest, poses_file: Option<&Path>) -> Result<()> {
    let mut text = format_manifest(m);
    if let (Some(rel), Some(poses)) = (poses_file, &m.poses) {
        write_poses(&m.base_dir().join(rel), poses)?;
        let _ = writeln!(text, "poses {}", rel.display());
    }
    write_bytes(&m.path, text.as_bytes())
}

/// Lazily reads frames in temporal order, holding one frame at a time.
pub struct FrameReader {
    manifest: SequenceManifest,
    masks: Option<Vec<Mask>>,
    next: usize,
}

impl FrameReader {
    pub fn new(manifest: SequenceManifest) -> Self {
        Self {
            manifest,
            masks: None,
            next: 0,
        }
    }

    /// Replaces per-frame masks (e.g. merged instance masks from a directory).
    pub fn with_masks(mut self, masks: Vec<Mask>) -> Self {
        self.masks = Some(masks);
        self
    }

    pub fn manifest(&self) -> &SequenceManifest {
        &self.manifest
    }

    fn load(&self, t: usize) -> Result<FrameBundle> {
        let m = &self.manifest;
        let entry = &m.frames[t];
        let dims = (m.width, m.height);
        let check = |d: (usize, usize), p: &Path| -> Result<()> {
            if d != dims {
                return Err(Error::DimensionMismatch(format!(
                    "{} is {}x{}, manifest says {}x{}",
                    p.display(),
                    d.0,
                    d.1,
                    dims.0,
                    dims.1
                )));
            }
            Ok(())
        };
        let depth = read_depth(&entry.depth)?;
        check(depth.dims(), &entry.depth)?;
        let flow_forward = match &entry.flow {
            Some(p) => {
                let f = read_flow(p)?;
                check(f.dims(), p)?;
                Some(f)
            }
            None => None,
        };
        let flow_backward = match &entry.flow_back {
            Some(p) => {
                let f = read_flow(p)?;
                check(f.dims(), p)?;
                Some(f)
            }
            None => None,
        };
        let mask = match (&self.masks, &entry.mask) {
            (Some(masks), _) => {
                let mk = masks.get(t).ok_or_else(|| {
                    Error::DimensionMismatch(format!("no mask supplied for frame {t}"))
                })?;
                if mk.dims() == dims {
                    mk.clone()
                } else {
                    mk.resample_nearest(dims.0, dims.1)
                }
            }
            (None, Some(p)) => {
                let mk = read_mask(p)?;
                if mk.dims() == dims {
                    mk
                } else {
                    mk.resample_nearest(dims.0, dims.1)
                }
            }
            (None, None) => Raster::filled(dims.0, dims.1, 1, 0),
        };
        Ok(FrameBundle {
            index: t,
            width: dims.0,
            height: dims.1,
            depth,
            flow_forward,
            flow_backward,
            mask,
        })
    }
}

impl Iterator for FrameReader {
    type Item = Result<FrameBundle>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.manifest.frame_count {
            return None;
        }
        let t = self.next;
        self.next += 1;
        Some(self.load(t))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.manifest.frame_count - self.next;
        (n, Some(n))
    }
}

/// Parses the manifest, checks that every referenced file exists, and returns
/// a lazy frame stream.
pub fn read_sequence(manifest_path: &Path) -> Result<(SequenceManifest, FrameReader)> {
    let text = read_text(manifest_path)?;
    let manifest = parse_manifest(&text, manifest_path)?;
    for f in &manifest.frames {
        for p in [Some(&f.depth), f.flow.as_ref(), f.flow_back.as_ref(), f.mask.as_ref()]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file missing"),
                ));
            }
        }
    }
    Ok((manifest.clone(), FrameReader::new(manifest)))
}

/// Reads every frame into memory.
pub fn read_all_frames(manifest_path: &Path, masks: Option<Vec<Mask>>) -> Result<(SequenceManifest, Vec<FrameBundle>)> {
    let (m, reader) = read_sequence(manifest_path)?;
    let reader = match masks {
        Some(mk) => reader.with_masks(mk),
        None => reader,
    };
    let frames = reader.collect::<Result<Vec<_>>>()?;
    Ok((m, frames))
}

/// Pipeline outputs to persist under one destination directory.
#[derive(Clone, Copy, Debug, Default)]
pub struct Outputs<'a> {
    pub poses: Option<&'a [PoseSE3]>,
    pub depths: Option<&'a [DepthMap]>,
    pub tracks: Option<&'a TrackSet>,
}

pub const POSES_FILE: &str = "poses.txt";
pub const TRACKS_FILE: &str = "tracks.txt";

pub fn depth_file_name(frame: usize) -> String {
    format!("depth_{frame:04}.rast")
}

/// Writes `poses.txt`, `depth/depth_NNNN.rast` and `tracks.txt` as present.
/// Everything is validated before the first byte is written.
pub fn write_outputs(outputs: &Outputs<'_>, destination: &Path) -> Result<()> {
    if let (Some(p), Some(d)) = (outputs.poses, outputs.depths) {
        if p.len() != d.len() {
            return Err(Error::Validation(format!(
                "{} poses but {} depth maps",
                p.len(),
                d.len()
            )));
        }
    }
    if let Some(poses) = outputs.poses {
        if poses.iter().any(|p| p.matrix().iter().any(|v| !v.is_finite())) {
            return Err(Error::Validation("pose contains non-finite values".into()));
        }
    }
    if let Some(depths) = outputs.depths {
        for (t, d) in depths.iter().enumerate() {
            if d.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("depth map {t} contains non-finite values")));
            }
        }
    }
    fs::create_dir_all(destination).map_err(|e| Error::io(destination, e))?;
    if let Some(poses) = outputs.poses {
        write_poses(&destination.join(POSES_FILE), poses)?;
    }
    if let Some(depths) = outputs.depths {
        for (t, d) in depths.iter().enumerate() {
            write_depth(&destination.join("depth").join(depth_file_name(t)), d)?;
        }
    }
    if let Some(tracks) = outputs.tracks {
        write_tracks(&destination.join(TRACKS_FILE), tracks)?;
    }
    Ok(())
}
