//! Run configuration: defaults, `key value` config files and flag overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use dynrefine::ba::BaConfig;
use dynrefine::cvd::{CvdConfig, UncertaintyMode};
use dynrefine::track4d::TrackConfig;

use crate::UsageError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Masks drive every stage.
    Mask,
    /// No masks anywhere: unmasked BA, unit-initialized uncertainty, trail score.
    None,
    /// Masks for BA and tracks, free uncertainty in depth optimization.
    Free,
}

impl FromStr for MaskMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mask" => Ok(Self::Mask),
            "none" => Ok(Self::None),
            "free" => Ok(Self::Free),
            _ => Err(format!("unknown mask mode `{s}` (expected mask, none or free)")),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mask => "mask",
            Self::None => "none",
            Self::Free => "free",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub mask_mode: MaskMode,
    pub ba: BaConfig,
    pub cvd: CvdConfig,
    pub track: TrackConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            mask_mode: MaskMode::Mask,
            ba: BaConfig::default(),
            cvd: CvdConfig::default(),
            track: TrackConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, UsageError> {
    value
        .parse()
        .map_err(|_| UsageError(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, UsageError> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(UsageError(format!("invalid value `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    /// Applies one `key value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "mask_mode" => self.mask_mode = value.parse().map_err(UsageError)?,
            "ba.lambda_smooth" => self.ba.lambda_smooth = parse(key, value)?,
            "ba.window_steps" => self.ba.window_steps = parse(key, value)?,
            "ba.global_steps" => self.ba.global_steps = parse(key, value)?,
            "ba.pose_lr" => self.ba.pose_lr = parse(key, value)?,
            "ba.intrinsics_lr" => self.ba.intrinsics_lr = parse(key, value)?,
            "ba.depth_lr" => self.ba.depth_lr = parse(key, value)?,
            "ba.lr_floor" => self.ba.lr_floor = parse(key, value)?,
            "ba.optimize_intrinsics" => self.ba.optimize_intrinsics = parse_bool(key, value)?,
            "ba.grid" => self.ba.grid = parse(key, value)?,
            "cvd.lambda_flow" => self.cvd.lambda_flow = parse(key, value)?,
            "cvd.lambda_temp" => self.cvd.lambda_temp = parse(key, value)?,
            "cvd.lambda_prior" => self.cvd.lambda_prior = parse(key, value)?,
            "cvd.lambda_grad" => self.cvd.lambda_grad = parse(key, value)?,
            "cvd.lambda_normal" => self.cvd.lambda_normal = parse(key, value)?,
            "cvd.grad_scales" => self.cvd.grad_scales = parse(key, value)?,
            "cvd.steps" => self.cvd.steps = parse(key, value)?,
            "cvd.depth_lr" => self.cvd.depth_lr = parse(key, value)?,
            "cvd.lr_floor" => self.cvd.lr_floor = parse(key, value)?,
            "cvd.resolution" => self.cvd.resolution = parse_resolution(value)?,
            "cvd.upsample" => self.cvd.upsample = parse(key, value)?,
            "track.steps" => self.track.steps = parse(key, value)?,
            "track.lr" => self.track.lr = parse(key, value)?,
            "track.lr_floor" => self.track.lr_floor = parse(key, value)?,
            "track.lambda_reg" => self.track.lambda_reg = parse(key, value)?,
            "track.trail_window" => self.track.trail_window = parse(key, value)?,
            _ => return Err(UsageError(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, file: &Path) -> Result<(), UsageError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let value = parts.next().ok_or_else(|| {
                UsageError(format!("{}:{}: `{key}` has no value", file.display(), n + 1))
            })?;
            if parts.next().is_some() {
                return Err(UsageError(format!("{}:{}: trailing tokens after `{key}`", file.display(), n + 1)));
            }
            self.set(key, value)
                .map_err(|e| UsageError(format!("{}:{}: {}", file.display(), n + 1, e.0)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, path)
    }

    /// Updates the settings derived from the mask mode.
    pub fn resolve(&mut self) {
        self.ba.use_mask = self.mask_mode != MaskMode::None;
        self.cvd.uncertainty = match self.mask_mode {
            MaskMode::Mask => UncertaintyMode::Mask,
            MaskMode::None | MaskMode::Free => UncertaintyMode::Free,
        };
    }

    /// Every setting as `(key, value)`, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let res = match self.cvd.resolution {
            Some((w, h)) => format!("{w}x{h}"),
            None => "native".into(),
        };
        vec![
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("mask_mode", self.mask_mode.to_string()),
            ("ba.lambda_smooth", self.ba.lambda_smooth.to_string()),
            ("ba.window_steps", self.ba.window_steps.to_string()),
            ("ba.global_steps", self.ba.global_steps.to_string()),
            ("ba.pose_lr", self.ba.pose_lr.to_string()),
            ("ba.intrinsics_lr", self.ba.intrinsics_lr.to_string()),
            ("ba.depth_lr", self.ba.depth_lr.to_string()),
            ("ba.lr_floor", self.ba.lr_floor.to_string()),
            ("ba.optimize_intrinsics", self.ba.optimize_intrinsics.to_string()),
            ("ba.grid", self.ba.grid.to_string()),
            ("ba.use_mask", self.ba.use_mask.to_string()),
            ("cvd.lambda_flow", self.cvd.lambda_flow.to_string()),
            ("cvd.lambda_temp", self.cvd.lambda_temp.to_string()),
            ("cvd.lambda_prior", self.cvd.lambda_prior.to_string()),
            ("cvd.lambda_grad", self.cvd.lambda_grad.to_string()),
            ("cvd.lambda_normal", self.cvd.lambda_normal.to_string()),
            ("cvd.grad_scales", self.cvd.grad_scales.to_string()),
            ("cvd.steps", self.cvd.steps.to_string()),
            ("cvd.depth_lr", self.cvd.depth_lr.to_string()),
            ("cvd.lr_floor", self.cvd.lr_floor.to_string()),
            ("cvd.resolution", res),
            ("cvd.upsample", self.cvd.upsample.to_string()),
            (
                "cvd.uncertainty",
                match self.cvd.uncertainty {
                    UncertaintyMode::Mask => "mask",
                    UncertaintyMode::Free => "free",
                }
                .into(),
            ),
            ("track.steps", self.track.steps.to_string()),
            ("track.lr", self.track.lr.to_string()),
            ("track.lr_floor", self.track.lr_floor.to_string()),
            ("track.lambda_reg", self.track.lambda_reg.to_string()),
            ("track.trail_window", self.track.trail_window.to_string()),
        ]
    }
}

pub fn parse_resolution(value: &str) -> Result<Option<(usize, usize)>, UsageError> {
    if value == "native" {
        return Ok(None);
    }
    let bad = || UsageError(format!("invalid resolution `{value}` (expected WxH or native)"));
    let (w, h) = value.split_once('x').ok_or_else(bad)?;
    let w: usize = w.parse().map_err(|_| bad())?;
    let h: usize = h.parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok(Some((w, h)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        let err = c.apply_text("cvd.steps 10\nbogus 3\n", Path::new("c.txt")).unwrap_err();
        assert!(err.0.contains("bogus") && err.0.contains("c.txt:2"), "{}", err.0);
    }

    #[test]
    fn settings_apply_and_echo() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nba.global_steps 7\ncvd.resolution 16x12\nmask_mode free\n", Path::new("c"))
            .unwrap();
        assert_eq!(c.ba.global_steps, 7);
        assert_eq!(c.cvd.resolution, Some((16, 12)));
        assert_eq!(c.mask_mode, MaskMode::Free);
        let e = c.entries();
        assert!(e.contains(&("cvd.resolution", "16x12".to_string())));
        // every echoed key except derived ones can be fed back in
        let mut d = RunConfig::default();
        for (k, v) in &e {
            if *k != "ba.use_mask" && *k != "cvd.uncertainty" {
                d.set(k, v).unwrap();
            }
        }
        assert_eq!(c, d);
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("cvd.steps", "many").is_err());
        assert!(c.set("cvd.resolution", "12by4").is_err());
        assert!(c.set("mask_mode", "sometimes").is_err());
        assert!(c.set("ba.optimize_intrinsics", "yes").is_err());
    }
}
