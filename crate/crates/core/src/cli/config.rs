//! Run configuration: a JSON file overridden by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::losses::{LossWeights, Term};
use crate::solver::SolverConfig;
use crate::types::CameraIntrinsics;

use super::CliError;

/// Intrinsics as `[f, cx, cy]` in normalized units, or the string `"default"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IntrinsicsSetting {
    Named(String),
    Values([f64; 3]),
}

impl Default for IntrinsicsSetting {
    fn default() -> Self {
        IntrinsicsSetting::Named("default".into())
    }
}

impl IntrinsicsSetting {
    pub fn resolve(&self) -> Result<CameraIntrinsics, CliError> {
        match self {
            IntrinsicsSetting::Named(n) if n == "default" => Ok(CameraIntrinsics::default()),
            IntrinsicsSetting::Named(n) => Err(CliError::Config(format!("unknown intrinsics `{n}`"))),
            IntrinsicsSetting::Values([f, cx, cy]) => {
                if !(*f > 0.0 && f.is_finite() && cx.is_finite() && cy.is_finite()) {
                    return Err(CliError::Config(format!("invalid intrinsics f={f}, cx={cx}, cy={cy}")));
                }
                Ok(CameraIntrinsics::new(*f, *cx, *cy))
            }
        }
    }

    /// Parses `f,cx,cy` or `default`.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        if text.trim() == "default" {
            return Ok(Self::default());
        }
        let values: Vec<f64> = text
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Config(format!("intrinsics `{text}`: {e}")))?;
        let values: [f64; 3] =
            values.try_into().map_err(|_| CliError::Config(format!("intrinsics `{text}`: expected f,cx,cy")))?;
        Ok(IntrinsicsSetting::Values(values))
    }
}

/// Everything `solve` needs, as read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub frame_t: Option<PathBuf>,
    pub frame_tp1: Option<PathBuf>,
    /// Synthetic scene to solve instead of image files.
    pub scene: Option<String>,
    pub intrinsics: IntrinsicsSetting,
    /// Focal length in pixels; overrides the normalized focal length.
    pub focal_px: Option<f64>,
    pub solver: SolverConfig,
    pub out: Option<PathBuf>,
    pub gt_depth: Option<PathBuf>,
    pub gt_depth_tp1: Option<PathBuf>,
    pub gt_pose: Option<PathBuf>,
    pub gt_flow: Option<PathBuf>,
    /// Depth units per count in 16-bit PNG depth files.
    pub depth_png_scale: Option<f64>,
}

impl RunConfig {
    /// Reads a JSON config; relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.frame_t,
            &mut cfg.frame_tp1,
            &mut cfg.out,
            &mut cfg.gt_depth,
            &mut cfg.gt_depth_tp1,
            &mut cfg.gt_pose,
            &mut cfg.gt_flow,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Intrinsics for frames of the given width.
    pub fn intrinsics(&self, width: usize) -> Result<CameraIntrinsics, CliError> {
        let mut k = self.intrinsics.resolve()?;
        if let Some(fp) = self.focal_px {
            if !(fp > 0.0 && fp.is_finite()) {
                return Err(CliError::Config(format!("focal length {fp} px must be positive")));
            }
            k = CameraIntrinsics::from_pixel_focal(fp, width, k.cx, k.cy);
        }
        Ok(k)
    }

    /// Checks that inputs are specified consistently and that referenced files exist.
    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.scene, &self.frame_t, &self.frame_tp1) {
            (Some(_), None, None) | (None, Some(_), Some(_)) => {}
            (Some(_), _, _) => return Err(CliError::Config("give either a scene or two frames, not both".into())),
            _ => return Err(CliError::Config("two frames (or a synthetic scene) are required".into())),
        }
        for p in [&self.frame_t, &self.frame_tp1, &self.gt_depth, &self.gt_depth_tp1, &self.gt_pose, &self.gt_flow]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                return Err(CliError::Config(format!("{}: no such file", p.display())));
            }
        }
        if self.out.is_none() {
            return Err(CliError::Config("an output directory (--out) is required".into()));
        }
        if let Some(s) = self.depth_png_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(CliError::Config(format!("depth PNG scale {s} must be positive")));
            }
        }
        self.intrinsics.resolve()?;
        self.solver.validate().map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Applies `key=value` weight overrides; keys are term names with or without a `w_` prefix.
pub fn apply_weights(weights: &mut LossWeights, pairs: &[String]) -> Result<(), CliError> {
    for pair in pairs {
        let (key, value) =
            pair.split_once('=').ok_or_else(|| CliError::Config(format!("weight `{pair}`: expected key=value")))?;
        let term = Term::from_name(key.trim()).ok_or_else(|| {
            let known: Vec<&str> = Term::ALL.iter().map(|t| t.name()).collect();
            CliError::Config(format!("unknown weight `{key}` (known: {})", known.join(", ")))
        })?;
        let v: f64 = value.trim().parse().map_err(|e| CliError::Config(format!("weight `{pair}`: {e}")))?;
        weights.set(term, v);
    }
    weights.validate().map_err(|e| CliError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intrinsics_forms() {
        assert_eq!(IntrinsicsSetting::parse("default").unwrap().resolve().unwrap(), CameraIntrinsics::default());
        let k = IntrinsicsSetting::parse("0.9, 0.5,0.4").unwrap().resolve().unwrap();
        assert_eq!((k.f, k.cx, k.cy), (0.9, 0.5, 0.4));
        assert!(IntrinsicsSetting::parse("1,2").is_err());
        assert!(IntrinsicsSetting::parse("-1,0.5,0.5").unwrap().resolve().is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"intrinsics": [0.8, 0.5, 0.5]}"#).unwrap();
        assert_eq!(cfg.intrinsics.resolve().unwrap().f, 0.8);
    }

    #[test]
    fn pixel_focal_helper() {
        let cfg = RunConfig { focal_px: Some(32.0), ..RunConfig::default() };
        assert_eq!(cfg.intrinsics(64).unwrap().f, 0.5);
    }

    #[test]
    fn weight_overrides() {
        let mut w = LossWeights::default();
        apply_weights(&mut w, &["w_fb=0.5".into(), "color=2".into()]).unwrap();
        assert_eq!((w.w_fb, w.w_color), (0.5, 2.0));
        assert!(apply_weights(&mut w, &["bogus=1".into()]).is_err());
        assert!(apply_weights(&mut w, &["fb=-1".into()]).is_err());
    }
}
