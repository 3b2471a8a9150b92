//! Depth datasets: sample type, file ingestion, normalisation, augmentation,
//! manifests and a procedural scene generator.

mod augment;
pub mod io;
mod manifest;
mod synth;

use std::path::Path;

pub use augment::{augment, crop, flip_horizontal, resize_bilinear, resize_nearest, resize_sample};
pub use manifest::{make_manifest, make_manifest_from_pairs, DatasetManifest, Split};
pub use synth::{synth_scene, synth_scene_with_objects, SceneObject};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default synthetic scene depth range in metres.
pub const DEFAULT_D_MIN: f64 = 0.5;
pub const DEFAULT_D_MAX: f64 = 10.0;

/// Sidecar file holding `scale=<float>` for 16-bit depth PNGs in a directory.
pub const DEPTH_SCALE_FILE: &str = "depth_scale.txt";

/// An aligned RGB image (`[3, H, W]`, values in `[0, 1]`) and metric depth map
/// (`[1, H, W]`, metres).
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSample {
    pub rgb: Tensor,
    pub depth: Tensor,
    pub d_min: f64,
    pub d_max: f64,
}

impl DepthSample {
    pub fn new(rgb: Tensor, depth: Tensor, d_min: f64, d_max: f64) -> Result<Self> {
        let s = Self { rgb, depth, d_min, d_max };
        s.validate()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }

    /// Checks alignment, positivity and the declared depth range.
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.rgb.dims3()?;
        let (dc, dh, dw) = self.depth.dims3()?;
        if c != 3 || dc != 1 || h != dh || w != dw {
            return Err(Error::Alignment {
                rgb: self.rgb.shape().to_vec(),
                depth: self.depth.shape().to_vec(),
            });
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min) {
            return Err(Error::invalid(format!(
                "depth range [{}, {}] must satisfy 0 < d_min < d_max",
                self.d_min, self.d_max
            )));
        }
        if let Some(d) = self.depth.data().iter().find(|&&d| d < self.d_min || d > self.d_max) {
            return Err(Error::invalid(format!(
                "depth {d} outside declared range [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }
}

/// How a depth file is encoded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DepthFormat {
    Pfm,
    /// 16-bit grayscale PNG; metres = value × scale.
    Png16 { scale: f64 },
}

impl DepthFormat {
    /// Chooses the format from the file extension, reading the directory's
    /// scale sidecar for PNG depth.
    pub fn detect(depth_path: &Path) -> Result<Self> {
        match depth_path.extension().and_then(|e| e.to_str()) {
            Some("pfm") => Ok(DepthFormat::Pfm),
            Some("png") => {
                let dir = depth_path.parent().unwrap_or(Path::new("."));
                Ok(DepthFormat::Png16 { scale: read_depth_scale(dir)? })
            }
            _ => Err(Error::Format {
                path: depth_path.to_path_buf(),
                message: "depth must be .pfm or .png".into(),
            }),
        }
    }
}

/// Parses `scale=<float>` from the sidecar in `dir`.
pub fn read_depth_scale(dir: &Path) -> Result<f64> {
    let path = dir.join(DEPTH_SCALE_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter_map(|l| l.trim().strip_prefix("scale="))
        .next()
        .and_then(|v| v.trim().parse::<f64>().ok())
        .filter(|s| *s > 0.0)
        .ok_or_else(|| Error::Format {
            path: path.clone(),
            message: "expected a line `scale=<positive float>`".into(),
        })
}

/// Loads an RGB/depth pair. The returned sample's range is the observed depth
/// extent of the map; positive depths are required.
pub fn load_pair(rgb_path: &Path, depth_path: &Path, format: DepthFormat) -> Result<DepthSample> {
    let rgb = io::read_png_rgb(rgb_path)?;
    let depth = match format {
        DepthFormat::Pfm => io::read_pfm(depth_path)?,
        DepthFormat::Png16 { scale } => {
            let (h, w, vals) = io::read_png16(depth_path)?;
            Tensor::new(&[1, h, w], vals.iter().map(|&v| v as f64 * scale).collect())?
        }
    };
    if depth.shape()[0] != 1 {
        return Err(Error::Format {
            path: depth_path.to_path_buf(),
            message: "depth map must be single-channel".into(),
        });
    }
    if rgb.shape()[1..] != depth.shape()[1..] {
        return Err(Error::Alignment {
            rgb: rgb.shape().to_vec(),
            depth: depth.shape().to_vec(),
        });
    }
    if let Some(d) = depth.data().iter().find(|&&d| d <= 0.0) {
        return Err(Error::Format {
            path: depth_path.to_path_buf(),
            message: format!("non-positive depth {d}"),
        });
    }
    let (lo, hi) = depth
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    let hi = if hi > lo { hi } else { lo * (1.0 + 1e-9) + 1e-12 };
    DepthSample::new(rgb, depth, lo, hi)
}

/// Network-space tensors for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedPair {
    pub rgb: Tensor,
    pub depth: Tensor,
    /// Depth values that fell outside `[d_min, d_max]` and were clamped.
    pub clamped: usize,
}

/// Maps rgb `[0, 1] → [−1, 1]` and depth `[d_min, d_max] → [−1, 1]` linearly.
pub fn normalize_input(sample: &DepthSample, d_min: f64, d_max: f64) -> Result<NormalizedPair> {
    if !(d_max > d_min) {
        return Err(Error::invalid(format!("d_max ({d_max}) must exceed d_min ({d_min})")));
    }
    let rgb = sample.rgb.map(|v| 2.0 * v - 1.0);
    let mut clamped = 0;
    let span = d_max - d_min;
    let depth = Tensor::new(
        sample.depth.shape(),
        sample
            .depth
            .data()
            .iter()
            .map(|&d| {
                let c = d.clamp(d_min, d_max);
                if c != d {
                    clamped += 1;
                }
                2.0 * (c - d_min) / span - 1.0
            })
            .collect(),
    )?;
    if clamped > 0 {
        log::warn!("clamped {clamped} depth values into [{d_min}, {d_max}]");
    }
    Ok(NormalizedPair { rgb, depth, clamped })
}

/// Inverse of the depth half of [`normalize_input`].
pub fn denormalize_depth(t: &Tensor, d_min: f64, d_max: f64) -> Tensor {
    t.map(|v| d_min + (v + 1.0) * 0.5 * (d_max - d_min))
}
