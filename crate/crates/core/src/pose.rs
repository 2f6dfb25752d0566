//! Pose keypoints (COCO-18 ordering) and their heatmap rendering.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::Raster;
use crate::Real;

pub const NUM_KEYPOINTS: usize = 18;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("failed to read pose file {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse pose file {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path}: expected {NUM_KEYPOINTS} keypoints, found {found}")]
    Count { path: String, found: usize },
    #[error("pose map sigma must be positive, got {0}")]
    BadSigma(f64),
}

/// One keypoint in continuous pixel coordinates (integer values are pixel
/// centers). `confidence == 0` marks an absent point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint {
    pub fn present(&self) -> bool {
        self.confidence > 0.0
    }
}

/// Fixed-length keypoint set in COCO-18 channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseKeypoints {
    pub points: [Keypoint; NUM_KEYPOINTS],
}

#[derive(Serialize, Deserialize)]
struct PoseFile {
    keypoints: Vec<[f64; 3]>,
}

impl PoseKeypoints {
    pub fn absent() -> Self {
        Self {
            points: [Keypoint {
                x: 0.0,
                y: 0.0,
                confidence: 0.0,
            }; NUM_KEYPOINTS],
        }
    }

    pub fn load(path: &Path) -> Result<Self, PoseError> {
        let text = std::fs::read_to_string(path).map_err(|source| PoseError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let file: PoseFile = serde_json::from_str(&text).map_err(|source| PoseError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        if file.keypoints.len() != NUM_KEYPOINTS {
            return Err(PoseError::Count {
                path: path.display().to_string(),
                found: file.keypoints.len(),
            });
        }
        let mut out = Self::absent();
        for (i, [x, y, c]) in file.keypoints.into_iter().enumerate() {
            out.points[i] = Keypoint {
                x,
                y,
                confidence: c,
            };
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), std::io::Error> {
        let file = PoseFile {
            keypoints: self
                .points
                .iter()
                .map(|p| [p.x, p.y, p.confidence])
                .collect(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file).expect("pose serializes"))
    }

}

/// Renders one Gaussian bump per keypoint channel.
///
/// Channel `k` holds `exp(-(d^2 - d_min^2) / (2 sigma^2))` where `d` is the
/// distance from the pixel to the keypoint and `d_min` the distance from the
/// nearest integer pixel, so the peak value is exactly 1 there. Channels of
/// absent keypoints are all zeros.
pub fn render_pose_map<T: Real>(
    kps: &PoseKeypoints,
    h: usize,
    w: usize,
    sigma: f64,
) -> Result<Raster<T>, PoseError> {
    if !(sigma > 0.0) {
        return Err(PoseError::BadSigma(sigma));
    }
    let mut out = Raster::zeros(NUM_KEYPOINTS, h, w);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (k, p) in kps.points.iter().enumerate() {
        if !p.present() {
            continue;
        }
        let nx = p.x.round().clamp(0.0, (w - 1) as f64);
        let ny = p.y.round().clamp(0.0, (h - 1) as f64);
        let d2_min = (nx - p.x).powi(2) + (ny - p.y).powi(2);
        for y in 0..h {
            let dy2 = (y as f64 - p.y).powi(2);
            for x in 0..w {
                let d2 = (x as f64 - p.x).powi(2) + dy2;
                out.set(k, y, x, T::from_f64_approx((-(d2 - d2_min) * inv).exp()));
            }
        }
    }
    Ok(out)
}
