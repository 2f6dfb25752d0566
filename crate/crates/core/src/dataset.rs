//! Dataset directory layout, pair lists, and per-sample loading.
//!
//! Layout under a dataset root:
//!
//! ```text
//! root/
//!   palette.json                      label id -> semantic role
//!   <split>_pairs_<mode>.txt          lines "person_id cloth_id"
//!   <split>/
//!     image/<id>.png                  RGB person image
//!     cloth/<id>.png                  RGB garment product image
//!     cloth-mask/<id>.png             grayscale garment mask
//!     image-parse/<id>.png            grayscale label map (palette ids)
//!     pose/<id>.json                  18 keypoint triples [x, y, confidence]
//! ```
//!
//! All loaders are pure and read-only; they can run from any number of
//! threads concurrently.

use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::palette::{Palette, PaletteError, SegmentationMap};
use crate::pose::{PoseError, PoseKeypoints};
use crate::raster::{LabelMap, Raster, RasterError};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset layout error: missing {0}")]
    Layout(PathBuf),
    #[error("pairs file {path} line {line}: expected \"person_id cloth_id\", got {got:?}")]
    BadPairLine {
        path: PathBuf,
        line: usize,
        got: String,
    },
    #[error("pairs file {path} line {line}: pair {person} {cloth} violates paired mode (ids must match)")]
    ModeViolation {
        path: PathBuf,
        line: usize,
        person: String,
        cloth: String,
    },
    #[error("pairs file {path} is marked unpaired but every pair is an identity pair")]
    NotUnpaired { path: PathBuf },
    #[error("pairs file {path} is empty")]
    EmptyPairs { path: PathBuf },
    #[error("id {id} referenced by the pairs file has no file {path}")]
    DanglingId { id: String, path: PathBuf },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Palette(#[from] PaletteError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error("sample {id}: {what} is {got_h}x{got_w} but person image is {h}x{w}")]
    SizeMismatch {
        id: String,
        what: &'static str,
        got_h: usize,
        got_w: usize,
        h: usize,
        w: usize,
    },
    #[error("sample {id}: cloth mask contains value {value:.4} (not 0 or 1); enable binarization or fix the mask")]
    NonBinaryMask { id: String, value: f64 },
    #[error("sample {id}: keypoint {index} at ({x}, {y}) lies outside the {h}x{w} image")]
    KeypointOutOfBounds {
        id: String,
        index: usize,
        x: f64,
        y: f64,
        h: usize,
        w: usize,
    },
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}, expected train or test")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    Paired,
    Unpaired,
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairMode::Paired => "paired",
            PairMode::Unpaired => "unpaired",
        })
    }
}

impl std::str::FromStr for PairMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paired" => Ok(PairMode::Paired),
            "unpaired" => Ok(PairMode::Unpaired),
            other => Err(format!(
                "unknown pair mode {other:?}, expected paired or unpaired"
            )),
        }
    }
}

/// Ordered list of (person_id, cloth_id) pairs, validated for its mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairList {
    pub entries: Vec<(String, String)>,
    pub mode: PairMode,
}

/// The five per-sample files of an id pair.
fn sample_paths(root: &Path, split: Split, person_id: &str, cloth_id: &str) -> [(String, PathBuf); 5] {
    let base = root.join(split.to_string());
    [
        (person_id.to_string(), base.join("image").join(format!("{person_id}.png"))),
        (person_id.to_string(), base.join("image-parse").join(format!("{person_id}.png"))),
        (person_id.to_string(), base.join("pose").join(format!("{person_id}.json"))),
        (cloth_id.to_string(), base.join("cloth").join(format!("{cloth_id}.png"))),
        (cloth_id.to_string(), base.join("cloth-mask").join(format!("{cloth_id}.png"))),
    ]
}

pub fn pairs_path(root: &Path, split: Split, mode: PairMode) -> PathBuf {
    root.join(format!("{split}_pairs_{mode}.txt"))
}

/// Loads and validates the pair list for a split/mode: directory layout must
/// exist, every line must be two whitespace-separated ids, paired mode must
/// hold identity pairs only, and every referenced id must resolve to files
/// on disk. Order of the file is preserved.
pub fn load_dataset_index(root: &Path, split: Split, mode: PairMode) -> Result<PairList, DatasetError> {
    for dir in ["image", "cloth", "cloth-mask", "image-parse", "pose"] {
        let p = root.join(split.to_string()).join(dir);
        if !p.is_dir() {
            return Err(DatasetError::Layout(p));
        }
    }
    let palette_path = root.join("palette.json");
    if !palette_path.is_file() {
        return Err(DatasetError::Layout(palette_path));
    }
    let path = pairs_path(root, split, mode);
    if !path.is_file() {
        return Err(DatasetError::Layout(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|source| DatasetError::Io {
        path: path.clone(),
        source,
    })?;

    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let (person, cloth) = match (tokens.next(), tokens.next(), tokens.next()) {
            (Some(p), Some(c), None) => (p.to_string(), c.to_string()),
            _ => {
                return Err(DatasetError::BadPairLine {
                    path: path.clone(),
                    line: lineno + 1,
                    got: line.to_string(),
                })
            }
        };
        if mode == PairMode::Paired && person != cloth {
            return Err(DatasetError::ModeViolation {
                path: path.clone(),
                line: lineno + 1,
                person,
                cloth,
            });
        }
        entries.push((person, cloth));
    }
    if entries.is_empty() {
        return Err(DatasetError::EmptyPairs { path });
    }
    if mode == PairMode::Unpaired && entries.iter().all(|(p, c)| p == c) {
        return Err(DatasetError::NotUnpaired { path });
    }

    for (person, cloth) in &entries {
        for (id, file) in sample_paths(root, split, person, cloth) {
            if !file.is_file() {
                return Err(DatasetError::DanglingId { id, path: file });
            }
        }
    }

    Ok(PairList { entries, mode })
}

/// One fully loaded dataset record. `cloth_image`/`cloth_mask` come from
/// `cloth_id`, everything else from `person_id`; the two differ in unpaired
/// evaluation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub sample_id: String,
    pub person_image: Raster<Scalar>,
    pub cloth_image: Raster<Scalar>,
    pub cloth_mask: Raster<Scalar>,
    pub parse: SegmentationMap,
    pub keypoints: PoseKeypoints,
}

/// Loading options. `binarize_cloth_mask` (default on) thresholds the mask
/// at 0.5; with it off, any mask value other than exactly 0 or 1 is an error.
#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub binarize_cloth_mask: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            binarize_cloth_mask: true,
        }
    }
}

pub fn load_sample(
    root: &Path,
    split: Split,
    person_id: &str,
    cloth_id: &str,
    opts: &LoadOptions,
) -> Result<Sample, DatasetError> {
    let palette = Palette::load(&root.join("palette.json"))?;
    load_sample_with_palette(root, split, person_id, cloth_id, palette, opts)
}

/// Like [`load_sample`] but reuses an already loaded palette (the palette is
/// per-dataset, not per-sample).
pub fn load_sample_with_palette(
    root: &Path,
    split: Split,
    person_id: &str,
    cloth_id: &str,
    palette: Palette,
    opts: &LoadOptions,
) -> Result<Sample, DatasetError> {
    let base = root.join(split.to_string());
    let person_image = Raster::load_png_rgb(&base.join("image").join(format!("{person_id}.png")))?;
    let (h, w) = (person_image.height(), person_image.width());

    let cloth_image = Raster::load_png_rgb(&base.join("cloth").join(format!("{cloth_id}.png")))?;
    let mut cloth_mask =
        Raster::load_png_gray(&base.join("cloth-mask").join(format!("{cloth_id}.png")))?;
    let labels = LabelMap::load_png(&base.join("image-parse").join(format!("{person_id}.png")))?;
    let keypoints = PoseKeypoints::load(&base.join("pose").join(format!("{person_id}.json")))?;

    let id = format!("{person_id}/{cloth_id}");
    for (what, got_h, got_w) in [
        ("cloth image", cloth_image.height(), cloth_image.width()),
        ("cloth mask", cloth_mask.height(), cloth_mask.width()),
        ("parse map", labels.height(), labels.width()),
    ] {
        if (got_h, got_w) != (h, w) {
            return Err(DatasetError::SizeMismatch {
                id: id.clone(),
                what,
                got_h,
                got_w,
                h,
                w,
            });
        }
    }

    if opts.binarize_cloth_mask {
        for v in cloth_mask.data_mut() {
            *v = if *v >= 0.5 { 1.0 } else { 0.0 };
        }
    } else if let Some(&bad) = cloth_mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(DatasetError::NonBinaryMask {
            id: id.clone(),
            value: bad as f64,
        });
    }

    for (index, p) in keypoints.points.iter().enumerate() {
        if p.present() && !(p.x >= 0.0 && p.x < w as f64 && p.y >= 0.0 && p.y < h as f64) {
            return Err(DatasetError::KeypointOutOfBounds {
                id: id.clone(),
                index,
                x: p.x,
                y: p.y,
                h,
                w,
            });
        }
    }

    let parse = SegmentationMap::new(labels, palette)?;
    Ok(Sample {
        sample_id: id,
        person_image,
        cloth_image,
        cloth_mask,
        parse,
        keypoints,
    })
}

/// Writes a sample's five files into an existing layout, creating the split
/// subdirectories if needed. Person-side files are written under
/// `person_id`, cloth-side under `cloth_id`.
pub fn save_sample(
    root: &Path,
    split: Split,
    person_id: &str,
    cloth_id: &str,
    sample: &Sample,
) -> Result<(), DatasetError> {
    let base = root.join(split.to_string());
    for dir in ["image", "cloth", "cloth-mask", "image-parse", "pose"] {
        let p = base.join(dir);
        std::fs::create_dir_all(&p).map_err(|source| DatasetError::Io { path: p, source })?;
    }
    sample
        .person_image
        .save_png_rgb(&base.join("image").join(format!("{person_id}.png")))?;
    sample
        .cloth_image
        .save_png_rgb(&base.join("cloth").join(format!("{cloth_id}.png")))?;
    sample
        .cloth_mask
        .save_png_gray(&base.join("cloth-mask").join(format!("{cloth_id}.png")))?;
    sample
        .parse
        .labels
        .save_png(&base.join("image-parse").join(format!("{person_id}.png")))?;
    let pose_path = base.join("pose").join(format!("{person_id}.json"));
    sample
        .keypoints
        .save(&pose_path)
        .map_err(|source| DatasetError::Io {
            path: pose_path,
            source,
        })?;
    Ok(())
}
