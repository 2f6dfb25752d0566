//! Label palettes for human parse maps.
//!
//! A palette maps integer label ids (pixel values of the parse PNGs) to
//! semantic roles. The pipeline only relies on roles, never on raw label
//! values, so datasets with different labeling schemes interoperate as long
//! as they ship a palette.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{LabelMap, Raster};
use crate::Real;

#[derive(Debug, Error)]
pub enum PaletteError {
    #[error("failed to read palette {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse palette {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("palette label key {0:?} is not an integer in 0..=255")]
    BadLabel(String),
    #[error("palette must assign role {role} to exactly one label, found {count}")]
    RoleCount { role: Role, count: usize },
    #[error("palette is empty")]
    Empty,
    #[error("parse map contains label {label} not present in the palette")]
    UnknownLabel { label: u8 },
}

/// Semantic role of a parse label. The set is closed; palettes with other
/// role names are rejected at load time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Background,
    Hair,
    Face,
    Neck,
    UpperClothes,
    LowerClothes,
    Arms,
    Legs,
    /// Placeholder for regions erased when building the clothing-agnostic
    /// representation.
    Agnostic,
    Other,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_string(self).expect("role serializes");
        f.write_str(s.trim_matches('"'))
    }
}

/// Mapping from label ids to roles, validated so downstream code can rely on
/// exactly one `background` and exactly one `upper_clothes` label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    roles: BTreeMap<u8, Role>,
}

#[derive(Serialize, Deserialize)]
struct PaletteFile {
    labels: BTreeMap<String, Role>,
}

impl Palette {
    pub fn new(roles: BTreeMap<u8, Role>) -> Result<Self, PaletteError> {
        let p = Self { roles };
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, PaletteError> {
        let text = std::fs::read_to_string(path).map_err(|source| PaletteError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let file: PaletteFile =
            serde_json::from_str(&text).map_err(|source| PaletteError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        let mut roles = BTreeMap::new();
        for (key, role) in file.labels {
            let label: u8 = key
                .parse()
                .map_err(|_| PaletteError::BadLabel(key.clone()))?;
            roles.insert(label, role);
        }
        Self::new(roles)
    }

    pub fn save(&self, path: &Path) -> Result<(), std::io::Error> {
        let file = PaletteFile {
            labels: self
                .roles
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
        };
        let text = serde_json::to_string_pretty(&file).expect("palette serializes");
        std::fs::write(path, text)
    }

    fn validate(&self) -> Result<(), PaletteError> {
        if self.roles.is_empty() {
            return Err(PaletteError::Empty);
        }
        for role in [Role::Background, Role::UpperClothes] {
            let count = self.roles.values().filter(|&&r| r == role).count();
            if count != 1 {
                return Err(PaletteError::RoleCount { role, count });
            }
        }
        Ok(())
    }

    pub fn roles(&self) -> &BTreeMap<u8, Role> {
        &self.roles
    }

    pub fn num_labels(&self) -> usize {
        self.roles.len()
    }

    /// Labels sorted ascending; position in this order is the one-hot
    /// channel index of the label.
    pub fn sorted_labels(&self) -> Vec<u8> {
        self.roles.keys().copied().collect()
    }

    /// One-hot channel index of a label.
    pub fn channel_of(&self, label: u8) -> Option<usize> {
        self.roles.keys().position(|&l| l == label)
    }

    pub fn role_of(&self, label: u8) -> Option<Role> {
        self.roles.get(&label).copied()
    }

    /// The unique label with the given role, if any. Guaranteed to exist for
    /// `Background` and `UpperClothes`.
    pub fn label_of(&self, role: Role) -> Option<u8> {
        self.roles
            .iter()
            .find(|(_, &r)| r == role)
            .map(|(&l, _)| l)
    }

    /// All labels with the given role (roles other than background and
    /// upper_clothes may repeat).
    pub fn labels_of(&self, role: Role) -> Vec<u8> {
        self.roles
            .iter()
            .filter(|(_, &r)| r == role)
            .map(|(&l, _)| l)
            .collect()
    }

    pub fn background(&self) -> u8 {
        self.label_of(Role::Background).expect("validated palette")
    }

    pub fn upper_clothes(&self) -> u8 {
        self.label_of(Role::UpperClothes).expect("validated palette")
    }
}

/// A parse map together with its palette.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    pub labels: LabelMap,
    pub palette: Palette,
}

impl SegmentationMap {
    /// Fails if the map contains labels outside the palette.
    pub fn new(labels: LabelMap, palette: Palette) -> Result<Self, PaletteError> {
        if let Some(&bad) = labels
            .labels()
            .iter()
            .find(|l| !palette.roles.contains_key(l))
        {
            return Err(PaletteError::UnknownLabel { label: bad });
        }
        Ok(Self { labels, palette })
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    /// One-hot encoding with one channel per palette label, in ascending
    /// label order.
    pub fn to_one_hot<T: Real>(&self) -> Raster<T> {
        let (h, w) = (self.height(), self.width());
        let mut out = Raster::zeros(self.palette.num_labels(), h, w);
        // Labels were validated against the palette in the constructor.
        let mut channel_lut = [usize::MAX; 256];
        for (idx, label) in self.palette.sorted_labels().into_iter().enumerate() {
            channel_lut[label as usize] = idx;
        }
        for y in 0..h {
            for x in 0..w {
                let c = channel_lut[self.labels.get(y, x) as usize];
                out.set(c, y, x, T::one());
            }
        }
        out
    }

    /// Per-pixel one-hot channel indices (class ids for cross-entropy).
    pub fn to_class_indices(&self) -> Vec<usize> {
        let mut channel_lut = [usize::MAX; 256];
        for (idx, label) in self.palette.sorted_labels().into_iter().enumerate() {
            channel_lut[label as usize] = idx;
        }
        self.labels
            .labels()
            .iter()
            .map(|&l| channel_lut[l as usize])
            .collect()
    }

    /// Binary mask of all pixels whose label has the given role.
    pub fn role_mask<T: Real>(&self, role: Role) -> Raster<T> {
        let targets = self.palette.labels_of(role);
        let (h, w) = (self.height(), self.width());
        let mut out = Raster::zeros(1, h, w);
        for y in 0..h {
            for x in 0..w {
                if targets.contains(&self.labels.get(y, x)) {
                    out.set(0, y, x, T::one());
                }
            }
        }
        out
    }
}

#[cfg(test)]
pub(crate) fn test_palette() -> Palette {
    let mut roles = BTreeMap::new();
    roles.insert(0, Role::Background);
    roles.insert(1, Role::Hair);
    roles.insert(2, Role::Face);
    roles.insert(3, Role::Neck);
    roles.insert(4, Role::UpperClothes);
    roles.insert(5, Role::LowerClothes);
    roles.insert(6, Role::Arms);
    roles.insert(7, Role::Legs);
    roles.insert(8, Role::Agnostic);
    Palette::new(roles).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_upper_clothes() {
        let mut roles = BTreeMap::new();
        roles.insert(0, Role::Background);
        roles.insert(1, Role::UpperClothes);
        roles.insert(2, Role::UpperClothes);
        let err = Palette::new(roles).unwrap_err();
        assert!(matches!(
            err,
            PaletteError::RoleCount {
                role: Role::UpperClothes,
                count: 2
            }
        ));
    }

    #[test]
    fn rejects_missing_background() {
        let mut roles = BTreeMap::new();
        roles.insert(1, Role::UpperClothes);
        roles.insert(2, Role::Hair);
        assert!(matches!(
            Palette::new(roles).unwrap_err(),
            PaletteError::RoleCount {
                role: Role::Background,
                count: 0
            }
        ));
    }

    #[test]
    fn rejects_unknown_role_name() {
        let json = r#"{"labels": {"0": "background", "4": "upper_clothes", "9": "torso"}}"#;
        let parsed: Result<PaletteFile, _> = serde_json::from_str(json);
        assert!(parsed.is_err());
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = test_palette();
        let path = dir.path().join("palette.json");
        p.save(&path).unwrap();
        assert_eq!(Palette::load(&path).unwrap(), p);
    }

    #[test]
    fn one_hot_puts_each_pixel_in_exactly_one_channel() {
        let p = test_palette();
        let mut lm = LabelMap::new(4, 4, 0);
        lm.set(1, 1, 4);
        lm.set(2, 3, 8);
        let seg = SegmentationMap::new(lm, p.clone()).unwrap();
        let oh: Raster<f32> = seg.to_one_hot();
        assert_eq!(oh.channels(), p.num_labels());
        for y in 0..4 {
            for x in 0..4 {
                let total: f32 = (0..oh.channels()).map(|c| oh.get(c, y, x)).sum();
                assert_eq!(total, 1.0);
            }
        }
        assert_eq!(oh.get(p.channel_of(4).unwrap(), 1, 1), 1.0);
        assert_eq!(oh.get(p.channel_of(8).unwrap(), 2, 3), 1.0);
    }

    #[test]
    fn segmentation_map_rejects_foreign_labels() {
        let p = test_palette();
        let lm = LabelMap::new(2, 2, 77);
        assert!(matches!(
            SegmentationMap::new(lm, p).unwrap_err(),
            PaletteError::UnknownLabel { label: 77 }
        ));
    }
}
