//! Clothing-agnostic person representations: erase all garment evidence
//! (clothes pixels plus regions the new garment must re-synthesize) from the
//! person image and parse map, leaving a representation from which the
//! original garment cannot be recovered.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::dataset::Sample;
use crate::palette::{Role, SegmentationMap};
use crate::raster::Raster;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum AgnosticError {
    #[error("erase role {0} has no label in the palette")]
    MissingRole(Role),
    #[error("palette has no label with role agnostic to relabel erased pixels")]
    MissingAgnosticLabel,
    #[error("dilation of {dilation} px exceeds the limit min(H, W)/4 = {limit} for a {h}x{w} image")]
    DilationTooLarge {
        dilation: usize,
        limit: usize,
        h: usize,
        w: usize,
    },
    #[error("fill value {0} is outside [0, 1]")]
    BadFill(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgnosticConfig {
    /// Roles whose pixels are erased (with dilation) from image and parse.
    pub erase_roles: BTreeSet<Role>,
    /// Radius of the square structuring element: a set pixel marks all
    /// pixels within Chebyshev distance `dilation_px` for erasure.
    pub dilation_px: usize,
    /// Gray level written into erased image pixels.
    pub fill_value: f64,
}

impl Default for AgnosticConfig {
    fn default() -> Self {
        Self {
            erase_roles: [Role::UpperClothes, Role::Arms, Role::Neck].into_iter().collect(),
            dilation_px: 8,
            fill_value: 0.5,
        }
    }
}

/// Binary dilation with a `(2r+1) x (2r+1)` square structuring element,
/// computed separably (horizontal then vertical max filter).
fn dilate_square(mask: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    if r == 0 {
        return mask.to_vec();
    }
    let mut horiz = vec![false; h * w];
    for y in 0..h {
        let row = &mask[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            horiz[y * w + x] = row[lo..=hi].iter().any(|&b| b);
        }
    }
    let mut out = vec![false; h * w];
    for x in 0..w {
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            out[y * w + x] = (lo..=hi).any(|yy| horiz[yy * w + x]);
        }
    }
    out
}

/// Builds the clothing-agnostic image and parse map.
///
/// The erased set is the union of all pixels whose role is in
/// `cfg.erase_roles`, dilated by `cfg.dilation_px`, minus pixels whose
/// original role is `face` or `hair` (identity evidence is never erased).
/// Erased image pixels become `fill_value`; erased parse pixels take the
/// palette's `agnostic` label. Applying the operation twice is a no-op
/// because the agnostic label is not an erase role.
pub fn build_agnostic(
    sample: &Sample,
    cfg: &AgnosticConfig,
) -> Result<(Raster<Scalar>, SegmentationMap), AgnosticError> {
    let parse = &sample.parse;
    let palette = &parse.palette;
    let (h, w) = (parse.height(), parse.width());

    if !(0.0..=1.0).contains(&cfg.fill_value) {
        return Err(AgnosticError::BadFill(cfg.fill_value));
    }
    let limit = h.min(w) / 4;
    if cfg.dilation_px > limit {
        return Err(AgnosticError::DilationTooLarge {
            dilation: cfg.dilation_px,
            limit,
            h,
            w,
        });
    }
    for &role in &cfg.erase_roles {
        if palette.labels_of(role).is_empty() {
            return Err(AgnosticError::MissingRole(role));
        }
    }
    let agnostic_label = palette
        .label_of(Role::Agnostic)
        .ok_or(AgnosticError::MissingAgnosticLabel)?;

    let mut erase = vec![false; h * w];
    let mut protected = vec![false; h * w];
    for (i, &label) in parse.labels.labels().iter().enumerate() {
        match palette.role_of(label) {
            Some(role) if cfg.erase_roles.contains(&role) => erase[i] = true,
            Some(Role::Face) | Some(Role::Hair) => protected[i] = true,
            _ => {}
        }
    }
    let mut erase = dilate_square(&erase, h, w, cfg.dilation_px);
    for (e, &p) in erase.iter_mut().zip(&protected) {
        if p {
            *e = false;
        }
    }

    let mut image = sample.person_image.clone();
    let fill = cfg.fill_value as Scalar;
    for c in 0..image.channels() {
        for y in 0..h {
            for x in 0..w {
                if erase[y * w + x] {
                    image.set(c, y, x, fill);
                }
            }
        }
    }

    let mut labels = parse.labels.clone();
    for (i, l) in labels.labels_mut().iter_mut().enumerate() {
        if erase[i] {
            *l = agnostic_label;
        }
    }
    let parse_out = SegmentationMap::new(labels, palette.clone())
        .expect("agnostic label is a palette label");
    Ok((image, parse_out))
}
