//! Deterministic synthetic try-on corpus for tests and end-to-end smoke
//! runs: stick figures wearing gradient-colored tops, plus matching
//! product-style cloth images on a white background.
//!
//! Every sample is drawn from its own seeded generator so corpora are
//! byte-identical across runs and machines. The person wears the garment at
//! a per-sample placement (shift, scale, bottom flare) while the cloth
//! image shows it centered at a fixed canonical size, so the deformation
//! stage has a real, learnable warp between the two.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::dataset::{pairs_path, save_sample, DatasetError, PairMode, Sample, Split};
use crate::derive_seed;
use crate::palette::{Palette, PaletteError, Role, SegmentationMap};
use crate::pose::{Keypoint, PoseKeypoints};
use crate::raster::{LabelMap, Raster};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid toy config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Palette(#[from] PaletteError),
    #[error("writing {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_train: 16,
            n_test: 8,
            height: 64,
            width: 48,
            seed: 7,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        if self.n_train == 0 {
            return Err(ToyError::BadConfig("n_train must be >= 1".into()));
        }
        if self.n_test < 2 {
            return Err(ToyError::BadConfig(
                "n_test must be >= 2 (unpaired lists rotate cloth ids)".into(),
            ));
        }
        if self.height < 32 || self.width < 24 {
            return Err(ToyError::BadConfig(format!(
                "figure geometry needs at least 32x24 pixels, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Labels 0..=7 covering every role the pipeline touches, including the
/// agnostic label the person-representation builder relabels into.
pub fn toy_palette() -> Palette {
    let mut roles = BTreeMap::new();
    roles.insert(0u8, Role::Background);
    roles.insert(1, Role::Hair);
    roles.insert(2, Role::Face);
    roles.insert(3, Role::Neck);
    roles.insert(4, Role::UpperClothes);
    roles.insert(5, Role::Arms);
    roles.insert(6, Role::LowerClothes);
    roles.insert(7, Role::Agnostic);
    Palette::new(roles).expect("toy palette is valid by construction")
}

struct Figure {
    cx: f64,
    torso_top: f64,
    torso_bottom: f64,
    torso_half_top: f64,
    flare: f64,
    head_cy: f64,
    head_r: f64,
    neck_half: f64,
    arm_w: f64,
    arm_bottom: f64,
    leg_half: f64,
    leg_gap: f64,
    leg_bottom: f64,
    background: [f64; 3],
    skin: [f64; 3],
    hair: [f64; 3],
    pants: [f64; 3],
    top_color: [f64; 3],
    bottom_color: [f64; 3],
}

fn sample_figure(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Figure {
    let hf = h as f64;
    let wf = w as f64;
    let cx = wf * (0.5 + rng.gen_range(-0.06..0.06));
    let torso_scale = rng.gen_range(0.85..1.1);
    let torso_top = hf * (0.28 + rng.gen_range(-0.02..0.02));
    let torso_bottom = hf * (0.58 + rng.gen_range(-0.02..0.02));
    let head_r = 0.085 * hf;
    let jitter = |rng: &mut ChaCha8Rng, base: [f64; 3], amp: f64| {
        [
            (base[0] + rng.gen_range(-amp..amp)).clamp(0.0, 1.0),
            (base[1] + rng.gen_range(-amp..amp)).clamp(0.0, 1.0),
            (base[2] + rng.gen_range(-amp..amp)).clamp(0.0, 1.0),
        ]
    };
    Figure {
        cx,
        torso_top,
        torso_bottom,
        torso_half_top: 0.21 * wf * torso_scale,
        flare: rng.gen_range(0.0..0.25),
        head_cy: torso_top - head_r - 0.045 * hf,
        head_r,
        neck_half: 0.045 * wf,
        arm_w: 0.07 * wf,
        arm_bottom: torso_bottom - 0.04 * hf,
        leg_half: 0.08 * wf,
        leg_gap: 0.02 * wf,
        leg_bottom: 0.92 * hf,
        background: jitter(rng, [0.82, 0.82, 0.84], 0.05),
        skin: jitter(rng, [0.87, 0.72, 0.60], 0.04),
        hair: [
            rng.gen_range(0.10..0.35),
            rng.gen_range(0.05..0.25),
            rng.gen_range(0.02..0.20),
        ],
        pants: jitter(rng, [0.25, 0.28, 0.40], 0.08),
        top_color: [
            rng.gen_range(0.15..0.95),
            rng.gen_range(0.15..0.95),
            rng.gen_range(0.15..0.95),
        ],
        bottom_color: [
            rng.gen_range(0.15..0.95),
            rng.gen_range(0.15..0.95),
            rng.gen_range(0.15..0.95),
        ],
    }
}

fn put(img: &mut Raster<Scalar>, labels: &mut LabelMap, y: usize, x: usize, color: [f64; 3], label: u8) {
    for c in 0..3 {
        img.set(c, y, x, color[c] as Scalar);
    }
    labels.set(y, x, label);
}

fn fill_rect(
    img: &mut Raster<Scalar>,
    labels: &mut LabelMap,
    y0: f64,
    y1: f64,
    x0: f64,
    x1: f64,
    color: [f64; 3],
    label: u8,
) {
    let h = img.height();
    let w = img.width();
    let ys = (y0.round().max(0.0) as usize).min(h);
    let ye = (y1.round().max(0.0) as usize).min(h);
    let xs = (x0.round().max(0.0) as usize).min(w);
    let xe = (x1.round().max(0.0) as usize).min(w);
    for y in ys..ye {
        for x in xs..xe {
            put(img, labels, y, x, color, label);
        }
    }
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn render_person(h: usize, w: usize, f: &Figure) -> (Raster<Scalar>, LabelMap) {
    let mut img = Raster::zeros(3, h, w);
    let mut labels = LabelMap::new(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            put(&mut img, &mut labels, y, x, f.background, 0);
        }
    }
    // Legs (drawn as pants), then arms, then the torso garment over both.
    let left_leg_x0 = f.cx - f.leg_gap / 2.0 - 2.0 * f.leg_half;
    fill_rect(
        &mut img, &mut labels,
        f.torso_bottom, f.leg_bottom,
        left_leg_x0, f.cx - f.leg_gap / 2.0,
        f.pants, 6,
    );
    fill_rect(
        &mut img, &mut labels,
        f.torso_bottom, f.leg_bottom,
        f.cx + f.leg_gap / 2.0, f.cx + f.leg_gap / 2.0 + 2.0 * f.leg_half,
        f.pants, 6,
    );
    let arm_top = f.torso_top + 0.01 * h as f64;
    fill_rect(
        &mut img, &mut labels,
        arm_top, f.arm_bottom,
        f.cx - f.torso_half_top - f.arm_w, f.cx - f.torso_half_top,
        f.skin, 5,
    );
    fill_rect(
        &mut img, &mut labels,
        arm_top, f.arm_bottom,
        f.cx + f.torso_half_top, f.cx + f.torso_half_top + f.arm_w,
        f.skin, 5,
    );
    // Torso garment: trapezoid with a vertical color gradient.
    let ys = f.torso_top.round().max(0.0) as usize;
    let ye = (f.torso_bottom.round() as usize).min(h);
    for y in ys..ye {
        let t = (y as f64 - f.torso_top) / (f.torso_bottom - f.torso_top).max(1.0);
        let half = f.torso_half_top * (1.0 + f.flare * t);
        let color = lerp3(f.top_color, f.bottom_color, t.clamp(0.0, 1.0));
        let xs = ((f.cx - half).round().max(0.0) as usize).min(w);
        let xe = ((f.cx + half).round().max(0.0) as usize).min(w);
        for x in xs..xe {
            put(&mut img, &mut labels, y, x, color, 4);
        }
    }
    // Neck, then head: face disc with a hair cap on top.
    fill_rect(
        &mut img, &mut labels,
        f.head_cy + 0.6 * f.head_r, f.torso_top,
        f.cx - f.neck_half, f.cx + f.neck_half,
        f.skin, 3,
    );
    let face = [
        (f.skin[0] + 0.03).min(1.0),
        (f.skin[1] + 0.03).min(1.0),
        (f.skin[2] + 0.03).min(1.0),
    ];
    let r2 = f.head_r * f.head_r;
    let hair_r2 = (1.15 * f.head_r) * (1.15 * f.head_r);
    let y_lo = ((f.head_cy - 1.15 * f.head_r).floor().max(0.0)) as usize;
    let y_hi = ((f.head_cy + f.head_r).ceil() as usize).min(h - 1);
    for y in y_lo..=y_hi {
        for x in 0..w {
            let dx = x as f64 - f.cx;
            let dy = y as f64 - f.head_cy;
            let d2 = dx * dx + dy * dy;
            if d2 <= r2 {
                put(&mut img, &mut labels, y, x, face, 2);
            }
            if d2 <= hair_r2 && (y as f64) < f.head_cy - 0.2 * f.head_r {
                put(&mut img, &mut labels, y, x, f.hair, 1);
            }
        }
    }
    (img, labels)
}

fn figure_keypoints(h: usize, w: usize, f: &Figure) -> PoseKeypoints {
    let arm_lx = f.cx - f.torso_half_top - f.arm_w / 2.0;
    let arm_rx = f.cx + f.torso_half_top + f.arm_w / 2.0;
    let sho_y = f.torso_top + 0.03 * h as f64;
    let elbow_y = (f.torso_top + f.arm_bottom) / 2.0;
    let leg_lx = f.cx - f.leg_gap / 2.0 - f.leg_half;
    let leg_rx = f.cx + f.leg_gap / 2.0 + f.leg_half;
    let knee_y = (f.torso_bottom + f.leg_bottom) / 2.0;
    let neck_y = (f.head_cy + 0.6 * f.head_r + f.torso_top) / 2.0;
    let pts: [(f64, f64); 18] = [
        (f.cx, f.head_cy + 0.2 * f.head_r),          // nose
        (f.cx, neck_y),                              // neck
        (f.cx - 0.8 * f.torso_half_top, sho_y),      // r shoulder
        (arm_lx, elbow_y),                           // r elbow
        (arm_lx, f.arm_bottom - 1.0),                // r wrist
        (f.cx + 0.8 * f.torso_half_top, sho_y),      // l shoulder
        (arm_rx, elbow_y),                           // l elbow
        (arm_rx, f.arm_bottom - 1.0),                // l wrist
        (leg_lx, f.torso_bottom + 1.0),              // r hip
        (leg_lx, knee_y),                            // r knee
        (leg_lx, f.leg_bottom - 1.0),                // r ankle
        (leg_rx, f.torso_bottom + 1.0),              // l hip
        (leg_rx, knee_y),                            // l knee
        (leg_rx, f.leg_bottom - 1.0),                // l ankle
        (f.cx - 0.35 * f.head_r, f.head_cy - 0.2 * f.head_r), // r eye
        (f.cx + 0.35 * f.head_r, f.head_cy - 0.2 * f.head_r), // l eye
        (f.cx - 0.8 * f.head_r, f.head_cy),          // r ear
        (f.cx + 0.8 * f.head_r, f.head_cy),          // l ear
    ];
    let clamp_kp = |(x, y): (f64, f64)| Keypoint {
        x: x.clamp(0.0, w as f64 - 1.0),
        y: y.clamp(0.0, h as f64 - 1.0),
        confidence: 1.0,
    };
    PoseKeypoints {
        points: pts.map(clamp_kp),
    }
}

/// Product-style cloth image: the same gradient garment, centered, at a
/// fixed canonical size, on a near-white background.
fn render_cloth(h: usize, w: usize, f: &Figure) -> (Raster<Scalar>, Raster<Scalar>) {
    let mut img = Raster::filled(3, h, w, 0.95 as Scalar);
    let mut mask = Raster::zeros(1, h, w);
    let hf = h as f64;
    let wf = w as f64;
    let half = 0.23 * wf;
    let y0 = 0.33 * hf;
    let y1 = 0.67 * hf;
    let ys = y0.round() as usize;
    let ye = (y1.round() as usize).min(h);
    let xs = ((wf / 2.0 - half).round().max(0.0)) as usize;
    let xe = ((wf / 2.0 + half).round() as usize).min(w);
    for y in ys..ye {
        let t = ((y as f64 - y0) / (y1 - y0).max(1.0)).clamp(0.0, 1.0);
        let color = lerp3(f.top_color, f.bottom_color, t);
        for x in xs..xe {
            for c in 0..3 {
                img.set(c, y, x, color[c] as Scalar);
            }
            mask.set(0, y, x, 1.0 as Scalar);
        }
    }
    (img, mask)
}

fn make_sample(id: &str, h: usize, w: usize, palette: &Palette, rng: &mut ChaCha8Rng) -> Sample {
    let f = sample_figure(h, w, rng);
    let (person_image, labels) = render_person(h, w, &f);
    let keypoints = figure_keypoints(h, w, &f);
    let (cloth_image, cloth_mask) = render_cloth(h, w, &f);
    let parse = SegmentationMap::new(labels, palette.clone())
        .expect("toy labels are drawn from the toy palette");
    Sample {
        sample_id: format!("{id}/{id}"),
        person_image,
        cloth_image,
        cloth_mask,
        parse,
        keypoints,
    }
}

fn write_pairs(
    root: &Path,
    split: Split,
    mode: PairMode,
    lines: &[(String, String)],
) -> Result<(), ToyError> {
    let path = pairs_path(root, split, mode);
    let mut body = String::new();
    for (p, c) in lines {
        body.push_str(p);
        body.push(' ');
        body.push_str(c);
        body.push('\n');
    }
    std::fs::write(&path, body).map_err(|source| ToyError::Io { path, source })
}

/// Generates a complete dataset tree under `root`: palette, both splits,
/// paired lists for each split, and an unpaired test list (cloth ids
/// rotated by one). Byte-identical for identical configs.
pub fn generate_toy_dataset(root: &Path, cfg: &ToyConfig) -> Result<(), ToyError> {
    cfg.validate()?;
    std::fs::create_dir_all(root).map_err(|source| ToyError::Io {
        path: root.to_path_buf(),
        source,
    })?;
    let palette = toy_palette();
    let palette_path = root.join("palette.json");
    palette
        .save(&palette_path)
        .map_err(|source| ToyError::Io {
            path: palette_path,
            source,
        })?;
    for (split_idx, (split, n)) in [(Split::Train, cfg.n_train), (Split::Test, cfg.n_test)]
        .into_iter()
        .enumerate()
    {
        let ids: Vec<String> = (1..=n).map(|i| format!("{i:04}")).collect();
        for (i, id) in ids.iter().enumerate() {
            let seed = derive_seed(cfg.seed, &[split_idx as u64, i as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sample = make_sample(id, cfg.height, cfg.width, &palette, &mut rng);
            save_sample(root, split, id, id, &sample)?;
        }
        let paired: Vec<(String, String)> =
            ids.iter().map(|i| (i.clone(), i.clone())).collect();
        write_pairs(root, split, PairMode::Paired, &paired)?;
        if split == Split::Test {
            let unpaired: Vec<(String, String)> = ids
                .iter()
                .enumerate()
                .map(|(i, p)| (p.clone(), ids[(i + 1) % ids.len()].clone()))
                .collect();
            write_pairs(root, split, PairMode::Unpaired, &unpaired)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agnostic::{build_agnostic, AgnosticConfig};
    use crate::dataset::{load_dataset_index, load_sample, LoadOptions};
    use tempfile::TempDir;

    fn small_cfg() -> ToyConfig {
        ToyConfig::default()
    }

    #[test]
    fn generated_tree_is_a_valid_dataset() {
        let dir = TempDir::new().unwrap();
        let cfg = small_cfg();
        generate_toy_dataset(dir.path(), &cfg).unwrap();
        let train = load_dataset_index(dir.path(), Split::Train, PairMode::Paired).unwrap();
        assert_eq!(train.entries.len(), cfg.n_train);
        let test = load_dataset_index(dir.path(), Split::Test, PairMode::Paired).unwrap();
        assert_eq!(test.entries.len(), cfg.n_test);
        let unpaired = load_dataset_index(dir.path(), Split::Test, PairMode::Unpaired).unwrap();
        assert_eq!(unpaired.entries.len(), cfg.n_test);
        assert!(unpaired.entries.iter().any(|(p, c)| p != c));
    }

    #[test]
    fn samples_load_with_expected_content() {
        let dir = TempDir::new().unwrap();
        let cfg = small_cfg();
        generate_toy_dataset(dir.path(), &cfg).unwrap();
        let sample = load_sample(
            dir.path(),
            Split::Train,
            "0001",
            "0001",
            &LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(sample.person_image.height(), cfg.height);
        assert_eq!(sample.person_image.width(), cfg.width);
        // Every structural region exists.
        for role in [
            Role::Background,
            Role::Hair,
            Role::Face,
            Role::Neck,
            Role::UpperClothes,
            Role::Arms,
            Role::LowerClothes,
        ] {
            let mask = sample.parse.role_mask::<f32>(role);
            let area: f32 = mask.data().iter().sum();
            assert!(area > 0.0, "role {role:?} missing from toy figure");
        }
        assert!(sample.keypoints.points.iter().all(|k| k.confidence > 0.0));
        // Cloth mask covers the canonical garment rectangle, nothing more.
        let area: f32 = sample.cloth_mask.data().iter().sum();
        let frac = area / (cfg.height * cfg.width) as f32;
        assert!(frac > 0.10 && frac < 0.25, "cloth mask fraction {frac}");
    }

    #[test]
    fn paired_cloth_matches_worn_garment_colors() {
        let dir = TempDir::new().unwrap();
        generate_toy_dataset(dir.path(), &small_cfg()).unwrap();
        for id in ["0002", "0005"] {
            let s = load_sample(dir.path(), Split::Test, id, id, &LoadOptions::default()).unwrap();
            let garment = s.parse.role_mask::<f32>(Role::UpperClothes);
            let g_area: f32 = garment.data().iter().sum();
            let c_area: f32 = s.cloth_mask.data().iter().sum();
            for c in 0..3 {
                let g_mean: f32 = s
                    .person_image
                    .channel(c)
                    .iter()
                    .zip(garment.data())
                    .map(|(v, m)| v * m)
                    .sum::<f32>()
                    / g_area;
                let c_mean: f32 = s
                    .cloth_image
                    .channel(c)
                    .iter()
                    .zip(s.cloth_mask.data())
                    .map(|(v, m)| v * m)
                    .sum::<f32>()
                    / c_area;
                assert!(
                    (g_mean - c_mean).abs() < 0.05,
                    "channel {c}: worn {g_mean} vs cloth {c_mean}"
                );
            }
        }
    }

    #[test]
    fn generation_is_byte_identical_across_runs() {
        let a = TempDir::new().unwrap();
        let b = TempDir::new().unwrap();
        generate_toy_dataset(a.path(), &small_cfg()).unwrap();
        generate_toy_dataset(b.path(), &small_cfg()).unwrap();
        let mut files_a = walk(a.path());
        let mut files_b = walk(b.path());
        files_a.sort();
        files_b.sort();
        assert_eq!(files_a.len(), files_b.len());
        assert!(!files_a.is_empty());
        for (ra, rb) in files_a.iter().zip(&files_b) {
            assert_eq!(ra.0, rb.0, "tree shape differs");
            assert_eq!(
                std::fs::read(&ra.1).unwrap(),
                std::fs::read(&rb.1).unwrap(),
                "file {} differs between runs",
                ra.0
            );
        }
    }

    fn walk(root: &Path) -> Vec<(String, std::path::PathBuf)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    out.push((rel, p));
                }
            }
        }
        out
    }

    #[test]
    fn different_seeds_produce_different_images() {
        let a = TempDir::new().unwrap();
        let b = TempDir::new().unwrap();
        let mut cfg = small_cfg();
        generate_toy_dataset(a.path(), &cfg).unwrap();
        cfg.seed = 8;
        generate_toy_dataset(b.path(), &cfg).unwrap();
        let pa = a.path().join("train/image/0001.png");
        let pb = b.path().join("train/image/0001.png");
        assert_ne!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
    }

    #[test]
    fn toy_samples_support_agnostic_building() {
        let dir = TempDir::new().unwrap();
        generate_toy_dataset(dir.path(), &small_cfg()).unwrap();
        let s = load_sample(
            dir.path(),
            Split::Test,
            "0003",
            "0003",
            &LoadOptions::default(),
        )
        .unwrap();
        let (agnostic_img, agnostic_parse) = build_agnostic(&s, &AgnosticConfig::default()).unwrap();
        assert_eq!(agnostic_img.height(), s.person_image.height());
        // The garment region must be gone from the agnostic parse.
        let garment = agnostic_parse.role_mask::<f32>(Role::UpperClothes);
        assert_eq!(garment.data().iter().sum::<f32>(), 0.0);
        // Face and hair survive.
        for role in [Role::Face, Role::Hair] {
            assert!(agnostic_parse.role_mask::<f32>(role).data().iter().sum::<f32>() > 0.0);
        }
    }

    #[test]
    fn config_validation_rejects_degenerate_sizes() {
        let dir = TempDir::new().unwrap();
        let mut cfg = small_cfg();
        cfg.n_test = 1;
        assert!(matches!(
            generate_toy_dataset(dir.path(), &cfg),
            Err(ToyError::BadConfig(_))
        ));
        cfg = small_cfg();
        cfg.height = 16;
        assert!(matches!(
            generate_toy_dataset(dir.path(), &cfg),
            Err(ToyError::BadConfig(_))
        ));
    }
}
