//! Unpaired inference over test sets and FID scoring.
//!
//! Inference chains the three frozen stage checkpoints the same way training
//! chains frozen predecessors: agnostic representation, predicted parse,
//! TPS-warped garment, then synthesis. Test roots may be raw or pre-cropped;
//! either way every sample is resized through a full-frame window to the
//! checkpoint's output size, so outputs always have the configured shape.
//!
//! FID statistics accumulate in streams and merge associatively, and the
//! report pairs every generated directory with the real reference directory
//! at the same scale before building the FID-vs-scale table and chart
//! series.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use tryon_core::agnostic::{build_agnostic, AgnosticConfig, AgnosticError};
use tryon_core::crop::{crop_sample, AgnosticPair, CropConfig, CropError};
use tryon_core::dataset::{
    load_dataset_index, load_sample, DatasetError, LoadOptions, PairMode, Split,
};
use tryon_core::fid::{frechet_distance, FidAccumulator, FidError, FidStats};
use tryon_core::pose::{render_pose_map, PoseError};
use tryon_core::raster::{CropWindow, Raster, RasterError};
use tryon_core::{HighPrecision, Scalar};

use crate::autodiff::{Graph, Tensor};
use crate::chart::ChartSeries;
use crate::checkpoint::{load_checkpoint, peek_header, sha256_file, CheckpointError};
use crate::features::FeatureExtractor;
use crate::networks::{
    argmax_one_hot, raster_to_tensor, tensor_item_to_raster, DeformNet, NetConfig, NetError,
    SegGenerator, SynthGenerator, TpsTables,
};
use crate::training::POSE_SIGMA;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("bad evaluation input: {0}")]
    Config(String),
    #[error("directory {0} contains no PNG images")]
    EmptyDir(PathBuf),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Crop(#[from] CropError),
    #[error(transparent)]
    Agnostic(#[from] AgnosticError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Fid(#[from] FidError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointSet {
    pub seg: PathBuf,
    pub deform: PathBuf,
    pub synth: PathBuf,
}

impl CheckpointSet {
    /// The conventional layout `train_stage` writes into one directory.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            seg: dir.join("seg.ckpt"),
            deform: dir.join("deform.ckpt"),
            synth: dir.join("synth.ckpt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceManifest {
    /// (person id, cloth id) in processing order.
    pub pairs: Vec<(String, String)>,
    /// Output image size as (height, width).
    pub image_size: (usize, usize),
    /// Stage name -> checkpoint SHA-256.
    pub checkpoints: BTreeMap<String, String>,
    /// SHA-256 of the test root's pre-crop manifest, when one exists.
    pub crop_manifest_sha256: Option<String>,
}

/// The three frozen stages plus the tables they share.
struct InferenceEngine {
    cfg: NetConfig,
    seg: SegGenerator,
    deform: DeformNet,
    synth: SynthGenerator,
    tps: TpsTables,
}

impl InferenceEngine {
    fn load(ckpts: &CheckpointSet) -> Result<Self, EvalError> {
        let cfg = peek_header(&ckpts.seg)?.cfg;
        let mut seg = SegGenerator::new(&cfg, 0)?;
        load_checkpoint(&ckpts.seg, "seg", &cfg, &mut seg.params)?;
        let mut deform = DeformNet::new(&cfg, 0)?;
        load_checkpoint(&ckpts.deform, "deform", &cfg, &mut deform.params)?;
        let mut synth = SynthGenerator::new(&cfg, 0)?;
        load_checkpoint(&ckpts.synth, "synth", &cfg, &mut synth.params)?;
        let tps = TpsTables::new(cfg.tps_grid, cfg.image_size)?;
        Ok(Self { cfg, seg, deform, synth, tps })
    }

    /// Runs the full chain for one sample; all stages frozen, batch of one.
    /// Inputs are `[0, 1]` rasters at the configured output size; the result
    /// is an RGB raster back in `[0, 1]`.
    fn tryon(
        &self,
        agnostic_image: &Raster<Scalar>,
        agnostic_onehot: &Raster<Scalar>,
        pose_map: &Raster<Scalar>,
        cloth: &Raster<Scalar>,
        cloth_mask: &Raster<Scalar>,
        garment_channel: usize,
    ) -> Result<Raster<Scalar>, NetError> {
        let signed = |r: &Raster<Scalar>| -> Tensor {
            let mut t = raster_to_tensor(r);
            t.mapv_inplace(|v| v * 2.0 - 1.0);
            t
        };
        let mut g = Graph::new();
        let agn_img = g.input(signed(agnostic_image), false);
        let agn_onehot = g.input(raster_to_tensor(agnostic_onehot), false);
        let pose = g.input(raster_to_tensor(pose_map), false);
        let cloth_n = g.input(signed(cloth), false);
        let mask_n = g.input(raster_to_tensor(cloth_mask), false);
        // Latent noise collapses to its mean at inference time.
        let (h, w) = self.cfg.image_size;
        let noise = self
            .cfg
            .latent_noise
            .then(|| g.input(Tensor::zeros(ndarray::IxDyn(&[1, 1, h, w])), false));

        let bind_seg = self.seg.params.bind_frozen(&mut g);
        let logits = self.seg.forward(&mut g, &bind_seg, agn_onehot, pose, cloth_n, noise)?;
        let probs = g.channel_softmax(logits);
        let pred = argmax_one_hot(g.value(probs));
        let seg_map = g.input(pred, false);

        let person_repr = g.concat(&[agn_onehot, pose, seg_map]);
        let bind_def = self.deform.params.bind_frozen(&mut g);
        let offsets = self.deform.forward(&mut g, &bind_def, cloth_n, mask_n, person_repr)?;
        let warped_cloth = self.tps.warp(&mut g, offsets, cloth_n);
        let warped_mask = self.tps.warp(&mut g, offsets, mask_n);

        let bind_syn = self.synth.params.bind_frozen(&mut g);
        let tryon = self.synth.forward(
            &mut g,
            &bind_syn,
            agn_img,
            warped_cloth,
            warped_mask,
            seg_map,
            garment_channel,
        )?;
        let mut out = tensor_item_to_raster(g.value(tryon), 0);
        for v in out.data_mut() {
            *v = (*v + 1.0) / 2.0;
        }
        Ok(out)
    }
}

/// Runs every pair of the unpaired test list through the frozen chain and
/// writes `<person>_<cloth>.png` images plus `manifest.json` into `out_dir`.
pub fn run_unpaired_inference(
    ckpts: &CheckpointSet,
    test_root: &Path,
    out_dir: &Path,
    agn_cfg: &AgnosticConfig,
) -> Result<InferenceManifest, EvalError> {
    let engine = InferenceEngine::load(ckpts)?;
    let (out_h, out_w) = engine.cfg.image_size;
    let pairs = load_dataset_index(test_root, Split::Test, PairMode::Unpaired)?;

    std::fs::create_dir_all(out_dir)
        .map_err(|source| EvalError::Io { path: out_dir.to_path_buf(), source })?;

    // Resizing reuses the crop machinery with a full-frame window, so raw
    // and pre-cropped roots flow through identical geometry.
    let resize_cfg = CropConfig { out_h, out_w, ..CropConfig::default() };
    let opts = LoadOptions::default();

    let mut manifest_pairs = Vec::with_capacity(pairs.entries.len());
    for (person, cloth) in &pairs.entries {
        let sample = load_sample(test_root, Split::Test, person, cloth, &opts)?;
        if sample.parse.palette.num_labels() != engine.cfg.num_labels {
            return Err(EvalError::Config(format!(
                "checkpoints expect {} labels but the palette has {}",
                engine.cfg.num_labels,
                sample.parse.palette.num_labels()
            )));
        }
        let palette = &sample.parse.palette;
        let garment_channel = palette
            .channel_of(palette.upper_clothes())
            .expect("palette maps its own labels");
        let (image, parse) = build_agnostic(&sample, agn_cfg)?;
        let agnostic = AgnosticPair { image, parse };
        let full = CropWindow::full(sample.person_image.height(), sample.person_image.width());
        let cs = crop_sample(&sample, &agnostic, None, &full, &resize_cfg, false)?;
        let pose = render_pose_map::<Scalar>(&cs.keypoints, out_h, out_w, POSE_SIGMA)?;

        let tryon = engine.tryon(
            &cs.agnostic_image,
            &cs.agnostic_parse.to_one_hot::<Scalar>(),
            &pose,
            &cs.cloth_image,
            &cs.cloth_mask,
            garment_channel,
        )?;
        tryon.save_png_rgb(&out_dir.join(format!("{person}_{cloth}.png")))?;
        manifest_pairs.push((person.clone(), cloth.clone()));
    }

    let mut checkpoints = BTreeMap::new();
    for (name, path) in
        [("seg", &ckpts.seg), ("deform", &ckpts.deform), ("synth", &ckpts.synth)]
    {
        let hash = sha256_file(path)
            .map_err(|source| EvalError::Io { path: path.clone(), source })?;
        checkpoints.insert(name.to_string(), hash);
    }
    let crop_manifest = test_root.join("manifest.json");
    let crop_manifest_sha256 = if crop_manifest.is_file() {
        Some(
            sha256_file(&crop_manifest)
                .map_err(|source| EvalError::Io { path: crop_manifest, source })?,
        )
    } else {
        None
    };

    let manifest = InferenceManifest {
        pairs: manifest_pairs,
        image_size: (out_h, out_w),
        checkpoints,
        crop_manifest_sha256,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|source| EvalError::Io { path, source })?;
    Ok(manifest)
}

/// Sorted PNG paths directly inside `dir`.
pub fn png_paths(dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|source| EvalError::Io { path: dir.to_path_buf(), source })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(EvalError::EmptyDir(dir.to_path_buf()));
    }
    Ok(paths)
}

/// Streams every PNG in `dir` through the extractor into FID statistics.
pub fn accumulate_dir_stats(
    dir: &Path,
    extractor: &dyn FeatureExtractor,
) -> Result<FidStats<HighPrecision>, EvalError> {
    let mut acc = FidAccumulator::<HighPrecision>::new(extractor.id(), extractor.dim());
    for path in png_paths(dir)? {
        let image = Raster::<Scalar>::load_png_rgb(&path)?;
        acc.push(&extractor.extract(&image))?;
    }
    Ok(acc.finalize()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidRow {
    pub model: String,
    pub scale: f64,
    pub fid: f64,
    pub n_real: u64,
    pub n_fake: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidReport {
    /// Sorted by (model, scale).
    pub rows: Vec<FidRow>,
}

impl FidReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,scale,fid,n_real,n_fake\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{},{}\n",
                r.model, r.scale, r.fid, r.n_real, r.n_fake
            ));
        }
        out
    }

    /// One FID-vs-scale series per model, scales ascending.
    pub fn series(&self) -> Vec<ChartSeries> {
        let mut by_model: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
        for r in &self.rows {
            by_model.entry(&r.model).or_default().push((r.scale, r.fid));
        }
        by_model
            .into_iter()
            .map(|(name, mut points)| {
                points.sort_by(|a, b| f64::total_cmp(&a.0, &b.0));
                ChartSeries { name: name.to_string(), points }
            })
            .collect()
    }

    /// Wide-format chart data: one row per scale, one column per model.
    pub fn chart_csv(&self) -> String {
        let series = self.series();
        let mut scales: Vec<f64> = self.rows.iter().map(|r| r.scale).collect();
        scales.sort_by(f64::total_cmp);
        scales.dedup_by(|a, b| a == b);
        let mut out = String::from("scale");
        for s in &series {
            out.push(',');
            out.push_str(&s.name);
        }
        out.push('\n');
        for &scale in &scales {
            out.push_str(&format!("{scale}"));
            for s in &series {
                out.push(',');
                if let Some(&(_, fid)) =
                    s.points.iter().find(|(x, _)| *x == scale)
                {
                    out.push_str(&format!("{fid:.6}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Scores every (model, scale) directory against the real reference
/// directory at the same scale.
pub fn build_fid_report(
    real_by_scale: &[(f64, PathBuf)],
    fake_by_model_scale: &[(String, f64, PathBuf)],
    extractor: &dyn FeatureExtractor,
) -> Result<FidReport, EvalError> {
    let mut real_stats: Vec<(f64, FidStats<HighPrecision>)> =
        Vec::with_capacity(real_by_scale.len());
    for (scale, dir) in real_by_scale {
        real_stats.push((*scale, accumulate_dir_stats(dir, extractor)?));
    }

    let mut rows = Vec::with_capacity(fake_by_model_scale.len());
    for (model, scale, dir) in fake_by_model_scale {
        let real = real_stats
            .iter()
            .find(|(s, _)| (s - scale).abs() < 1e-9)
            .map(|(_, stats)| stats)
            .ok_or_else(|| {
                EvalError::Config(format!("no real reference directory for scale {scale}"))
            })?;
        let fake = accumulate_dir_stats(dir, extractor)?;
        let fid = frechet_distance(real, &fake)?;
        rows.push(FidRow {
            model: model.clone(),
            scale: *scale,
            fid,
            n_real: real.n,
            n_fake: fake.n,
        });
    }
    rows.sort_by(|a, b| a.model.cmp(&b.model).then(f64::total_cmp(&a.scale, &b.scale)));
    Ok(FidReport { rows })
}
