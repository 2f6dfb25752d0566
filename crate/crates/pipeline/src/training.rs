//! Stage-wise training loops with crop augmentation live in the data path.
//!
//! Every iteration follows the same spine: load a paired sample, build its
//! clothing-agnostic representation, draw one crop window per sample, crop
//! all modalities through that single window, run the stage's forward pass,
//! and take an optimizer step. Window RNG streams are derived from
//! `(seed, epoch, sample index)`, so a run is reproducible end to end and two
//! runs with the same seed write byte-identical loss CSVs.
//!
//! Stages chain the way inference does: the deformation stage consumes the
//! parse map predicted by the frozen segmentation checkpoint, and the
//! synthesis stage consumes both frozen predecessors. Training a stage
//! therefore requires the earlier checkpoints to exist in `out_dir`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use tryon_core::agnostic::{build_agnostic, AgnosticConfig, AgnosticError};
use tryon_core::crop::{crop_sample, sample_crop_window, AgnosticPair, CropConfig, CropError};
use tryon_core::dataset::{
    load_dataset_index, load_sample, DatasetError, LoadOptions, PairMode, Sample, Split,
};
use tryon_core::palette::Role;
use tryon_core::pose::{render_pose_map, PoseError};
use tryon_core::raster::{CropWindow, Raster};
use tryon_core::{derive_seed, Scalar};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::layers::sample_normal;
use crate::losses::{gan_d_loss, gan_g_loss, GanMode, LossBreakdown, StageLossNodes};
use crate::networks::{
    argmax_one_hot, batch_from_rasters, DeformNet, NetConfig, NetError, PatchDiscriminator,
    SegGenerator, SynthGenerator, TpsTables,
};
use crate::optim::{Adam, AdamConfig};

/// Sigma (in output pixels) of the Gaussian bumps rendered per keypoint.
pub const POSE_SIGMA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Seg,
    Deform,
    Synth,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Seg => "seg",
            Stage::Deform => "deform",
            Stage::Synth => "synth",
        }
    }

    pub fn checkpoint_file(self) -> &'static str {
        match self {
            Stage::Seg => "seg.ckpt",
            Stage::Deform => "deform.ckpt",
            Stage::Synth => "synth.ckpt",
        }
    }

    /// Stages whose checkpoints must already exist before this one trains.
    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Seg => &[],
            Stage::Deform => &[Stage::Seg],
            Stage::Synth => &[Stage::Seg, Stage::Deform],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seg" => Ok(Stage::Seg),
            "deform" => Ok(Stage::Deform),
            "synth" => Ok(Stage::Synth),
            other => Err(format!("unknown stage {other:?}, expected seg, deform, or synth")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Passes over the paired training list.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub adv_weight: f32,
    pub l1_weight: f32,
    pub ce_weight: f32,
    /// Weight of the TPS bending energy in the deformation stage.
    pub bend_weight: f32,
    pub crop: CropConfig,
    /// Crop the garment image with the person window instead of resizing it
    /// whole. Off by default: the garment is a flat catalog photo, only the
    /// person framing is simulated.
    pub include_cloth: bool,
    pub seed: u64,
    pub gan_mode: GanMode,
    pub net: NetConfig,
    pub agnostic: AgnosticConfig,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self {
            stage,
            epochs: 10,
            batch_size: 4,
            lr: 2e-4,
            adv_weight: 0.1,
            l1_weight: 1.0,
            ce_weight: 1.0,
            bend_weight: 0.5,
            crop: CropConfig::default(),
            include_cloth: false,
            seed: 0,
            gan_mode: GanMode::default(),
            net: NetConfig::default(),
            agnostic: AgnosticConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config(format!("lr {} must be finite and positive", self.lr)));
        }
        for (name, w) in [
            ("adv_weight", self.adv_weight),
            ("l1_weight", self.l1_weight),
            ("ce_weight", self.ce_weight),
            ("bend_weight", self.bend_weight),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(TrainError::Config(format!("{name} {w} must be finite and >= 0")));
            }
        }
        let required: &[(&str, f32)] = match self.stage {
            Stage::Seg => &[("ce_weight", self.ce_weight)],
            Stage::Deform => {
                &[("l1_weight", self.l1_weight), ("bend_weight", self.bend_weight)]
            }
            Stage::Synth => &[("l1_weight", self.l1_weight), ("adv_weight", self.adv_weight)],
        };
        for (name, w) in required {
            if *w == 0.0 {
                return Err(TrainError::Config(format!(
                    "{name} must be nonzero for the {} stage",
                    self.stage
                )));
            }
        }
        self.crop.validate()?;
        self.net.validate()?;
        if (self.crop.out_h, self.crop.out_w) != self.net.image_size {
            return Err(TrainError::Config(format!(
                "crop output {}x{} does not match the network image size {}x{}",
                self.crop.out_h, self.crop.out_w, self.net.image_size.0, self.net.image_size.1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training config: {0}")]
    Config(String),
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
    #[error("stage {stage} requires the {missing} checkpoint at {path}; train {missing} first")]
    MissingPrerequisite { stage: Stage, missing: Stage, path: PathBuf },
    #[error(
        "non-finite loss at iteration {iter} (total = {total}); batch samples [{samples}], windows [{windows}]"
    )]
    NonFiniteLoss { iter: usize, total: f32, samples: String, windows: String },
    #[error("failed to write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub total: f32,
    pub ce: f32,
    pub l1: f32,
    pub adv: f32,
    pub bend: f32,
    /// Mean window area fraction over the batch.
    pub window_area_frac: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub stage: Stage,
    pub iterations: usize,
    pub records: Vec<IterRecord>,
    pub checkpoint_path: PathBuf,
    pub csv_path: PathBuf,
}

pub const LOSS_CSV_HEADER: &str = "iter,total,ce,l1,adv,bend,window_area_frac";

struct TrainSample {
    sample: Sample,
    agnostic: AgnosticPair,
}

fn load_training_set(
    root: &Path,
    agn: &AgnosticConfig,
) -> Result<Vec<TrainSample>, TrainError> {
    let pairs = load_dataset_index(root, Split::Train, PairMode::Paired)?;
    let opts = LoadOptions::default();
    let mut out = Vec::with_capacity(pairs.entries.len());
    for (person, cloth) in &pairs.entries {
        let sample = load_sample(root, Split::Train, person, cloth, &opts)?;
        let (image, parse) = build_agnostic(&sample, agn)?;
        out.push(TrainSample { sample, agnostic: AgnosticPair { image, parse } });
    }
    if out.is_empty() {
        return Err(TrainError::Config("paired training list is empty".into()));
    }
    Ok(out)
}

/// Maps a `[0, 1]` image raster into the `[-1, 1]` range the generators use.
fn to_signed(r: &Raster<Scalar>) -> Raster<Scalar> {
    let mut out = r.clone();
    for v in out.data_mut() {
        *v = *v * 2.0 - 1.0;
    }
    out
}

fn tile3(mask: &Raster<Scalar>) -> Raster<Scalar> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Raster::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let v = mask.get(0, y, x);
            for c in 0..3 {
                out.set(c, y, x, v);
            }
        }
    }
    out
}

fn area_fraction(win: &CropWindow) -> f64 {
    (win.height * win.width) as f64 / (win.src_h * win.src_w) as f64
}

/// One assembled training batch. RGB tensors are in `[-1, 1]`; one-hot maps,
/// masks, and pose heatmaps are in `[0, 1]`. Every person-side modality of
/// item `b` went through `windows[b]`.
struct Batch {
    person: Tensor,
    agnostic_image: Tensor,
    agnostic_onehot: Tensor,
    pose: Tensor,
    cloth: Tensor,
    cloth_mask: Tensor,
    parse_onehot: Tensor,
    parse_indices: Arc<Vec<usize>>,
    garment_mask3: Tensor,
    sample_ids: Vec<String>,
    windows: Vec<CropWindow>,
    mean_area_frac: f64,
}

fn assemble_batch(
    set: &[TrainSample],
    cfg: &TrainConfig,
    iter: usize,
) -> Result<Batch, TrainError> {
    let n = set.len();
    let (out_h, out_w) = (cfg.crop.out_h, cfg.crop.out_w);
    let mut persons = Vec::with_capacity(cfg.batch_size);
    let mut agn_images = Vec::with_capacity(cfg.batch_size);
    let mut agn_onehots = Vec::with_capacity(cfg.batch_size);
    let mut poses = Vec::with_capacity(cfg.batch_size);
    let mut cloths = Vec::with_capacity(cfg.batch_size);
    let mut cloth_masks = Vec::with_capacity(cfg.batch_size);
    let mut parse_onehots = Vec::with_capacity(cfg.batch_size);
    let mut garment_masks = Vec::with_capacity(cfg.batch_size);
    let mut indices = Vec::with_capacity(cfg.batch_size * out_h * out_w);
    let mut sample_ids = Vec::with_capacity(cfg.batch_size);
    let mut windows = Vec::with_capacity(cfg.batch_size);
    let mut frac_sum = 0.0;

    for b in 0..cfg.batch_size {
        let global = iter * cfg.batch_size + b;
        let epoch = (global / n) as u64;
        let idx = global % n;
        let ts = &set[idx];
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch, idx as u64]));
        let src = &ts.sample.person_image;
        let win = sample_crop_window(src.height(), src.width(), &cfg.crop, &mut rng)?;
        let cs = crop_sample(&ts.sample, &ts.agnostic, None, &win, &cfg.crop, cfg.include_cloth)?;
        let pose = render_pose_map::<Scalar>(&cs.keypoints, out_h, out_w, POSE_SIGMA)?;

        persons.push(to_signed(&cs.person_image));
        agn_images.push(to_signed(&cs.agnostic_image));
        agn_onehots.push(cs.agnostic_parse.to_one_hot::<Scalar>());
        poses.push(pose);
        cloths.push(to_signed(&cs.cloth_image));
        cloth_masks.push(cs.cloth_mask.clone());
        parse_onehots.push(cs.parse.to_one_hot::<Scalar>());
        indices.extend(cs.parse.to_class_indices());
        garment_masks.push(tile3(&cs.parse.role_mask::<Scalar>(Role::UpperClothes)));
        sample_ids.push(ts.sample.sample_id.clone());
        frac_sum += area_fraction(&win);
        windows.push(win);
    }

    Ok(Batch {
        person: batch_from_rasters(&persons),
        agnostic_image: batch_from_rasters(&agn_images),
        agnostic_onehot: batch_from_rasters(&agn_onehots),
        pose: batch_from_rasters(&poses),
        cloth: batch_from_rasters(&cloths),
        cloth_mask: batch_from_rasters(&cloth_masks),
        parse_onehot: batch_from_rasters(&parse_onehots),
        parse_indices: Arc::new(indices),
        garment_mask3: batch_from_rasters(&garment_masks),
        sample_ids,
        windows,
        mean_area_frac: frac_sum / cfg.batch_size as f64,
    })
}

/// Per-iteration latent noise for generators configured with it.
fn noise_tensor(cfg: &TrainConfig, iter: usize) -> Option<Tensor> {
    if !cfg.net.latent_noise {
        return None;
    }
    let (h, w) = cfg.net.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[30, iter as u64]));
    let mut t = Tensor::zeros(ndarray::IxDyn(&[cfg.batch_size, 1, h, w]));
    for v in t.iter_mut() {
        *v = sample_normal(&mut rng);
    }
    Some(t)
}

/// Common batch tensors registered as constant graph inputs.
struct BatchNodes {
    person: NodeId,
    agnostic_image: NodeId,
    agnostic_onehot: NodeId,
    pose: NodeId,
    cloth: NodeId,
    cloth_mask: NodeId,
}

fn batch_nodes(g: &mut Graph, b: &Batch) -> BatchNodes {
    BatchNodes {
        person: g.input(b.person.clone(), false),
        agnostic_image: g.input(b.agnostic_image.clone(), false),
        agnostic_onehot: g.input(b.agnostic_onehot.clone(), false),
        pose: g.input(b.pose.clone(), false),
        cloth: g.input(b.cloth.clone(), false),
        cloth_mask: g.input(b.cloth_mask.clone(), false),
    }
}

/// Runs the frozen segmentation generator and hardens its prediction into a
/// one-hot map, exactly as inference does.
fn predicted_seg_onehot(
    g: &mut Graph,
    seg: &SegGenerator,
    nodes: &BatchNodes,
    noise: Option<&Tensor>,
) -> Result<Tensor, NetError> {
    let bind = seg.params.bind_frozen(g);
    let z = noise.map(|t| g.input(t.clone(), false));
    let logits = seg.forward(g, &bind, nodes.agnostic_onehot, nodes.pose, nodes.cloth, z)?;
    let probs = g.channel_softmax(logits);
    Ok(argmax_one_hot(g.value(probs)))
}

fn seg_step(
    gen: &mut SegGenerator,
    opt: &mut Adam,
    gan: Option<&mut (PatchDiscriminator, Adam)>,
    cfg: &TrainConfig,
    batch: &Batch,
    noise: Option<&Tensor>,
) -> Result<LossBreakdown, NetError> {
    let mut g = Graph::new();
    let nodes = batch_nodes(&mut g, batch);
    let bind = gen.params.bind(&mut g);
    let z = noise.map(|t| g.input(t.clone(), false));
    let logits = gen.forward(&mut g, &bind, nodes.agnostic_onehot, nodes.pose, nodes.cloth, z)?;
    let ce = g.ce_loss(logits, batch.parse_indices.clone());
    let mut losses = StageLossNodes::new().with_ce(&mut g, ce, cfg.ce_weight);

    let mut fake_probs = None;
    if gan.is_some() {
        let probs = g.channel_softmax(logits);
        let (disc, _) = gan.as_ref().unwrap();
        let bind_d = disc.params.bind_frozen(&mut g);
        let cond = g.concat(&[nodes.agnostic_onehot, nodes.cloth]);
        let (f0, f1) = disc.forward(&mut g, &bind_d, probs, cond)?;
        let adv = gan_g_loss(&mut g, cfg.gan_mode, &[f0, f1]);
        losses = losses.with_adv(&mut g, adv, cfg.adv_weight);
        fake_probs = Some(g.value(probs).clone());
    }

    let breakdown = losses.breakdown(&g);
    let grads = g.backward(losses.total());
    opt.step(&mut gen.params, &bind, &grads);

    if let Some((disc, opt_d)) = gan {
        let fake = fake_probs.expect("fake probabilities were captured above");
        let mut g2 = Graph::new();
        let bind_d = disc.params.bind(&mut g2);
        let real = g2.input(batch.parse_onehot.clone(), false);
        let fake = g2.input(fake, false);
        let agn = g2.input(batch.agnostic_onehot.clone(), false);
        let cloth = g2.input(batch.cloth.clone(), false);
        let cond = g2.concat(&[agn, cloth]);
        let (r0, r1) = disc.forward(&mut g2, &bind_d, real, cond)?;
        let (f0, f1) = disc.forward(&mut g2, &bind_d, fake, cond)?;
        let d = gan_d_loss(&mut g2, cfg.gan_mode, &[r0, r1], &[f0, f1]);
        let grads_d = g2.backward(d);
        opt_d.step(&mut disc.params, &bind_d, &grads_d);
    }
    Ok(breakdown)
}

fn deform_step(
    net: &mut DeformNet,
    opt: &mut Adam,
    seg: &SegGenerator,
    tps: &TpsTables,
    cfg: &TrainConfig,
    batch: &Batch,
    noise: Option<&Tensor>,
) -> Result<LossBreakdown, NetError> {
    let mut g = Graph::new();
    let nodes = batch_nodes(&mut g, batch);
    let pred = predicted_seg_onehot(&mut g, seg, &nodes, noise)?;
    let pred = g.input(pred, false);
    let person_repr = g.concat(&[nodes.agnostic_onehot, nodes.pose, pred]);

    let bind = net.params.bind(&mut g);
    let offsets = net.forward(&mut g, &bind, nodes.cloth, nodes.cloth_mask, person_repr)?;
    let warped = tps.warp(&mut g, offsets, nodes.cloth);
    let dst = tps.dst_points(&mut g, offsets);
    let bend = g.bending(dst, tps.bending_quad.clone());
    let mask = g.input(batch.garment_mask3.clone(), false);
    let l1 = g.masked_l1(warped, nodes.person, mask);

    let losses = StageLossNodes::new()
        .with_l1(&mut g, l1, cfg.l1_weight)
        .with_bend(&mut g, bend, cfg.bend_weight);
    let breakdown = losses.breakdown(&g);
    let grads = g.backward(losses.total());
    opt.step(&mut net.params, &bind, &grads);
    Ok(breakdown)
}

fn synth_step(
    gen: &mut SynthGenerator,
    opt: &mut Adam,
    gan: &mut (PatchDiscriminator, Adam),
    seg: &SegGenerator,
    deform: &DeformNet,
    tps: &TpsTables,
    garment_channel: usize,
    cfg: &TrainConfig,
    batch: &Batch,
    noise: Option<&Tensor>,
) -> Result<LossBreakdown, NetError> {
    let mut g = Graph::new();
    let nodes = batch_nodes(&mut g, batch);
    let pred = predicted_seg_onehot(&mut g, seg, &nodes, noise)?;
    let seg_map = g.input(pred, false);
    let person_repr = g.concat(&[nodes.agnostic_onehot, nodes.pose, seg_map]);
    let bind_def = deform.params.bind_frozen(&mut g);
    let offsets = deform.forward(&mut g, &bind_def, nodes.cloth, nodes.cloth_mask, person_repr)?;
    let warped_cloth = tps.warp(&mut g, offsets, nodes.cloth);
    let warped_mask = tps.warp(&mut g, offsets, nodes.cloth_mask);

    let bind = gen.params.bind(&mut g);
    let tryon = gen.forward(
        &mut g,
        &bind,
        nodes.agnostic_image,
        warped_cloth,
        warped_mask,
        seg_map,
        garment_channel,
    )?;
    let ones = g.input(Tensor::ones(batch.person.raw_dim()), false);
    let l1 = g.masked_l1(tryon, nodes.person, ones);

    let (disc, opt_d) = gan;
    let bind_d = disc.params.bind_frozen(&mut g);
    let cond = g.concat(&[seg_map, nodes.cloth]);
    let (f0, f1) = disc.forward(&mut g, &bind_d, tryon, cond)?;
    let adv = gan_g_loss(&mut g, cfg.gan_mode, &[f0, f1]);

    let losses = StageLossNodes::new()
        .with_l1(&mut g, l1, cfg.l1_weight)
        .with_adv(&mut g, adv, cfg.adv_weight);
    let breakdown = losses.breakdown(&g);
    let fake_tryon = g.value(tryon).clone();
    let seg_map_value = g.value(seg_map).clone();
    let grads = g.backward(losses.total());
    opt.step(&mut gen.params, &bind, &grads);

    let mut g2 = Graph::new();
    let bind_d = disc.params.bind(&mut g2);
    let real = g2.input(batch.person.clone(), false);
    let fake = g2.input(fake_tryon, false);
    let seg_map2 = g2.input(seg_map_value, false);
    let cloth2 = g2.input(batch.cloth.clone(), false);
    let cond2 = g2.concat(&[seg_map2, cloth2]);
    let (r0, r1) = disc.forward(&mut g2, &bind_d, real, cond2)?;
    let (f0, f1) = disc.forward(&mut g2, &bind_d, fake, cond2)?;
    let d = gan_d_loss(&mut g2, cfg.gan_mode, &[r0, r1], &[f0, f1]);
    let grads_d = g2.backward(d);
    opt_d.step(&mut disc.params, &bind_d, &grads_d);
    Ok(breakdown)
}

enum StageState {
    Seg {
        gen: SegGenerator,
        opt: Adam,
        gan: Option<(PatchDiscriminator, Adam)>,
    },
    Deform {
        net: DeformNet,
        opt: Adam,
        seg: SegGenerator,
        tps: TpsTables,
    },
    Synth {
        gen: SynthGenerator,
        opt: Adam,
        gan: (PatchDiscriminator, Adam),
        seg: SegGenerator,
        deform: DeformNet,
        tps: TpsTables,
        garment_channel: usize,
    },
}

impl StageState {
    fn new(cfg: &TrainConfig, out_dir: &Path, garment_channel: usize) -> Result<Self, TrainError> {
        let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
        let load_frozen_seg = || -> Result<SegGenerator, TrainError> {
            let mut seg = SegGenerator::new(&cfg.net, 0)?;
            load_checkpoint(
                &out_dir.join(Stage::Seg.checkpoint_file()),
                Stage::Seg.name(),
                &cfg.net,
                &mut seg.params,
            )?;
            Ok(seg)
        };
        match cfg.stage {
            Stage::Seg => {
                let gen = SegGenerator::new(&cfg.net, derive_seed(cfg.seed, &[10]))?;
                let opt = Adam::new(adam, &gen.params);
                let gan = if cfg.adv_weight > 0.0 {
                    let disc = PatchDiscriminator::new(
                        &cfg.net,
                        cfg.net.num_labels,
                        derive_seed(cfg.seed, &[20]),
                    )?;
                    let opt_d = Adam::new(adam, &disc.params);
                    Some((disc, opt_d))
                } else {
                    None
                };
                Ok(StageState::Seg { gen, opt, gan })
            }
            Stage::Deform => {
                let net = DeformNet::new(&cfg.net, derive_seed(cfg.seed, &[11]))?;
                let opt = Adam::new(adam, &net.params);
                let tps = TpsTables::new(cfg.net.tps_grid, cfg.net.image_size)?;
                Ok(StageState::Deform { net, opt, seg: load_frozen_seg()?, tps })
            }
            Stage::Synth => {
                let gen = SynthGenerator::new(&cfg.net, derive_seed(cfg.seed, &[12]))?;
                let opt = Adam::new(adam, &gen.params);
                let disc =
                    PatchDiscriminator::new(&cfg.net, 3, derive_seed(cfg.seed, &[22]))?;
                let opt_d = Adam::new(adam, &disc.params);
                let seg = load_frozen_seg()?;
                let mut deform = DeformNet::new(&cfg.net, 0)?;
                load_checkpoint(
                    &out_dir.join(Stage::Deform.checkpoint_file()),
                    Stage::Deform.name(),
                    &cfg.net,
                    &mut deform.params,
                )?;
                let tps = TpsTables::new(cfg.net.tps_grid, cfg.net.image_size)?;
                Ok(StageState::Synth {
                    gen,
                    opt,
                    gan: (disc, opt_d),
                    seg,
                    deform,
                    tps,
                    garment_channel,
                })
            }
        }
    }

    fn step(
        &mut self,
        cfg: &TrainConfig,
        batch: &Batch,
        noise: Option<&Tensor>,
    ) -> Result<LossBreakdown, NetError> {
        match self {
            StageState::Seg { gen, opt, gan } => {
                seg_step(gen, opt, gan.as_mut(), cfg, batch, noise)
            }
            StageState::Deform { net, opt, seg, tps } => {
                deform_step(net, opt, seg, tps, cfg, batch, noise)
            }
            StageState::Synth { gen, opt, gan, seg, deform, tps, garment_channel } => synth_step(
                gen,
                opt,
                gan,
                seg,
                deform,
                tps,
                *garment_channel,
                cfg,
                batch,
                noise,
            ),
        }
    }

    fn save(&self, path: &Path, cfg: &TrainConfig) -> Result<(), CheckpointError> {
        match self {
            StageState::Seg { gen, .. } => {
                save_checkpoint(path, Stage::Seg.name(), &cfg.net, &gen.params)
            }
            StageState::Deform { net, .. } => {
                save_checkpoint(path, Stage::Deform.name(), &cfg.net, &net.params)
            }
            StageState::Synth { gen, .. } => {
                save_checkpoint(path, Stage::Synth.name(), &cfg.net, &gen.params)
            }
        }
    }
}

fn csv_row(rec: &IterRecord) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        rec.iter, rec.total, rec.ce, rec.l1, rec.adv, rec.bend, rec.window_area_frac
    )
}

/// Trains one stage and writes its checkpoint plus a per-iteration loss CSV
/// (`train_<stage>.csv`) into `out_dir`.
pub fn train_stage(
    cfg: &TrainConfig,
    data_root: &Path,
    out_dir: &Path,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    for &missing in cfg.stage.prerequisites() {
        let path = out_dir.join(missing.checkpoint_file());
        if !path.is_file() {
            return Err(TrainError::MissingPrerequisite { stage: cfg.stage, missing, path });
        }
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|source| TrainError::Io { path: out_dir.to_path_buf(), source })?;

    let set = load_training_set(data_root, &cfg.agnostic)?;
    let palette = &set[0].sample.parse.palette;
    if palette.num_labels() != cfg.net.num_labels {
        return Err(TrainError::Config(format!(
            "network expects {} labels but the dataset palette has {}",
            cfg.net.num_labels,
            palette.num_labels()
        )));
    }
    let garment_channel = palette
        .channel_of(palette.upper_clothes())
        .expect("palette always maps its own labels");

    let mut state = StageState::new(cfg, out_dir, garment_channel)?;
    let n = set.len();
    let iterations = (cfg.epochs * n).div_ceil(cfg.batch_size);
    let mut records = Vec::with_capacity(iterations);
    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');

    for it in 0..iterations {
        let batch = assemble_batch(&set, cfg, it)?;
        let noise = noise_tensor(cfg, it);
        let bd = state.step(cfg, &batch, noise.as_ref())?;
        let rec = IterRecord {
            iter: it + 1,
            total: bd.total,
            ce: bd.ce,
            l1: bd.l1,
            adv: bd.adv,
            bend: bd.bend,
            window_area_frac: batch.mean_area_frac,
        };
        let finite = [rec.total, rec.ce, rec.l1, rec.adv, rec.bend]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(TrainError::NonFiniteLoss {
                iter: rec.iter,
                total: rec.total,
                samples: batch.sample_ids.join(", "),
                windows: batch
                    .windows
                    .iter()
                    .map(|w| {
                        format!(
                            "top={} left={} h={} w={} of {}x{}",
                            w.top, w.left, w.height, w.width, w.src_h, w.src_w
                        )
                    })
                    .collect::<Vec<_>>()
                    .join("; "),
            });
        }
        csv.push_str(&csv_row(&rec));
        csv.push('\n');
        records.push(rec);
    }

    let checkpoint_path = out_dir.join(cfg.stage.checkpoint_file());
    state.save(&checkpoint_path, cfg)?;
    let csv_path = out_dir.join(format!("train_{}.csv", cfg.stage));
    std::fs::write(&csv_path, csv)
        .map_err(|source| TrainError::Io { path: csv_path.clone(), source })?;

    Ok(TrainReport { stage: cfg.stage, iterations, records, checkpoint_path, csv_path })
}
