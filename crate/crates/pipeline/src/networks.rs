//! The three stage generators and the conditional patch discriminator.
//!
//! Layout (all sizes at base_channels = 16, depth 4):
//! - [`SegGenerator`]: U-Net over agnostic parse + pose + cloth, emitting
//!   per-pixel label logits (~0.9M params).
//! - [`DeformNet`]: twin convolutional extractors, channelwise-normalized
//!   feature correlation, and a regressor that emits bounded offsets for a
//!   5x5 TPS control grid. The final layer is zero-initialized so step 0 is
//!   the identity warp.
//! - [`SynthGenerator`]: U-Net whose decoder normalization layers are
//!   modulated by the segmentation layout (per-level pooled one-hot maps),
//!   emitting the RGB try-on image through tanh.
//! - [`PatchDiscriminator`]: two patch-logit branches, one at full
//!   resolution (H/8 output) and one on a half-resolution input (H/16).
//!
//! Forward methods validate input shapes and return [`NetError::Shape`]
//! rather than panicking, since callers feed externally loaded data.

use std::sync::Arc;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use tryon_core::pose::NUM_KEYPOINTS;
use tryon_core::raster::Raster;
use tryon_core::tps::{self, TpsError};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::layers::{Binding, Conv2dLayer, ConvInBlock, LinearLayer, ParamStore, LRELU_SLOPE};

/// Regularization used for the fixed TPS control layout.
pub const TPS_REG: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    BadConfig(String),
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("thin-plate setup failed: {0}")]
    Tps(#[from] TpsError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Channel width of the first encoder level; deeper levels scale as
    /// 2x/4x/8x up to a cap of 8x.
    pub base_channels: usize,
    /// Number of segmentation labels (palette size).
    pub num_labels: usize,
    /// Working resolution as (out_h, out_w).
    pub image_size: (usize, usize),
    /// TPS control grid layout (rows, cols).
    pub tps_grid: (usize, usize),
    /// When set, the segmentation generator consumes one extra noise
    /// channel so repeated draws can produce layout variation.
    pub latent_noise: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            num_labels: 13,
            image_size: (512, 384),
            tps_grid: (5, 5),
            latent_noise: false,
        }
    }
}

const DEPTH: usize = 4;

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.base_channels < 4 {
            return Err(NetError::BadConfig(format!(
                "base_channels must be at least 4, got {}",
                self.base_channels
            )));
        }
        if self.num_labels < 2 {
            return Err(NetError::BadConfig(format!(
                "num_labels must be at least 2, got {}",
                self.num_labels
            )));
        }
        let div = 1 << DEPTH;
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(NetError::BadConfig(format!(
                "image_size {h}x{w} must be divisible by {div}"
            )));
        }
        // The deformation regressor pools its H/16 map down to a fixed
        // 4x3 window, so the working resolution has a floor.
        if h < div * REG_POOL.0 || w < div * REG_POOL.1 {
            return Err(NetError::BadConfig(format!(
                "image_size {h}x{w} below the minimum {}x{}",
                div * REG_POOL.0,
                div * REG_POOL.1
            )));
        }
        let (gr, gc) = self.tps_grid;
        if gr < 2 || gc < 2 {
            return Err(NetError::BadConfig(format!(
                "tps_grid {gr}x{gc} must be at least 2x2"
            )));
        }
        Ok(())
    }

    pub fn control_points(&self) -> usize {
        self.tps_grid.0 * self.tps_grid.1
    }

    /// Encoder widths for the shared U-Net shape.
    fn widths(&self) -> [usize; 5] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 8 * b, 8 * b]
    }
}

/// The per-stage outputs named by the pipeline contract: label logits from
/// the first stage, TPS control offsets from the second, and the final RGB
/// image from the third.
pub struct StageOutputs {
    pub seg_logits: Tensor,
    pub control_offsets: Tensor,
    pub tryon_image: Tensor,
}

fn shape_err(what: &'static str, expected: String, t: &Tensor) -> NetError {
    NetError::Shape {
        what,
        expected,
        got: format!("{:?}", t.shape()),
    }
}

/// Validates an `(N, c, h, w)` input and returns its batch size.
fn check_nchw(
    g: &Graph,
    id: NodeId,
    what: &'static str,
    c: usize,
    hw: (usize, usize),
    batch: Option<usize>,
) -> Result<usize, NetError> {
    let t = g.value(id);
    let s = t.shape();
    let ok = s.len() == 4
        && s[1] == c
        && s[2] == hw.0
        && s[3] == hw.1
        && batch.map_or(s[0] > 0, |n| s[0] == n);
    if ok {
        Ok(s[0])
    } else {
        let n = batch.map_or("N".to_string(), |n| n.to_string());
        Err(shape_err(what, format!("({n}, {c}, {}, {})", hw.0, hw.1), t))
    }
}

// ---------------------------------------------------------------------------
// Segmentation generator
// ---------------------------------------------------------------------------

pub struct SegGenerator {
    pub cfg: NetConfig,
    pub params: ParamStore,
    enc: Vec<ConvInBlock>,
    mid: ConvInBlock,
    dec: Vec<ConvInBlock>,
    head: Conv2dLayer,
}

impl SegGenerator {
    pub fn in_channels(cfg: &NetConfig) -> usize {
        cfg.num_labels + NUM_KEYPOINTS + 3 + usize::from(cfg.latent_noise)
    }

    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self, NetError> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = cfg.widths();
        let mut enc = Vec::new();
        let mut cin = Self::in_channels(cfg);
        for (i, &cout) in w.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            enc.push(ConvInBlock::new(&mut ps, &mut rng, &format!("enc{i}"), cin, cout, stride));
            cin = cout;
        }
        let mid = ConvInBlock::new(&mut ps, &mut rng, "mid", w[4], w[4], 1);
        let mut dec = Vec::new();
        let mut up_c = w[4];
        for lvl in (0..DEPTH).rev() {
            let cat = up_c + w[lvl];
            let cout = w[lvl];
            dec.push(ConvInBlock::new(&mut ps, &mut rng, &format!("dec{lvl}"), cat, cout, 1));
            up_c = cout;
        }
        let head = Conv2dLayer::new(&mut ps, &mut rng, "head", w[0], cfg.num_labels, 3, 1, 1, true);
        Ok(Self { cfg: cfg.clone(), params: ps, enc, mid, dec, head })
    }

    /// Agnostic parse one-hot + pose map + target cloth -> label logits.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        agnostic_parse: NodeId,
        pose_map: NodeId,
        cloth: NodeId,
        noise: Option<NodeId>,
    ) -> Result<NodeId, NetError> {
        let hw = self.cfg.image_size;
        let n = check_nchw(g, agnostic_parse, "agnostic_parse", self.cfg.num_labels, hw, None)?;
        check_nchw(g, pose_map, "pose_map", NUM_KEYPOINTS, hw, Some(n))?;
        check_nchw(g, cloth, "cloth", 3, hw, Some(n))?;
        let mut parts = vec![agnostic_parse, pose_map, cloth];
        match (self.cfg.latent_noise, noise) {
            (true, Some(z)) => {
                check_nchw(g, z, "noise", 1, hw, Some(n))?;
                parts.push(z);
            }
            (true, None) => {
                return Err(NetError::BadConfig(
                    "latent_noise is enabled but no noise channel was supplied".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(NetError::BadConfig(
                    "noise channel supplied but latent_noise is disabled".into(),
                ))
            }
            (false, None) => {}
        }
        let x = g.concat(&parts);
        let mut skips = Vec::new();
        let mut cur = x;
        for block in &self.enc {
            cur = block.apply(g, bind, cur);
            skips.push(cur);
        }
        cur = self.mid.apply(g, bind, cur);
        for (i, block) in self.dec.iter().enumerate() {
            let lvl = DEPTH - 1 - i;
            let up = g.upsample_nearest2(cur);
            let cat = g.concat(&[up, skips[lvl]]);
            cur = block.apply(g, bind, cat);
        }
        Ok(self.head.apply(g, bind, cur))
    }
}

// ---------------------------------------------------------------------------
// Clothes deformation
// ---------------------------------------------------------------------------

pub struct DeformNet {
    pub cfg: NetConfig,
    pub params: ParamStore,
    cloth_enc: Vec<ConvInBlock>,
    person_enc: Vec<ConvInBlock>,
    reg0: Conv2dLayer,
    reg1: Conv2dLayer,
    fc_hidden: LinearLayer,
    fc_out: LinearLayer,
}

/// Fixed pooled size the regressor reduces to before its linear layers,
/// keeping those layers independent of the working resolution.
const REG_POOL: (usize, usize) = (4, 3);

impl DeformNet {
    pub fn person_channels(cfg: &NetConfig) -> usize {
        2 * cfg.num_labels + NUM_KEYPOINTS
    }

    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self, NetError> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = cfg.base_channels;
        let widths = [b, 2 * b, 4 * b, 4 * b];
        let build_enc = |ps: &mut ParamStore, rng: &mut ChaCha8Rng, tag: &str, cin0: usize| {
            let mut blocks = Vec::new();
            let mut cin = cin0;
            for (i, &cout) in widths.iter().enumerate() {
                let stride = if i == 3 { 1 } else { 2 };
                blocks.push(ConvInBlock::new(ps, rng, &format!("{tag}{i}"), cin, cout, stride));
                cin = cout;
            }
            blocks
        };
        let cloth_enc = build_enc(&mut ps, &mut rng, "cloth_enc", 4);
        let person_enc = build_enc(&mut ps, &mut rng, "person_enc", Self::person_channels(cfg));
        let (h8, w8) = (cfg.image_size.0 / 8, cfg.image_size.1 / 8);
        let q = h8 * w8;
        let reg0 = Conv2dLayer::new(&mut ps, &mut rng, "reg0", q, 4 * b, 3, 1, 1, true);
        let reg1 = Conv2dLayer::new(&mut ps, &mut rng, "reg1", 4 * b, 2 * b, 3, 2, 1, true);
        let flat = 2 * b * REG_POOL.0 * REG_POOL.1;
        let fc_hidden = LinearLayer::new(&mut ps, &mut rng, "fc_hidden", flat, 8 * b);
        // Zero init: offsets start at exactly 0, i.e. the identity warp.
        let fc_out = LinearLayer::zeros(&mut ps, "fc_out", 8 * b, 2 * cfg.control_points());
        Ok(Self { cfg: cfg.clone(), params: ps, cloth_enc, person_enc, reg0, reg1, fc_hidden, fc_out })
    }

    /// Target cloth + mask and the person representation (agnostic parse
    /// one-hot, pose map, predicted seg one-hot) -> `(N, 2, K)` control
    /// offsets in (-1, 1).
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        cloth: NodeId,
        cloth_mask: NodeId,
        person_repr: NodeId,
    ) -> Result<NodeId, NetError> {
        let hw = self.cfg.image_size;
        let n = check_nchw(g, cloth, "cloth", 3, hw, None)?;
        check_nchw(g, cloth_mask, "cloth_mask", 1, hw, Some(n))?;
        check_nchw(g, person_repr, "person_repr", Self::person_channels(&self.cfg), hw, Some(n))?;
        let cin = g.concat(&[cloth, cloth_mask]);
        let mut cf = cin;
        for b in &self.cloth_enc {
            cf = b.apply(g, bind, cf);
        }
        let mut pf = person_repr;
        for b in &self.person_enc {
            pf = b.apply(g, bind, pf);
        }
        let cfn = g.channel_l2_norm(cf, 1e-6);
        let pfn = g.channel_l2_norm(pf, 1e-6);
        let corr = g.correlation(pfn, cfn);
        let r0 = self.reg0.apply(g, bind, corr);
        let r0a = g.leaky_relu(r0, LRELU_SLOPE);
        let r1 = self.reg1.apply(g, bind, r0a);
        let r1a = g.leaky_relu(r1, LRELU_SLOPE);
        let pooled = g.adaptive_avg_pool(r1a, REG_POOL.0, REG_POOL.1);
        let flat_dim = 2 * self.cfg.base_channels * REG_POOL.0 * REG_POOL.1;
        let flat = g.reshape(pooled, &[n, flat_dim]);
        let h1 = self.fc_hidden.apply(g, bind, flat);
        let h1a = g.leaky_relu(h1, LRELU_SLOPE);
        let raw = self.fc_out.apply(g, bind, h1a);
        let bounded = g.tanh(raw);
        Ok(g.reshape(bounded, &[n, 2, self.cfg.control_points()]))
    }
}

/// Destination control points for a batch: the canonical grid replicated
/// `n` times as an `(N, 2, K)` tensor, to be summed with predicted offsets.
pub fn canonical_dst_tensor(tps_grid: (usize, usize), n: usize) -> Tensor {
    let pts: Vec<[f32; 2]> = tps::canonical_control_grid(tps_grid.0, tps_grid.1);
    let k = pts.len();
    let mut t = ArrayD::zeros(IxDyn(&[n, 2, k]));
    for ni in 0..n {
        for (ki, p) in pts.iter().enumerate() {
            t[[ni, 0, ki]] = p[0];
            t[[ni, 1, ki]] = p[1];
        }
    }
    t
}

/// Precomputed pieces of the TPS warp for a fixed control layout and output
/// size: the grid basis (linear in the destination points) and the bending
/// quadratic form.
pub struct TpsTables {
    pub basis: Arc<Array2<f32>>,
    pub bending_quad: Arc<Array2<f32>>,
    pub grid_hw: (usize, usize),
    pub layout: (usize, usize),
}

impl TpsTables {
    pub fn new(tps_grid: (usize, usize), out_hw: (usize, usize)) -> Result<Self, NetError> {
        let src: Vec<[f64; 2]> = tps::canonical_control_grid(tps_grid.0, tps_grid.1);
        let k = src.len();
        let basis64 = tps::tps_linear_basis(&src, TPS_REG, out_hw.0, out_hw.1)?;
        let basis = Array2::from_shape_vec(
            (out_hw.0 * out_hw.1, k),
            basis64.into_iter().map(|v| v as f32).collect(),
        )
        .unwrap();
        let quad64 = tps::tps_bending_quadratic(&src, TPS_REG)?;
        let quad =
            Array2::from_shape_vec((k, k), quad64.into_iter().map(|v| v as f32).collect()).unwrap();
        Ok(Self {
            basis: Arc::new(basis),
            bending_quad: Arc::new(quad),
            grid_hw: out_hw,
            layout: tps_grid,
        })
    }

    /// Adds the canonical grid to predicted offsets and warps `image` by
    /// the resulting TPS map.
    pub fn warp(&self, g: &mut Graph, offsets: NodeId, image: NodeId) -> NodeId {
        let n = g.value(offsets).shape()[0];
        let canon = g.input(canonical_dst_tensor(self.layout, n), false);
        let dst = g.add(canon, offsets);
        let grid = g.tps_grid(dst, self.basis.clone(), self.grid_hw.0, self.grid_hw.1);
        g.grid_sample(image, grid)
    }

    /// Destination points themselves (canonical + offsets), for bending.
    pub fn dst_points(&self, g: &mut Graph, offsets: NodeId) -> NodeId {
        let n = g.value(offsets).shape()[0];
        let canon = g.input(canonical_dst_tensor(self.layout, n), false);
        g.add(canon, offsets)
    }
}

// ---------------------------------------------------------------------------
// Try-on synthesis
// ---------------------------------------------------------------------------

/// Predicted-garment pixels the warped cloth fails to cover: one-hot
/// garment channel AND NOT (warped mask > 0.5). Binary, shape `(N,1,H,W)`.
pub fn misalignment_mask(seg_one_hot: &Tensor, garment_channel: usize, warped_mask: &Tensor) -> Tensor {
    let s = seg_one_hot.shape().to_vec();
    assert!(s.len() == 4 && garment_channel < s[1], "bad seg one-hot");
    assert_eq!(warped_mask.shape(), [s[0], 1, s[2], s[3]], "warped mask shape");
    let mut out = ArrayD::zeros(IxDyn(&[s[0], 1, s[2], s[3]]));
    for ni in 0..s[0] {
        for yi in 0..s[2] {
            for xi in 0..s[3] {
                let garment = seg_one_hot[[ni, garment_channel, yi, xi]] > 0.5;
                let covered = warped_mask[[ni, 0, yi, xi]] > 0.5;
                if garment && !covered {
                    out[[ni, 0, yi, xi]] = 1.0;
                }
            }
        }
    }
    out
}

struct SpadeBlock {
    conv: Conv2dLayer,
    seg_hidden: Conv2dLayer,
    gamma: Conv2dLayer,
    beta: Conv2dLayer,
}

const SPADE_HIDDEN: usize = 32;

impl SpadeBlock {
    fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        num_labels: usize,
    ) -> Self {
        Self {
            conv: Conv2dLayer::new(ps, rng, &format!("{name}.conv"), cin, cout, 3, 1, 1, false),
            seg_hidden: Conv2dLayer::new(
                ps,
                rng,
                &format!("{name}.seg_hidden"),
                num_labels,
                SPADE_HIDDEN,
                3,
                1,
                1,
                true,
            ),
            gamma: Conv2dLayer::new(ps, rng, &format!("{name}.gamma"), SPADE_HIDDEN, cout, 3, 1, 1, true),
            beta: Conv2dLayer::new(ps, rng, &format!("{name}.beta"), SPADE_HIDDEN, cout, 3, 1, 1, true),
        }
    }

    /// Instance-normalizes the convolved features, then modulates them with
    /// scale/shift maps derived from the segmentation layout at this level.
    fn apply(&self, g: &mut Graph, bind: &Binding, x: NodeId, seg_lvl: NodeId) -> NodeId {
        let y = self.conv.apply(g, bind, x);
        let yn = g.instance_norm(y, crate::layers::IN_EPS);
        let h0 = self.seg_hidden.apply(g, bind, seg_lvl);
        let h = g.relu(h0);
        let gamma = self.gamma.apply(g, bind, h);
        let beta = self.beta.apply(g, bind, h);
        let scale = g.add_scalar(gamma, 1.0);
        let modulated = g.mul(yn, scale);
        let shifted = g.add(modulated, beta);
        g.leaky_relu(shifted, LRELU_SLOPE)
    }
}

pub struct SynthGenerator {
    pub cfg: NetConfig,
    pub params: ParamStore,
    enc: Vec<ConvInBlock>,
    mid: ConvInBlock,
    dec: Vec<SpadeBlock>,
    head: Conv2dLayer,
}

/// agnostic RGB + warped cloth RGB + warped mask + misalignment mask.
pub const SYNTH_IN_CHANNELS: usize = 3 + 3 + 1 + 1;

impl SynthGenerator {
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self, NetError> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = cfg.widths();
        let mut enc = Vec::new();
        let mut cin = SYNTH_IN_CHANNELS;
        for (i, &cout) in w.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            enc.push(ConvInBlock::new(&mut ps, &mut rng, &format!("enc{i}"), cin, cout, stride));
            cin = cout;
        }
        let mid = ConvInBlock::new(&mut ps, &mut rng, "mid", w[4], w[4], 1);
        let mut dec = Vec::new();
        let mut up_c = w[4];
        for lvl in (0..DEPTH).rev() {
            let cat = up_c + w[lvl];
            dec.push(SpadeBlock::new(&mut ps, &mut rng, &format!("dec{lvl}"), cat, w[lvl], cfg.num_labels));
            up_c = w[lvl];
        }
        let head = Conv2dLayer::new(&mut ps, &mut rng, "head", w[0], 3, 3, 1, 1, true);
        Ok(Self { cfg: cfg.clone(), params: ps, enc, mid, dec, head })
    }

    /// Agnostic person image + warped cloth (+ its coverage mask) + layout
    /// one-hot -> RGB try-on image in (-1, 1). The misalignment mask
    /// (garment region not covered by the warped cloth) is computed here
    /// and concatenated as a constant input channel.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        agnostic_image: NodeId,
        warped_cloth: NodeId,
        warped_mask: NodeId,
        seg_map: NodeId,
        garment_channel: usize,
    ) -> Result<NodeId, NetError> {
        let hw = self.cfg.image_size;
        let n = check_nchw(g, agnostic_image, "agnostic_image", 3, hw, None)?;
        check_nchw(g, warped_cloth, "warped_cloth", 3, hw, Some(n))?;
        check_nchw(g, warped_mask, "warped_mask", 1, hw, Some(n))?;
        check_nchw(g, seg_map, "seg_map", self.cfg.num_labels, hw, Some(n))?;
        if garment_channel >= self.cfg.num_labels {
            return Err(NetError::BadConfig(format!(
                "garment channel {garment_channel} out of range for {} labels",
                self.cfg.num_labels
            )));
        }
        let mis = misalignment_mask(g.value(seg_map), garment_channel, g.value(warped_mask));
        let mis_node = g.input(mis, false);
        let x = g.concat(&[agnostic_image, warped_cloth, warped_mask, mis_node]);
        // Layout pyramid for the decoder levels, coarsest last.
        let mut seg_pyramid = vec![seg_map];
        for _ in 0..DEPTH - 1 {
            let prev = *seg_pyramid.last().unwrap();
            seg_pyramid.push(g.avg_pool2(prev));
        }
        let mut skips = Vec::new();
        let mut cur = x;
        for block in &self.enc {
            cur = block.apply(g, bind, cur);
            skips.push(cur);
        }
        cur = self.mid.apply(g, bind, cur);
        for (i, block) in self.dec.iter().enumerate() {
            let lvl = DEPTH - 1 - i;
            let up = g.upsample_nearest2(cur);
            let cat = g.concat(&[up, skips[lvl]]);
            cur = block.apply(g, bind, cat, seg_pyramid[lvl]);
        }
        let rgb = self.head.apply(g, bind, cur);
        Ok(g.tanh(rgb))
    }
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

struct DiscBranch {
    convs: Vec<Conv2dLayer>,
    head: Conv2dLayer,
}

impl DiscBranch {
    fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, tag: &str, cin0: usize, b: usize) -> Self {
        let widths = [2 * b, 4 * b, 8 * b];
        let mut convs = Vec::new();
        let mut cin = cin0;
        for (i, &cout) in widths.iter().enumerate() {
            convs.push(Conv2dLayer::new(ps, rng, &format!("{tag}.c{i}"), cin, cout, 3, 2, 1, true));
            cin = cout;
        }
        let head = Conv2dLayer::new(ps, rng, &format!("{tag}.head"), cin, 1, 1, 1, 0, true);
        Self { convs, head }
    }

    fn apply(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> NodeId {
        let mut cur = x;
        for c in &self.convs {
            cur = c.apply(g, bind, cur);
            cur = g.leaky_relu(cur, LRELU_SLOPE);
        }
        self.head.apply(g, bind, cur)
    }
}

/// Conditional patch discriminator with two scales: full-resolution input
/// (logits at H/8) and a pooled input (logits at H/16).
pub struct PatchDiscriminator {
    pub cfg: NetConfig,
    pub params: ParamStore,
    /// Channels of the judged image (num_labels for the seg stage, 3 for
    /// the synthesis stage).
    pub image_channels: usize,
    scale0: DiscBranch,
    scale1: DiscBranch,
}

impl PatchDiscriminator {
    pub fn condition_channels(cfg: &NetConfig) -> usize {
        cfg.num_labels + 3
    }

    pub fn new(cfg: &NetConfig, image_channels: usize, seed: u64) -> Result<Self, NetError> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cin = image_channels + Self::condition_channels(cfg);
        let scale0 = DiscBranch::new(&mut ps, &mut rng, "scale0", cin, cfg.base_channels);
        let scale1 = DiscBranch::new(&mut ps, &mut rng, "scale1", cin, cfg.base_channels);
        Ok(Self { cfg: cfg.clone(), params: ps, image_channels, scale0, scale1 })
    }

    /// Judged image plus conditioning (context parse one-hot + cloth),
    /// returning patch logits at the two scales.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        image: NodeId,
        condition: NodeId,
    ) -> Result<(NodeId, NodeId), NetError> {
        let hw = self.cfg.image_size;
        let n = check_nchw(g, image, "image", self.image_channels, hw, None)?;
        check_nchw(g, condition, "condition", Self::condition_channels(&self.cfg), hw, Some(n))?;
        let x = g.concat(&[image, condition]);
        let s0 = self.scale0.apply(g, bind, x);
        let pooled = g.avg_pool2(x);
        let s1 = self.scale1.apply(g, bind, pooled);
        Ok((s0, s1))
    }
}

// ---------------------------------------------------------------------------
// Tensor bridges
// ---------------------------------------------------------------------------

/// `(C,H,W)` raster -> `(1,C,H,W)` tensor.
pub fn raster_to_tensor(r: &Raster<f32>) -> Tensor {
    let (c, h, w) = (r.channels(), r.height(), r.width());
    let mut t = ArrayD::zeros(IxDyn(&[1, c, h, w]));
    for ci in 0..c {
        for yi in 0..h {
            for xi in 0..w {
                t[[0, ci, yi, xi]] = r.get(ci, yi, xi);
            }
        }
    }
    t
}

/// Stacks same-shaped rasters into an `(N,C,H,W)` batch.
pub fn batch_from_rasters(rs: &[Raster<f32>]) -> Tensor {
    assert!(!rs.is_empty());
    let (c, h, w) = (rs[0].channels(), rs[0].height(), rs[0].width());
    let mut t = ArrayD::zeros(IxDyn(&[rs.len(), c, h, w]));
    for (ni, r) in rs.iter().enumerate() {
        assert!(
            r.channels() == c && r.height() == h && r.width() == w,
            "raster {ni} has mismatched shape"
        );
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    t[[ni, ci, yi, xi]] = r.get(ci, yi, xi);
                }
            }
        }
    }
    t
}

/// One batch item of an `(N,C,H,W)` tensor -> `(C,H,W)` raster.
pub fn tensor_item_to_raster(t: &Tensor, item: usize) -> Raster<f32> {
    let s = t.shape();
    assert!(s.len() == 4 && item < s[0]);
    let mut r = Raster::zeros(s[1], s[2], s[3]);
    for ci in 0..s[1] {
        for yi in 0..s[2] {
            for xi in 0..s[3] {
                r.set(ci, yi, xi, t[[item, ci, yi, xi]]);
            }
        }
    }
    r
}

/// Channelwise argmax -> one-hot (ties resolve to the lowest channel).
pub fn argmax_one_hot(seg: &Tensor) -> Tensor {
    let s = seg.shape().to_vec();
    assert!(s.len() == 4, "expected (N,C,H,W)");
    let mut out = ArrayD::zeros(IxDyn(&s));
    for ni in 0..s[0] {
        for yi in 0..s[2] {
            for xi in 0..s[3] {
                let mut best = 0;
                let mut best_v = seg[[ni, 0, yi, xi]];
                for ci in 1..s[1] {
                    let v = seg[[ni, ci, yi, xi]];
                    if v > best_v {
                        best_v = v;
                        best = ci;
                    }
                }
                out[[ni, best, yi, xi]] = 1.0;
            }
        }
    }
    out
}
