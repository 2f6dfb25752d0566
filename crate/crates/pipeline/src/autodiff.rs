//! Tape-based reverse-mode autodiff over f32 CPU tensors.
//!
//! Forward evaluation is eager: every op computes its value when recorded,
//! so a [`Graph`] doubles as the tape. [`Graph::backward`] walks the tape in
//! reverse, accumulating gradients only through nodes that can reach a
//! grad-enabled leaf. Shapes are validated by assertions inside the ops; the
//! network layer performs user-facing validation before building graphs.
//!
//! The op set is exactly what the try-on networks need: elementwise math,
//! conv2d via im2col, instance norm, pooling/upsampling, concat, linear,
//! bilinear grid sampling, a thin-plate-spline grid generator that is linear
//! in the destination control points, feature correlation, and a few fused
//! losses (pixel cross-entropy, masked L1, TPS bending).

use std::sync::Arc;

use ndarray::{Array2, ArrayD, IxDyn};

pub type Tensor = ArrayD<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    /// Index into the gradient vector returned by [`Graph::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Input,
    Add,
    Sub,
    Mul,
    Scale(f32),
    AddScalar,
    Relu,
    LeakyRelu(f32),
    Tanh,
    Softplus,
    ChannelSoftmax,
    Conv2d { stride: usize, pad: usize },
    AddBias,
    ChannelAffine,
    InstanceNorm { eps: f32 },
    Linear,
    UpsampleNearest2,
    AvgPool2,
    AdaptiveAvgPool { oh: usize, ow: usize },
    Concat,
    Reshape,
    GridSample,
    TpsGrid { basis: Arc<Array2<f32>>, h: usize, w: usize },
    Correlation,
    ChannelL2Norm { eps: f32 },
    CeLoss { targets: Arc<Vec<usize>> },
    MaskedL1,
    MeanAll,
    Bending { quad: Arc<Array2<f32>> },
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert!(s.len() == 4, "expected 4-d tensor, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn scalar(v: f32) -> Tensor {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f32 {
        let v = &self.nodes[id.0].value;
        assert!(v.len() == 1, "node is not a scalar");
        *v.iter().next().unwrap()
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            op,
            parents,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf tensor. Gradients are tracked only when `requires_grad`.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input,
            parents: vec![],
            value,
            needs_grad: requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let v = self.value(a) + self.value(b);
        self.push(Op::Add, vec![a, b], v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub, vec![a, b], v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul, vec![a, b], v)
    }

    pub fn scale(&mut self, a: NodeId, s: f32) -> NodeId {
        let v = self.value(a) * s;
        self.push(Op::Scale(s), vec![a], v)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f32) -> NodeId {
        let v = self.value(a) + s;
        self.push(Op::AddScalar, vec![a], v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(Op::Relu, vec![a], v)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f32) -> NodeId {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(slope), vec![a], v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f32::tanh);
        self.push(Op::Tanh, vec![a], v)
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(Op::Softplus, vec![a], v)
    }

    /// Softmax over the channel axis of an NCHW tensor.
    pub fn channel_softmax(&mut self, a: NodeId) -> NodeId {
        let (n, c, h, w) = dims4(self.value(a));
        let xv = self.value(a);
        let mut v = xv.clone();
        for ni in 0..n {
            for yi in 0..h {
                for xi in 0..w {
                    let mut mx = f32::NEG_INFINITY;
                    for ci in 0..c {
                        mx = mx.max(xv[[ni, ci, yi, xi]]);
                    }
                    let mut sum = 0.0f32;
                    for ci in 0..c {
                        let e = (xv[[ni, ci, yi, xi]] - mx).exp();
                        v[[ni, ci, yi, xi]] = e;
                        sum += e;
                    }
                    for ci in 0..c {
                        v[[ni, ci, yi, xi]] /= sum;
                    }
                }
            }
        }
        self.push(Op::ChannelSoftmax, vec![a], v)
    }

    /// 2-d convolution, weight layout `(out, in, k, k)`, zero padding.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let v = conv2d_forward(self.value(x), self.value(w), stride, pad);
        self.push(Op::Conv2d { stride, pad }, vec![x, w], v)
    }

    /// Per-channel bias over an NCHW tensor; `b` has shape `(C)`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (n, c, h, w) = dims4(self.value(x));
        assert_eq!(self.value(b).shape(), [c], "bias shape");
        let mut v = self.value(x).clone();
        let bv = self.value(b).clone();
        for ni in 0..n {
            for ci in 0..c {
                let bias = bv[[ci]];
                for yi in 0..h {
                    for xi in 0..w {
                        v[[ni, ci, yi, xi]] += bias;
                    }
                }
            }
        }
        self.push(Op::AddBias, vec![x, b], v)
    }

    /// Per-channel scale and shift: `y = x * w + b`, `w`/`b` of shape `(C)`.
    pub fn channel_affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (n, c, h, wd) = dims4(self.value(x));
        assert_eq!(self.value(w).shape(), [c], "affine weight shape");
        assert_eq!(self.value(b).shape(), [c], "affine bias shape");
        let mut v = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = self.value(b).clone();
        for ni in 0..n {
            for ci in 0..c {
                let (s, o) = (wv[[ci]], bv[[ci]]);
                for yi in 0..h {
                    for xi in 0..wd {
                        let e = &mut v[[ni, ci, yi, xi]];
                        *e = *e * s + o;
                    }
                }
            }
        }
        self.push(Op::ChannelAffine, vec![x, w, b], v)
    }

    /// Normalizes each (sample, channel) plane to zero mean, unit variance.
    pub fn instance_norm(&mut self, x: NodeId, eps: f32) -> NodeId {
        let v = instance_norm_forward(self.value(x), eps);
        self.push(Op::InstanceNorm { eps }, vec![x], v)
    }

    /// Fully connected: x `(N,F)`, w `(O,F)`, b `(O)` -> `(N,O)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear shapes {xs:?} {ws:?}");
        assert_eq!(self.value(b).shape(), [ws[0]], "linear bias");
        let xm = to_mat(self.value(x), xs[0], xs[1]);
        let wm = to_mat(self.value(w), ws[0], ws[1]);
        let mut y = xm.dot(&wm.t());
        let bv = self.value(b).clone();
        for ni in 0..xs[0] {
            for oi in 0..ws[0] {
                y[[ni, oi]] += bv[[oi]];
            }
        }
        let v = y.into_dyn();
        self.push(Op::Linear, vec![x, w, b], v)
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = dims4(self.value(x));
        let mut v = ArrayD::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
        let xv = self.value(x);
        for ni in 0..n {
            for ci in 0..c {
                for yi in 0..h {
                    for xi in 0..w {
                        let val = xv[[ni, ci, yi, xi]];
                        for dy in 0..2 {
                            for dx in 0..2 {
                                v[[ni, ci, 2 * yi + dy, 2 * xi + dx]] = val;
                            }
                        }
                    }
                }
            }
        }
        self.push(Op::UpsampleNearest2, vec![x], v)
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = dims4(self.value(x));
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {h}x{w}");
        let mut v = ArrayD::zeros(IxDyn(&[n, c, h / 2, w / 2]));
        let xv = self.value(x);
        for ni in 0..n {
            for ci in 0..c {
                for yi in 0..h / 2 {
                    for xi in 0..w / 2 {
                        let s = xv[[ni, ci, 2 * yi, 2 * xi]]
                            + xv[[ni, ci, 2 * yi, 2 * xi + 1]]
                            + xv[[ni, ci, 2 * yi + 1, 2 * xi]]
                            + xv[[ni, ci, 2 * yi + 1, 2 * xi + 1]];
                        v[[ni, ci, yi, xi]] = s * 0.25;
                    }
                }
            }
        }
        self.push(Op::AvgPool2, vec![x], v)
    }

    /// Averages over near-equal bins to a fixed output size.
    pub fn adaptive_avg_pool(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let (n, c, h, w) = dims4(self.value(x));
        assert!(oh <= h && ow <= w, "adaptive pool cannot upsample");
        let mut v = ArrayD::zeros(IxDyn(&[n, c, oh, ow]));
        let xv = self.value(x);
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    let (y0, y1) = pool_bin(oy, oh, h);
                    for ox in 0..ow {
                        let (x0, x1) = pool_bin(ox, ow, w);
                        let mut s = 0.0;
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                s += xv[[ni, ci, yy, xx]];
                            }
                        }
                        v[[ni, ci, oy, ox]] = s / ((y1 - y0) * (x1 - x0)) as f32;
                    }
                }
            }
        }
        self.push(Op::AdaptiveAvgPool { oh, ow }, vec![x], v)
    }

    /// Concatenation along the channel axis of NCHW tensors.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (n, _, h, w) = dims4(self.value(parts[0]));
        let mut c_total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = dims4(self.value(p));
            assert!(pn == n && ph == h && pw == w, "concat spatial/batch mismatch");
            c_total += pc;
        }
        let mut v = ArrayD::zeros(IxDyn(&[n, c_total, h, w]));
        let mut c_off = 0;
        for &p in parts {
            let pv = self.value(p);
            let pc = pv.shape()[1];
            for ni in 0..n {
                for ci in 0..pc {
                    for yi in 0..h {
                        for xi in 0..w {
                            v[[ni, c_off + ci, yi, xi]] = pv[[ni, ci, yi, xi]];
                        }
                    }
                }
            }
            c_off += pc;
        }
        self.push(Op::Concat, parts.to_vec(), v)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let numel: usize = shape.iter().product();
        assert_eq!(self.value(x).len(), numel, "reshape element count");
        let flat: Vec<f32> = self.value(x).iter().copied().collect();
        let v = ArrayD::from_shape_vec(IxDyn(shape), flat).unwrap();
        self.push(Op::Reshape, vec![x], v)
    }

    /// Bilinear sampling with border clamp. `grid` is `(N, Ho, Wo, 2)` with
    /// normalized `[x, y]` coordinates in the last axis.
    pub fn grid_sample(&mut self, x: NodeId, grid: NodeId) -> NodeId {
        let v = grid_sample_forward(self.value(x), self.value(grid));
        self.push(Op::GridSample, vec![x, grid], v)
    }

    /// Maps TPS destination control points `(N, 2, K)` to a sampling grid
    /// `(N, h, w, 2)` through a precomputed `(h*w, K)` linear basis.
    pub fn tps_grid(&mut self, dst: NodeId, basis: Arc<Array2<f32>>, h: usize, w: usize) -> NodeId {
        let ds = self.value(dst).shape().to_vec();
        assert!(ds.len() == 3 && ds[1] == 2, "dst points must be (N,2,K)");
        assert_eq!(basis.shape(), [h * w, ds[2]], "basis shape");
        let n = ds[0];
        let k = ds[2];
        let dv = self.value(dst);
        let mut v = ArrayD::zeros(IxDyn(&[n, h, w, 2]));
        for ni in 0..n {
            for (r, row) in basis.outer_iter().enumerate() {
                let (i, j) = (r / w, r % w);
                let mut gx = 0.0;
                let mut gy = 0.0;
                for ki in 0..k {
                    gx += row[ki] * dv[[ni, 0, ki]];
                    gy += row[ki] * dv[[ni, 1, ki]];
                }
                v[[ni, i, j, 0]] = gx;
                v[[ni, i, j, 1]] = gy;
            }
        }
        self.push(Op::TpsGrid { basis, h, w }, vec![dst], v)
    }

    /// Dense feature correlation: output channel `q = qy * Wb + qx` holds
    /// the dot product of `a`'s feature column at each pixel with `b`'s
    /// feature column at `(qy, qx)`.
    pub fn correlation(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, c, ha, wa) = dims4(self.value(a));
        let (nb, cb, hb, wb) = dims4(self.value(b));
        assert!(n == nb && c == cb, "correlation batch/channel mismatch");
        let av = self.value(a);
        let bv = self.value(b);
        let mut v = ArrayD::zeros(IxDyn(&[n, hb * wb, ha, wa]));
        for ni in 0..n {
            for qy in 0..hb {
                for qx in 0..wb {
                    let q = qy * wb + qx;
                    for yi in 0..ha {
                        for xi in 0..wa {
                            let mut s = 0.0;
                            for ci in 0..c {
                                s += av[[ni, ci, yi, xi]] * bv[[ni, ci, qy, qx]];
                            }
                            v[[ni, q, yi, xi]] = s;
                        }
                    }
                }
            }
        }
        self.push(Op::Correlation, vec![a, b], v)
    }

    /// L2-normalizes the channel vector at every pixel.
    pub fn channel_l2_norm(&mut self, x: NodeId, eps: f32) -> NodeId {
        let (n, c, h, w) = dims4(self.value(x));
        let xv = self.value(x);
        let mut v = xv.clone();
        for ni in 0..n {
            for yi in 0..h {
                for xi in 0..w {
                    let mut s = eps;
                    for ci in 0..c {
                        let e = xv[[ni, ci, yi, xi]];
                        s += e * e;
                    }
                    let inv = 1.0 / s.sqrt();
                    for ci in 0..c {
                        v[[ni, ci, yi, xi]] *= inv;
                    }
                }
            }
        }
        self.push(Op::ChannelL2Norm { eps }, vec![x], v)
    }

    /// Mean pixel cross-entropy of `(N,C,H,W)` logits against class indices
    /// (row-major over `(n, h, w)`).
    pub fn ce_loss(&mut self, logits: NodeId, targets: Arc<Vec<usize>>) -> NodeId {
        let (n, c, h, w) = dims4(self.value(logits));
        assert_eq!(targets.len(), n * h * w, "target count");
        let lv = self.value(logits);
        let mut total = 0.0f64;
        for ni in 0..n {
            for yi in 0..h {
                for xi in 0..w {
                    let t = targets[(ni * h + yi) * w + xi];
                    assert!(t < c, "target class {t} out of range");
                    let mut mx = f32::NEG_INFINITY;
                    for ci in 0..c {
                        mx = mx.max(lv[[ni, ci, yi, xi]]);
                    }
                    let mut lse = 0.0f32;
                    for ci in 0..c {
                        lse += (lv[[ni, ci, yi, xi]] - mx).exp();
                    }
                    total += (lse.ln() + mx - lv[[ni, t, yi, xi]]) as f64;
                }
            }
        }
        let v = scalar((total / (n * h * w) as f64) as f32);
        self.push(Op::CeLoss { targets }, vec![logits], v)
    }

    /// `sum(|pred - target| * mask) / max(sum(mask), 1e-6)`. All three
    /// tensors share a shape; gradients flow to `pred` (and `target` when
    /// it is grad-enabled), never to the mask.
    pub fn masked_l1(&mut self, pred: NodeId, target: NodeId, mask: NodeId) -> NodeId {
        let shape = self.value(pred).shape().to_vec();
        assert_eq!(self.value(target).shape(), &shape[..], "masked_l1 target shape");
        assert_eq!(self.value(mask).shape(), &shape[..], "masked_l1 mask shape");
        let p = self.value(pred);
        let t = self.value(target);
        let m = self.value(mask);
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for ((pv, tv), mv) in p.iter().zip(t.iter()).zip(m.iter()) {
            num += ((pv - tv).abs() * mv) as f64;
            den += *mv as f64;
        }
        let v = scalar((num / den.max(1e-6)) as f32);
        self.push(Op::MaskedL1, vec![pred, target, mask], v)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len();
        let v = scalar(self.value(x).iter().sum::<f32>() / n as f32);
        self.push(Op::MeanAll, vec![x], v)
    }

    /// TPS bending energy `mean_n sum_dim dst^T Q dst` for destination
    /// points `(N, 2, K)` and the fixed control layout's quadratic form.
    pub fn bending(&mut self, dst: NodeId, quad: Arc<Array2<f32>>) -> NodeId {
        let ds = self.value(dst).shape().to_vec();
        assert!(ds.len() == 3 && ds[1] == 2, "dst points must be (N,2,K)");
        let k = ds[2];
        assert_eq!(quad.shape(), [k, k], "quadratic form shape");
        let dv = self.value(dst);
        let mut total = 0.0f64;
        for ni in 0..ds[0] {
            for d in 0..2 {
                for i in 0..k {
                    for j in 0..k {
                        total += (dv[[ni, d, i]] * quad[[i, j]] * dv[[ni, d, j]]) as f64;
                    }
                }
            }
        }
        let v = scalar((total / ds[0] as f64) as f32);
        self.push(Op::Bending { quad }, vec![dst], v)
    }

    /// Reverse pass from a scalar root; returns per-node gradients (None
    /// for nodes the root does not depend on, or that need no gradient).
    pub fn backward(&mut self, root: NodeId) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.accumulate_parents(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads
    }

    fn accumulate_parents(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let parents = &node.parents;
        let send = |pid: NodeId, delta: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[pid.0].needs_grad {
                return;
            }
            match &mut grads[pid.0] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Input => {}
            Op::Add => {
                send(parents[0], g.clone(), grads);
                send(parents[1], g.clone(), grads);
            }
            Op::Sub => {
                send(parents[0], g.clone(), grads);
                send(parents[1], g * -1.0, grads);
            }
            Op::Mul => {
                send(parents[0], g * &self.nodes[parents[1].0].value, grads);
                send(parents[1], g * &self.nodes[parents[0].0].value, grads);
            }
            Op::Scale(s) => send(parents[0], g * *s, grads),
            Op::AddScalar => send(parents[0], g.clone(), grads),
            Op::Relu => {
                let x = &self.nodes[parents[0].0].value;
                let mut d = g.clone();
                d.zip_mut_with(x, |gv, xv| {
                    if *xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                send(parents[0], d, grads);
            }
            Op::LeakyRelu(slope) => {
                let x = &self.nodes[parents[0].0].value;
                let mut d = g.clone();
                let s = *slope;
                d.zip_mut_with(x, |gv, xv| {
                    if *xv <= 0.0 {
                        *gv *= s;
                    }
                });
                send(parents[0], d, grads);
            }
            Op::Tanh => {
                let y = &node.value;
                let mut d = g.clone();
                d.zip_mut_with(y, |gv, yv| *gv *= 1.0 - yv * yv);
                send(parents[0], d, grads);
            }
            Op::Softplus => {
                let x = &self.nodes[parents[0].0].value;
                let mut d = g.clone();
                d.zip_mut_with(x, |gv, xv| *gv *= 1.0 / (1.0 + (-xv).exp()));
                send(parents[0], d, grads);
            }
            Op::ChannelSoftmax => {
                // d x_c = y_c * (g_c - sum_k g_k y_k) per pixel.
                let y = &node.value;
                let (n, c, h, w) = dims4(y);
                let mut gx = ArrayD::zeros(y.raw_dim());
                for ni in 0..n {
                    for yi in 0..h {
                        for xi in 0..w {
                            let mut dot = 0.0f32;
                            for ci in 0..c {
                                dot += g[[ni, ci, yi, xi]] * y[[ni, ci, yi, xi]];
                            }
                            for ci in 0..c {
                                gx[[ni, ci, yi, xi]] =
                                    y[[ni, ci, yi, xi]] * (g[[ni, ci, yi, xi]] - dot);
                            }
                        }
                    }
                }
                send(parents[0], gx, grads);
            }
            Op::Conv2d { stride, pad } => {
                let x = &self.nodes[parents[0].0].value;
                let w = &self.nodes[parents[1].0].value;
                let (gx, gw) = conv2d_backward(x, w, g, *stride, *pad);
                send(parents[0], gx, grads);
                send(parents[1], gw, grads);
            }
            Op::AddBias => {
                send(parents[0], g.clone(), grads);
                let (n, c, h, w) = dims4(&node.value);
                let mut gb = ArrayD::zeros(IxDyn(&[c]));
                for ni in 0..n {
                    for ci in 0..c {
                        let mut s = 0.0;
                        for yi in 0..h {
                            for xi in 0..w {
                                s += g[[ni, ci, yi, xi]];
                            }
                        }
                        gb[[ci]] += s;
                    }
                }
                send(parents[1], gb, grads);
            }
            Op::ChannelAffine => {
                let x = &self.nodes[parents[0].0].value;
                let w = &self.nodes[parents[1].0].value;
                let (n, c, h, wd) = dims4(x);
                let mut gx = g.clone();
                for ni in 0..n {
                    for ci in 0..c {
                        let s = w[[ci]];
                        for yi in 0..h {
                            for xi in 0..wd {
                                gx[[ni, ci, yi, xi]] *= s;
                            }
                        }
                    }
                }
                send(parents[0], gx, grads);
                let mut gw = ArrayD::zeros(IxDyn(&[c]));
                let mut gb = ArrayD::zeros(IxDyn(&[c]));
                for ni in 0..n {
                    for ci in 0..c {
                        let mut sw = 0.0;
                        let mut sb = 0.0;
                        for yi in 0..h {
                            for xi in 0..wd {
                                sw += g[[ni, ci, yi, xi]] * x[[ni, ci, yi, xi]];
                                sb += g[[ni, ci, yi, xi]];
                            }
                        }
                        gw[[ci]] += sw;
                        gb[[ci]] += sb;
                    }
                }
                send(parents[1], gw, grads);
                send(parents[2], gb, grads);
            }
            Op::InstanceNorm { eps } => {
                let x = &self.nodes[parents[0].0].value;
                send(parents[0], instance_norm_backward(x, &node.value, g, *eps), grads);
            }
            Op::Linear => {
                let x = &self.nodes[parents[0].0].value;
                let w = &self.nodes[parents[1].0].value;
                let (n, f) = (x.shape()[0], x.shape()[1]);
                let o = w.shape()[0];
                let gm = to_mat(g, n, o);
                let xm = to_mat(x, n, f);
                let wm = to_mat(w, o, f);
                send(parents[0], gm.dot(&wm).into_dyn(), grads);
                send(parents[1], gm.t().dot(&xm).into_dyn(), grads);
                let mut gb = ArrayD::zeros(IxDyn(&[o]));
                for ni in 0..n {
                    for oi in 0..o {
                        gb[[oi]] += g[[ni, oi]];
                    }
                }
                send(parents[2], gb, grads);
            }
            Op::UpsampleNearest2 => {
                let (n, c, h2, w2) = dims4(&node.value);
                let (h, w) = (h2 / 2, w2 / 2);
                let mut gx = ArrayD::zeros(IxDyn(&[n, c, h, w]));
                for ni in 0..n {
                    for ci in 0..c {
                        for yi in 0..h {
                            for xi in 0..w {
                                let mut s = 0.0;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        s += g[[ni, ci, 2 * yi + dy, 2 * xi + dx]];
                                    }
                                }
                                gx[[ni, ci, yi, xi]] = s;
                            }
                        }
                    }
                }
                send(parents[0], gx, grads);
            }
            Op::AvgPool2 => {
                let (n, c, ho, wo) = dims4(&node.value);
                let mut gx = ArrayD::zeros(IxDyn(&[n, c, 2 * ho, 2 * wo]));
                for ni in 0..n {
                    for ci in 0..c {
                        for yi in 0..ho {
                            for xi in 0..wo {
                                let gv = g[[ni, ci, yi, xi]] * 0.25;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        gx[[ni, ci, 2 * yi + dy, 2 * xi + dx]] = gv;
                                    }
                                }
                            }
                        }
                    }
                }
                send(parents[0], gx, grads);
            }
            Op::AdaptiveAvgPool { oh, ow } => {
                let x = &self.nodes[parents[0].0].value;
                let (n, c, h, w) = dims4(x);
                let mut gx = ArrayD::zeros(IxDyn(&[n, c, h, w]));
                for ni in 0..n {
                    for ci in 0..c {
                        for oy in 0..*oh {
                            let (y0, y1) = pool_bin(oy, *oh, h);
                            for ox in 0..*ow {
                                let (x0, x1) = pool_bin(ox, *ow, w);
                                let gv = g[[ni, ci, oy, ox]] / ((y1 - y0) * (x1 - x0)) as f32;
                                for yy in y0..y1 {
                                    for xx in x0..x1 {
                                        gx[[ni, ci, yy, xx]] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                send(parents[0], gx, grads);
            }
            Op::Concat => {
                let (n, _, h, w) = dims4(&node.value);
                let mut c_off = 0;
                for &p in parents {
                    let pc = self.nodes[p.0].value.shape()[1];
                    if self.nodes[p.0].needs_grad {
                        let mut gp = ArrayD::zeros(IxDyn(&[n, pc, h, w]));
                        for ni in 0..n {
                            for ci in 0..pc {
                                for yi in 0..h {
                                    for xi in 0..w {
                                        gp[[ni, ci, yi, xi]] = g[[ni, c_off + ci, yi, xi]];
                                    }
                                }
                            }
                        }
                        send(p, gp, grads);
                    }
                    c_off += pc;
                }
            }
            Op::Reshape => {
                let pshape = self.nodes[parents[0].0].value.shape().to_vec();
                let flat: Vec<f32> = g.iter().copied().collect();
                send(
                    parents[0],
                    ArrayD::from_shape_vec(IxDyn(&pshape), flat).unwrap(),
                    grads,
                );
            }
            Op::GridSample => {
                let x = &self.nodes[parents[0].0].value;
                let grid = &self.nodes[parents[1].0].value;
                let (gx, ggrid) = grid_sample_backward(x, grid, g);
                send(parents[0], gx, grads);
                send(parents[1], ggrid, grads);
            }
            Op::TpsGrid { basis, h, w } => {
                let ds = self.nodes[parents[0].0].value.shape().to_vec();
                let (n, k) = (ds[0], ds[2]);
                let mut gd = ArrayD::zeros(IxDyn(&[n, 2, k]));
                for ni in 0..n {
                    for (r, row) in basis.outer_iter().enumerate() {
                        let (i, j) = (r / w, r % w);
                        let (gx, gy) = (g[[ni, i, j, 0]], g[[ni, i, j, 1]]);
                        for ki in 0..k {
                            gd[[ni, 0, ki]] += row[ki] * gx;
                            gd[[ni, 1, ki]] += row[ki] * gy;
                        }
                    }
                }
                let _ = h;
                send(parents[0], gd, grads);
            }
            Op::Correlation => {
                let a = &self.nodes[parents[0].0].value;
                let b = &self.nodes[parents[1].0].value;
                let (n, c, ha, wa) = dims4(a);
                let (_, _, hb, wb) = dims4(b);
                let mut ga = ArrayD::zeros(a.raw_dim());
                let mut gb = ArrayD::zeros(b.raw_dim());
                for ni in 0..n {
                    for qy in 0..hb {
                        for qx in 0..wb {
                            let q = qy * wb + qx;
                            for yi in 0..ha {
                                for xi in 0..wa {
                                    let gv = g[[ni, q, yi, xi]];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c {
                                        ga[[ni, ci, yi, xi]] += gv * b[[ni, ci, qy, qx]];
                                        gb[[ni, ci, qy, qx]] += gv * a[[ni, ci, yi, xi]];
                                    }
                                }
                            }
                        }
                    }
                }
                send(parents[0], ga, grads);
                send(parents[1], gb, grads);
            }
            Op::ChannelL2Norm { eps } => {
                let x = &self.nodes[parents[0].0].value;
                let (n, c, h, w) = dims4(x);
                let mut gx = ArrayD::zeros(x.raw_dim());
                for ni in 0..n {
                    for yi in 0..h {
                        for xi in 0..w {
                            let mut s = *eps;
                            let mut dot = 0.0;
                            for ci in 0..c {
                                let e = x[[ni, ci, yi, xi]];
                                s += e * e;
                                dot += g[[ni, ci, yi, xi]] * e;
                            }
                            let norm = s.sqrt();
                            let inv3 = 1.0 / (norm * norm * norm);
                            for ci in 0..c {
                                gx[[ni, ci, yi, xi]] = g[[ni, ci, yi, xi]] / norm
                                    - x[[ni, ci, yi, xi]] * dot * inv3;
                            }
                        }
                    }
                }
                send(parents[0], gx, grads);
            }
            Op::CeLoss { targets } => {
                let logits = &self.nodes[parents[0].0].value;
                let (n, c, h, w) = dims4(logits);
                let gs = g.iter().next().copied().unwrap() / (n * h * w) as f32;
                let mut gl = ArrayD::zeros(logits.raw_dim());
                for ni in 0..n {
                    for yi in 0..h {
                        for xi in 0..w {
                            let t = targets[(ni * h + yi) * w + xi];
                            let mut mx = f32::NEG_INFINITY;
                            for ci in 0..c {
                                mx = mx.max(logits[[ni, ci, yi, xi]]);
                            }
                            let mut lse = 0.0f32;
                            for ci in 0..c {
                                lse += (logits[[ni, ci, yi, xi]] - mx).exp();
                            }
                            for ci in 0..c {
                                let p = (logits[[ni, ci, yi, xi]] - mx).exp() / lse;
                                let ind = if ci == t { 1.0 } else { 0.0 };
                                gl[[ni, ci, yi, xi]] = (p - ind) * gs;
                            }
                        }
                    }
                }
                send(parents[0], gl, grads);
            }
            Op::MaskedL1 => {
                let p = &self.nodes[parents[0].0].value;
                let t = &self.nodes[parents[1].0].value;
                let m = &self.nodes[parents[2].0].value;
                let den: f64 = m.iter().map(|&v| v as f64).sum::<f64>().max(1e-6);
                let gs = g.iter().next().copied().unwrap() / den as f32;
                let mut gp = ArrayD::zeros(p.raw_dim());
                for ((slot, (pv, tv)), mv) in
                    gp.iter_mut().zip(p.iter().zip(t.iter())).zip(m.iter())
                {
                    let sign = if pv > tv {
                        1.0
                    } else if pv < tv {
                        -1.0
                    } else {
                        0.0
                    };
                    *slot = sign * mv * gs;
                }
                if self.nodes[parents[1].0].needs_grad {
                    send(parents[1], &gp * -1.0, grads);
                }
                send(parents[0], gp, grads);
            }
            Op::MeanAll => {
                let x = &self.nodes[parents[0].0].value;
                let gs = g.iter().next().copied().unwrap() / x.len() as f32;
                send(parents[0], ArrayD::from_elem(x.raw_dim(), gs), grads);
            }
            Op::Bending { quad } => {
                let dst = &self.nodes[parents[0].0].value;
                let ds = dst.shape().to_vec();
                let (n, k) = (ds[0], ds[2]);
                let gs = g.iter().next().copied().unwrap() / n as f32;
                let mut gd = ArrayD::zeros(dst.raw_dim());
                for ni in 0..n {
                    for d in 0..2 {
                        for i in 0..k {
                            let mut s = 0.0;
                            for j in 0..k {
                                s += (quad[[i, j]] + quad[[j, i]]) * dst[[ni, d, j]];
                            }
                            gd[[ni, d, i]] = s * gs;
                        }
                    }
                }
                send(parents[0], gd, grads);
            }
        }
    }
}

fn pool_bin(o: usize, out: usize, size: usize) -> (usize, usize) {
    let start = o * size / out;
    let end = ((o + 1) * size).div_ceil(out);
    (start, end.max(start + 1).min(size))
}

fn to_mat(t: &Tensor, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_vec((rows, cols), t.iter().copied().collect()).unwrap()
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &Tensor,
    ni: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f32> {
    let (_, c, h, w) = dims4(x);
    let mut col = Array2::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..ho {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        col[[row, oy * wo + ox]] = x[[ni, ci, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    col
}

fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = dims4(x);
    let (cout, cin2, k, k2) = dims4(w);
    assert!(cin == cin2 && k == k2, "conv weight mismatch: x has {cin} channels, w is {cin2}x{k}x{k2}");
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(wd, k, stride, pad);
    let wm = to_mat(w, cout, cin * k * k);
    let mut y = ArrayD::zeros(IxDyn(&[n, cout, ho, wo]));
    for ni in 0..n {
        let col = im2col(x, ni, k, stride, pad, ho, wo);
        let out = wm.dot(&col);
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    y[[ni, co, oy, ox]] = out[[co, oy * wo + ox]];
                }
            }
        }
    }
    y
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor) {
    let (n, cin, h, wd) = dims4(x);
    let (cout, _, k, _) = dims4(w);
    let (_, _, ho, wo) = dims4(g);
    let wm = to_mat(w, cout, cin * k * k);
    let mut gx = ArrayD::zeros(x.raw_dim());
    let mut gw_mat: Array2<f32> = Array2::zeros((cout, cin * k * k));
    for ni in 0..n {
        let mut gm = Array2::zeros((cout, ho * wo));
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    gm[[co, oy * wo + ox]] = g[[ni, co, oy, ox]];
                }
            }
        }
        let col = im2col(x, ni, k, stride, pad, ho, wo);
        gw_mat += &gm.dot(&col.t());
        let gcol = wm.t().dot(&gm);
        // col2im: scatter-add back through the same indexing as im2col.
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..ho {
                        let sy = (oy * stride + ky) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let sx = (ox * stride + kx) as isize - pad as isize;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            gx[[ni, ci, sy as usize, sx as usize]] += gcol[[row, oy * wo + ox]];
                        }
                    }
                }
            }
        }
    }
    let gw = ArrayD::from_shape_vec(w.raw_dim(), gw_mat.into_iter().collect()).unwrap();
    (gx, gw)
}

fn instance_norm_forward(x: &Tensor, eps: f32) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let m = (h * w) as f64;
    let mut y = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for yi in 0..h {
                for xi in 0..w {
                    let v = x[[ni, ci, yi, xi]] as f64;
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / m;
            let var = (sq / m - mean * mean).max(0.0);
            let inv = 1.0 / (var + eps as f64).sqrt();
            for yi in 0..h {
                for xi in 0..w {
                    let v = &mut y[[ni, ci, yi, xi]];
                    *v = ((*v as f64 - mean) * inv) as f32;
                }
            }
        }
    }
    y
}

fn instance_norm_backward(x: &Tensor, y: &Tensor, g: &Tensor, eps: f32) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let m = (h * w) as f64;
    let mut gx = ArrayD::zeros(x.raw_dim());
    for ni in 0..n {
        for ci in 0..c {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for yi in 0..h {
                for xi in 0..w {
                    let v = x[[ni, ci, yi, xi]] as f64;
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / m;
            let var = (sq / m - mean * mean).max(0.0);
            let inv = 1.0 / (var + eps as f64).sqrt();
            let mut gsum = 0.0f64;
            let mut gdot = 0.0f64;
            for yi in 0..h {
                for xi in 0..w {
                    let gv = g[[ni, ci, yi, xi]] as f64;
                    gsum += gv;
                    gdot += gv * y[[ni, ci, yi, xi]] as f64;
                }
            }
            for yi in 0..h {
                for xi in 0..w {
                    let gv = g[[ni, ci, yi, xi]] as f64;
                    let yv = y[[ni, ci, yi, xi]] as f64;
                    gx[[ni, ci, yi, xi]] = (inv * (gv - gsum / m - yv * gdot / m)) as f32;
                }
            }
        }
    }
    gx
}

fn unnormalize(coord: f32, size: usize) -> f32 {
    (coord + 1.0) * size as f32 / 2.0 - 0.5
}

/// Absorbs float noise in grid coordinates that are meant to hit pixel
/// centers, so an identity grid copies the image bit-exactly.
fn snap_to_center(pos: f32, h: usize, w: usize) -> f32 {
    let snap = f32::EPSILON * h.max(w) as f32 * 4.0;
    let r = pos.round();
    if (pos - r).abs() < snap {
        r
    } else {
        pos
    }
}

fn grid_sample_forward(x: &Tensor, grid: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let gs = grid.shape();
    assert!(gs.len() == 4 && gs[3] == 2, "grid must be (N,Ho,Wo,2)");
    assert_eq!(gs[0], n, "grid batch");
    let (ho, wo) = (gs[1], gs[2]);
    let mut y = ArrayD::zeros(IxDyn(&[n, c, ho, wo]));
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let sx = snap_to_center(unnormalize(grid[[ni, oy, ox, 0]], w), h, w)
                    .clamp(0.0, (w - 1) as f32);
                let sy = snap_to_center(unnormalize(grid[[ni, oy, ox, 1]], h), h, w)
                    .clamp(0.0, (h - 1) as f32);
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fx = sx - x0 as f32;
                let fy = sy - y0 as f32;
                for ci in 0..c {
                    let v00 = x[[ni, ci, y0, x0]];
                    let v01 = x[[ni, ci, y0, x1]];
                    let v10 = x[[ni, ci, y1, x0]];
                    let v11 = x[[ni, ci, y1, x1]];
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    y[[ni, ci, oy, ox]] = top + (bot - top) * fy;
                }
            }
        }
    }
    y
}

fn grid_sample_backward(x: &Tensor, grid: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (n, c, h, w) = dims4(x);
    let gs = grid.shape();
    let (ho, wo) = (gs[1], gs[2]);
    let mut gx = ArrayD::zeros(x.raw_dim());
    let mut ggrid = ArrayD::zeros(grid.raw_dim());
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let rx = snap_to_center(unnormalize(grid[[ni, oy, ox, 0]], w), h, w);
                let ry = snap_to_center(unnormalize(grid[[ni, oy, ox, 1]], h), h, w);
                let x_cl = rx.clamp(0.0, (w - 1) as f32);
                let y_cl = ry.clamp(0.0, (h - 1) as f32);
                // Zero positional gradient where the clamp is active.
                let dx_d = if rx > 0.0 && rx < (w - 1) as f32 {
                    w as f32 / 2.0
                } else {
                    0.0
                };
                let dy_d = if ry > 0.0 && ry < (h - 1) as f32 {
                    h as f32 / 2.0
                } else {
                    0.0
                };
                let x0 = x_cl.floor() as usize;
                let y0 = y_cl.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fx = x_cl - x0 as f32;
                let fy = y_cl - y0 as f32;
                let mut gpx = 0.0;
                let mut gpy = 0.0;
                for ci in 0..c {
                    let gv = g[[ni, ci, oy, ox]];
                    if gv == 0.0 {
                        continue;
                    }
                    let v00 = x[[ni, ci, y0, x0]];
                    let v01 = x[[ni, ci, y0, x1]];
                    let v10 = x[[ni, ci, y1, x0]];
                    let v11 = x[[ni, ci, y1, x1]];
                    gx[[ni, ci, y0, x0]] += gv * (1.0 - fx) * (1.0 - fy);
                    gx[[ni, ci, y0, x1]] += gv * fx * (1.0 - fy);
                    gx[[ni, ci, y1, x0]] += gv * (1.0 - fx) * fy;
                    gx[[ni, ci, y1, x1]] += gv * fx * fy;
                    gpx += gv * ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy);
                    gpy += gv * ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx);
                }
                ggrid[[ni, oy, ox, 0]] = gpx * dx_d;
                ggrid[[ni, oy, ox, 1]] = gpy * dy_d;
            }
        }
    }
    (gx, ggrid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Central-difference gradient check of a scalar-valued builder. All
    /// inputs are grad-enabled; every coordinate of each is probed.
    fn grad_check<F>(build: F, inputs: &[Tensor], h: f32, tol: f32)
    where
        F: Fn(&mut Graph, &[NodeId]) -> NodeId,
    {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
        let out = build(&mut g, &ids);
        assert_eq!(g.value(out).len(), 1, "grad_check needs a scalar output");
        let grads = g.backward(out);
        let eval = |perturbed: &[Tensor]| -> f64 {
            let mut g2 = Graph::new();
            let ids2: Vec<NodeId> = perturbed.iter().map(|t| g2.input(t.clone(), true)).collect();
            let out2 = build(&mut g2, &ids2);
            g2.scalar_value(out2) as f64
        };
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads[ids[i].0]
                .as_ref()
                .unwrap_or_else(|| panic!("no gradient for input {i}"));
            for flat in 0..t.len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                {
                    let p = plus[i].as_slice_mut().unwrap();
                    p[flat] += h;
                    let m = minus[i].as_slice_mut().unwrap();
                    m[flat] -= h;
                }
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
                let an = analytic.as_slice().unwrap()[flat] as f64;
                let err = (an - fd).abs();
                let scale = an.abs().max(fd.abs()).max(1.0);
                assert!(
                    err <= tol as f64 * scale,
                    "input {i} flat {flat}: analytic {an:.6} vs fd {fd:.6} (err {err:.2e})"
                );
            }
        }
    }

    #[test]
    fn elementwise_ops_grad() {
        let a = rand_tensor(&[2, 3], 1, -1.0, 1.0);
        let b = rand_tensor(&[2, 3], 2, -1.0, 1.0);
        grad_check(
            |g, ids| {
                let s = g.add(ids[0], ids[1]);
                let d = g.sub(s, ids[1]);
                let m = g.mul(d, ids[1]);
                let sc = g.scale(m, 1.7);
                let o = g.add_scalar(sc, 0.3);
                g.mean_all(o)
            },
            &[a, b],
            1e-3,
            1e-2,
        );
    }

    #[test]
    fn activation_ops_grad() {
        // Keep values away from the relu kink at 0.
        let mut a = rand_tensor(&[2, 5], 3, -1.0, 1.0);
        a.mapv_inplace(|v| if v.abs() < 0.1 { v + 0.2 } else { v });
        grad_check(
            |g, ids| {
                let r = g.relu(ids[0]);
                let l = g.leaky_relu(ids[0], 0.2);
                let t = g.tanh(ids[0]);
                let s1 = g.add(r, l);
                let s2 = g.add(s1, t);
                g.mean_all(s2)
            },
            &[a],
            1e-3,
            1e-2,
        );
    }

    #[test]
    fn conv2d_grad_and_batching() {
        let x = rand_tensor(&[2, 3, 5, 4], 4, -1.0, 1.0);
        let w = rand_tensor(&[4, 3, 3, 3], 5, -0.5, 0.5);
        grad_check(
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], 1, 1);
                g.mean_all(y)
            },
            &[x.clone(), w.clone()],
            1e-3,
            1e-2,
        );
        // Strided variant.
        grad_check(
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], 2, 1);
                g.mean_all(y)
            },
            &[x.clone(), w.clone()],
            1e-3,
            1e-2,
        );
        // Batch consistency: item k of a batched forward equals the
        // single-item forward.
        let mut g = Graph::new();
        let xb = g.input(x.clone(), false);
        let wb = g.input(w.clone(), false);
        let yb = g.conv2d(xb, wb, 1, 1);
        for item in 0..2 {
            let xi = x.slice(ndarray::s![item..item + 1, .., .., ..]).to_owned().into_dyn();
            let mut g1 = Graph::new();
            let x1 = g1.input(xi, false);
            let w1 = g1.input(w.clone(), false);
            let y1 = g1.conv2d(x1, w1, 1, 1);
            let full = g.value(yb).slice(ndarray::s![item..item + 1, .., .., ..]).to_owned();
            let single = g1.value(y1).clone();
            for (a, b) in full.iter().zip(single.iter()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn bias_affine_linear_grad() {
        let x = rand_tensor(&[2, 3, 4, 3], 6, -1.0, 1.0);
        let b = rand_tensor(&[3], 7, -0.5, 0.5);
        let w = rand_tensor(&[3], 8, 0.5, 1.5);
        grad_check(
            |g, ids| {
                let y = g.add_bias(ids[0], ids[1]);
                let z = g.channel_affine(y, ids[2], ids[1]);
                g.mean_all(z)
            },
            &[x, b, w],
            1e-3,
            1e-2,
        );
        let xl = rand_tensor(&[3, 6], 9, -1.0, 1.0);
        let wl = rand_tensor(&[4, 6], 10, -0.5, 0.5);
        let bl = rand_tensor(&[4], 11, -0.5, 0.5);
        grad_check(
            |g, ids| {
                let y = g.linear(ids[0], ids[1], ids[2]);
                let t = g.tanh(y);
                g.mean_all(t)
            },
            &[xl, wl, bl],
            1e-3,
            1e-2,
        );
    }

    #[test]
    fn instance_norm_grad_and_statistics() {
        let x = rand_tensor(&[2, 3, 4, 5], 12, -2.0, 2.0);
        let mut g = Graph::new();
        let xi = g.input(x.clone(), false);
        let y = g.instance_norm(xi, 1e-5);
        let yv = g.value(y);
        for ni in 0..2 {
            for ci in 0..3 {
                let mut mean = 0.0f64;
                let mut var = 0.0f64;
                for yi in 0..4 {
                    for xi2 in 0..5 {
                        mean += yv[[ni, ci, yi, xi2]] as f64;
                    }
                }
                mean /= 20.0;
                for yi in 0..4 {
                    for xi2 in 0..5 {
                        var += (yv[[ni, ci, yi, xi2]] as f64 - mean).powi(2);
                    }
                }
                var /= 20.0;
                assert!(mean.abs() < 1e-5, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-3, "var {var}");
            }
        }
        // Gradient check with a non-symmetric readout (mean of tanh) so the
        // normalization terms matter.
        grad_check(
            |g, ids| {
                let n = g.instance_norm(ids[0], 1e-5);
                let w = g.tanh(n);
                g.mean_all(w)
            },
            &[x],
            1e-3,
            1.5e-2,
        );
    }

    #[test]
    fn pooling_and_upsample_grad() {
        let x = rand_tensor(&[1, 2, 4, 6], 13, -1.0, 1.0);
        grad_check(
            |g, ids| {
                let u = g.upsample_nearest2(ids[0]);
                let p = g.avg_pool2(u);
                let a = g.adaptive_avg_pool(p, 3, 3);
                let t = g.tanh(a);
                g.mean_all(t)
            },
            &[x],
            1e-3,
            1e-2,
        );
    }

    #[test]
    fn adaptive_pool_identity_when_sizes_match() {
        let x = rand_tensor(&[1, 2, 4, 3], 14, -1.0, 1.0);
        let mut g = Graph::new();
        let xi = g.input(x.clone(), false);
        let y = g.adaptive_avg_pool(xi, 4, 3);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn concat_reshape_grad() {
        let a = rand_tensor(&[2, 2, 3, 3], 15, -1.0, 1.0);
        let b = rand_tensor(&[2, 3, 3, 3], 16, -1.0, 1.0);
        grad_check(
            |g, ids| {
                let c = g.concat(&[ids[0], ids[1]]);
                let r = g.reshape(c, &[2, 45]);
                let t = g.tanh(r);
                g.mean_all(t)
            },
            &[a, b],
            1e-3,
            1e-2,
        );
    }

    #[test]
    fn grid_sample_matches_core_warp_and_grads() {
        // Forward agreement with the reference scalar implementation.
        let x = rand_tensor(&[1, 2, 5, 5], 17, 0.0, 1.0);
        let grid = rand_tensor(&[1, 4, 4, 2], 18, -0.9, 0.9);
        let mut g = Graph::new();
        let xi = g.input(x.clone(), false);
        let gi = g.input(grid.clone(), false);
        let y = g.grid_sample(xi, gi);
        let mut img = tryon_core::raster::Raster::<f32>::zeros(2, 5, 5);
        for c in 0..2 {
            for yy in 0..5 {
                for xx in 0..5 {
                    img.set(c, yy, xx, x[[0, c, yy, xx]]);
                }
            }
        }
        let mut coords = Vec::new();
        for yy in 0..4 {
            for xx in 0..4 {
                coords.push([grid[[0, yy, xx, 0]], grid[[0, yy, xx, 1]]]);
            }
        }
        let core_grid = tryon_core::tps::SamplingGrid { h: 4, w: 4, coords };
        let warped = tryon_core::tps::warp_image(&img, &core_grid);
        for c in 0..2 {
            for yy in 0..4 {
                for xx in 0..4 {
                    assert!((g.value(y)[[0, c, yy, xx]] - warped.get(c, yy, xx)).abs() < 1e-5);
                }
            }
        }
        // Gradients w.r.t. both image and grid.
        grad_check(
            |g, ids| {
                let s = g.grid_sample(ids[0], ids[1]);
                let t = g.tanh(s);
                g.mean_all(t)
            },
            &[x, grid],
            1e-3,
            1.5e-2,
        );
    }

    #[test]
    fn tps_grid_linear_in_dst_and_grad() {
        let src: Vec<[f32; 2]> = tryon_core::tps::canonical_control_grid(3, 3);
        let basis_flat = tryon_core::tps::tps_linear_basis(&src, 1e-3f32, 6, 5).unwrap();
        let basis = Arc::new(Array2::from_shape_vec((30, 9), basis_flat).unwrap());
        let dst = rand_tensor(&[2, 2, 9], 19, -1.0, 1.0);
        let b2 = basis.clone();
        grad_check(
            move |g, ids| {
                let grid = g.tps_grid(ids[0], b2.clone(), 6, 5);
                let t = g.tanh(grid);
                g.mean_all(t)
            },
            &[dst.clone()],
            1e-3,
            1e-2,
        );
        // Linearity: grid(2 * dst) = 2 * grid(dst).
        let mut g = Graph::new();
        let d1 = g.input(dst.clone(), false);
        let grid1 = g.tps_grid(d1, basis.clone(), 6, 5);
        let d2 = g.input(&dst * 2.0, false);
        let grid2 = g.tps_grid(d2, basis, 6, 5);
        for (a, b) in g.value(grid1).iter().zip(g.value(grid2).iter()) {
            assert!((2.0 * a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn correlation_and_l2norm_grad() {
        let a = rand_tensor(&[1, 3, 3, 2], 20, -1.0, 1.0);
        let b = rand_tensor(&[1, 3, 2, 2], 21, -1.0, 1.0);
        grad_check(
            |g, ids| {
                let na = g.channel_l2_norm(ids[0], 1e-4);
                let nb = g.channel_l2_norm(ids[1], 1e-4);
                let c = g.correlation(na, nb);
                let t = g.tanh(c);
                g.mean_all(t)
            },
            &[a.clone(), b.clone()],
            1e-3,
            1.5e-2,
        );
        // Correlation against a hand-computed value.
        let mut g = Graph::new();
        let ai = g.input(a.clone(), false);
        let bi = g.input(b.clone(), false);
        let c = g.correlation(ai, bi);
        let mut expect = 0.0;
        for ci in 0..3 {
            expect += a[[0, ci, 1, 0]] * b[[0, ci, 1, 1]];
        }
        assert!((g.value(c)[[0, 3, 1, 0]] - expect).abs() < 1e-5);
    }

    #[test]
    fn ce_loss_grad_and_value() {
        let logits = rand_tensor(&[2, 4, 2, 2], 22, -1.0, 1.0);
        let targets: Arc<Vec<usize>> = Arc::new(vec![0, 1, 2, 3, 3, 2, 1, 0]);
        let t2 = targets.clone();
        grad_check(
            move |g, ids| g.ce_loss(ids[0], t2.clone()),
            &[logits.clone()],
            1e-3,
            1e-2,
        );
        // Uniform logits give ln(C).
        let mut g = Graph::new();
        let u = g.input(ArrayD::zeros(IxDyn(&[1, 4, 1, 1])), false);
        let l = g.ce_loss(u, Arc::new(vec![2]));
        assert!((g.scalar_value(l) - 4.0f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn masked_l1_grad_and_value() {
        let p = rand_tensor(&[1, 2, 3, 3], 23, -1.0, 1.0);
        let t = rand_tensor(&[1, 2, 3, 3], 24, -1.0, 1.0);
        let mut mask = ArrayD::zeros(IxDyn(&[1, 2, 3, 3]));
        for (i, v) in mask.iter_mut().enumerate() {
            if i % 3 != 0 {
                *v = 1.0;
            }
        }
        let (t_c, m_c) = (t.clone(), mask.clone());
        grad_check(
            move |g, ids| {
                let ti = g.input(t_c.clone(), false);
                let mi = g.input(m_c.clone(), false);
                g.masked_l1(ids[0], ti, mi)
            },
            &[p.clone()],
            1e-3,
            1e-2,
        );
        // Value oracle.
        let mut g = Graph::new();
        let pi = g.input(p.clone(), false);
        let ti = g.input(t.clone(), false);
        let mi = g.input(mask.clone(), false);
        let l = g.masked_l1(pi, ti, mi);
        let mut num = 0.0;
        let mut den = 0.0;
        for ((pv, tv), mv) in p.iter().zip(t.iter()).zip(mask.iter()) {
            num += (pv - tv).abs() * mv;
            den += mv;
        }
        assert!((g.scalar_value(l) - num / den).abs() < 1e-6);
    }

    #[test]
    fn bending_grad_and_symmetry() {
        let src: Vec<[f32; 2]> = tryon_core::tps::canonical_control_grid(3, 3);
        let quad_flat = tryon_core::tps::tps_bending_quadratic(&src, 1e-3f32).unwrap();
        let quad = Arc::new(Array2::from_shape_vec((9, 9), quad_flat).unwrap());
        let dst = rand_tensor(&[2, 2, 9], 25, -1.0, 1.0);
        let q2 = quad.clone();
        grad_check(
            move |g, ids| g.bending(ids[0], q2.clone()),
            &[dst],
            1e-3,
            1e-2,
        );
        // Affine dst (the canonical grid itself) has zero bending.
        let mut flat = Vec::new();
        for d in 0..2 {
            for p in &src {
                flat.push(p[d]);
            }
        }
        let canonical = ArrayD::from_shape_vec(IxDyn(&[1, 2, 9]), flat).unwrap();
        let mut g = Graph::new();
        let di = g.input(canonical, false);
        let b = g.bending(di, quad);
        assert!(g.scalar_value(b).abs() < 1e-5);
    }

    #[test]
    fn softplus_and_softmax_grad() {
        let x = rand_tensor(&[2, 4, 2, 3], 28, -2.0, 2.0);
        grad_check(
            |g, ids| {
                let s = g.softplus(ids[0]);
                g.mean_all(s)
            },
            &[x.clone()],
            1e-3,
            1e-2,
        );
        grad_check(
            |g, ids| {
                let s = g.channel_softmax(ids[0]);
                let t = g.tanh(s);
                g.mean_all(t)
            },
            &[x.clone()],
            1e-3,
            1.5e-2,
        );
        // Softmax columns sum to one.
        let mut g = Graph::new();
        let xi = g.input(x, false);
        let s = g.channel_softmax(xi);
        let sv = g.value(s);
        for ni in 0..2 {
            for yi in 0..2 {
                for xi2 in 0..3 {
                    let mut sum = 0.0f32;
                    for ci in 0..4 {
                        sum += sv[[ni, ci, yi, xi2]];
                    }
                    assert!((sum - 1.0).abs() < 1e-5);
                }
            }
        }
        // Softplus closed-form spot checks.
        let mut g2 = Graph::new();
        let z = g2.input(ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.0, 30.0]).unwrap(), false);
        let sp = g2.softplus(z);
        assert!((g2.value(sp)[[0]] - 2.0f32.ln()).abs() < 1e-6);
        assert!((g2.value(sp)[[1]] - 30.0).abs() < 1e-4);
    }

    #[test]
    fn backward_skips_no_grad_subtrees() {
        let a = rand_tensor(&[2, 2], 26, -1.0, 1.0);
        let b = rand_tensor(&[2, 2], 27, -1.0, 1.0);
        let mut g = Graph::new();
        let ai = g.input(a, true);
        let bi = g.input(b, false);
        let s = g.add(ai, bi);
        let m = g.mean_all(s);
        let grads = g.backward(m);
        assert!(grads[ai.0].is_some());
        assert!(grads[bi.0].is_none());
    }
}
