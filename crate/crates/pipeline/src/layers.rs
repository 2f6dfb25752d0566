//! Named parameter storage and the small layer vocabulary the networks are
//! assembled from.
//!
//! A [`ParamStore`] owns every trainable tensor of one model under a stable
//! name (the checkpoint key). For each forward pass the store is bound into
//! a fresh graph ([`ParamStore::bind`]); layer handles then address their
//! parameters through the returned [`Binding`]. Convolutions that feed an
//! instance norm are created without bias, since the normalization would
//! cancel the shift and leave the bias with a permanently zero gradient.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Graph nodes for one bound forward pass, indexed by [`ParamId`].
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Inserts every parameter into `g` as a grad-enabled input.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        let nodes = self
            .params
            .iter()
            .map(|p| g.input(p.value.clone(), true))
            .collect();
        Binding { nodes }
    }

    /// Binds parameters without gradient tracking (frozen model).
    pub fn bind_frozen(&self, g: &mut Graph) -> Binding {
        let nodes = self
            .params
            .iter()
            .map(|p| g.input(p.value.clone(), false))
            .collect();
        Binding { nodes }
    }
}

/// Standard normal draw via Box-Muller, deterministic for a seeded rng.
pub fn sample_normal(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

fn kaiming_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| sample_normal(rng) * std).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// 3x3 (or kxk) convolution handle; weight `(out, in, k, k)`.
pub struct Conv2dLayer {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv2dLayer {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let w = ps.add(
            format!("{name}.weight"),
            kaiming_tensor(rng, &[cout, cin, k, k], cin * k * k),
        );
        let b = bias.then(|| ps.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout]))));
        Self { w, b, stride, pad }
    }

    /// All-zero weight and bias; used for heads that must start as the
    /// identity contribution.
    pub fn zeros(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = ps.add(format!("{name}.weight"), ArrayD::zeros(IxDyn(&[cout, cin, k, k])));
        let b = Some(ps.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout]))));
        Self { w, b, stride, pad }
    }

    pub fn apply(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> NodeId {
        let y = g.conv2d(x, bind.node(self.w), self.stride, self.pad);
        match self.b {
            Some(b) => g.add_bias(y, bind.node(b)),
            None => y,
        }
    }
}

pub struct LinearLayer {
    w: ParamId,
    b: ParamId,
}

impl LinearLayer {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fin: usize,
        fout: usize,
    ) -> Self {
        let w = ps.add(format!("{name}.weight"), kaiming_tensor(rng, &[fout, fin], fin));
        let b = ps.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[fout])));
        Self { w, b }
    }

    pub fn zeros(ps: &mut ParamStore, name: &str, fin: usize, fout: usize) -> Self {
        let w = ps.add(format!("{name}.weight"), ArrayD::zeros(IxDyn(&[fout, fin])));
        let b = ps.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[fout])));
        Self { w, b }
    }

    pub fn apply(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> NodeId {
        g.linear(x, bind.node(self.w), bind.node(self.b))
    }
}

/// Convolution (no bias) + instance norm + leaky relu, the standard
/// encoder/decoder block.
pub struct ConvInBlock {
    conv: Conv2dLayer,
    slope: f32,
}

pub const IN_EPS: f32 = 1e-5;
pub const LRELU_SLOPE: f32 = 0.2;

impl ConvInBlock {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        Self {
            conv: Conv2dLayer::new(ps, rng, name, cin, cout, 3, stride, 1, false),
            slope: LRELU_SLOPE,
        }
    }

    pub fn apply(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> NodeId {
        let y = self.conv.apply(g, bind, x);
        let n = g.instance_norm(y, IN_EPS);
        g.leaky_relu(n, self.slope)
    }
}
