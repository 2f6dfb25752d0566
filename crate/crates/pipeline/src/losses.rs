//! Adversarial and stage losses.
//!
//! The default adversarial objective is the hinge form; a vanilla
//! BCE-with-logits objective is available behind [`GanMode::Bce`]. Both are
//! averaged over the discriminator's scales. Stage totals are weighted sums
//! of their components; the weighted component nodes are kept so the
//! training loop can log a breakdown that exactly recomposes the total.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    #[default]
    Hinge,
    Bce,
}

/// Discriminator objective, averaged over scales.
/// Hinge: mean(relu(1-real)) + mean(relu(1+fake)).
/// BCE: mean(softplus(-real)) + mean(softplus(fake)).
pub fn gan_d_loss(
    g: &mut Graph,
    mode: GanMode,
    real_scales: &[NodeId],
    fake_scales: &[NodeId],
) -> NodeId {
    assert!(!real_scales.is_empty() && real_scales.len() == fake_scales.len());
    let mut terms = Vec::new();
    for (&r, &f) in real_scales.iter().zip(fake_scales) {
        let term = match mode {
            GanMode::Hinge => {
                let rm = g.scale(r, -1.0);
                let rs = g.add_scalar(rm, 1.0);
                let rh = g.relu(rs);
                let real_part = g.mean_all(rh);
                let fs = g.add_scalar(f, 1.0);
                let fh = g.relu(fs);
                let fake_part = g.mean_all(fh);
                g.add(real_part, fake_part)
            }
            GanMode::Bce => {
                let rm = g.scale(r, -1.0);
                let rs = g.softplus(rm);
                let real_part = g.mean_all(rs);
                let fs = g.softplus(f);
                let fake_part = g.mean_all(fs);
                g.add(real_part, fake_part)
            }
        };
        terms.push(term);
    }
    mean_of(g, &terms)
}

/// Generator objective, averaged over scales.
/// Hinge: -mean(fake). BCE: mean(softplus(-fake)).
pub fn gan_g_loss(g: &mut Graph, mode: GanMode, fake_scales: &[NodeId]) -> NodeId {
    assert!(!fake_scales.is_empty());
    let mut terms = Vec::new();
    for &f in fake_scales {
        let term = match mode {
            GanMode::Hinge => {
                let m = g.mean_all(f);
                g.scale(m, -1.0)
            }
            GanMode::Bce => {
                let fm = g.scale(f, -1.0);
                let fs = g.softplus(fm);
                g.mean_all(fs)
            }
        };
        terms.push(term);
    }
    mean_of(g, &terms)
}

fn mean_of(g: &mut Graph, terms: &[NodeId]) -> NodeId {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f32)
}

/// Weighted loss components of one training step; absent components log as
/// zero. All stored nodes are already weighted, so the total is their sum.
#[derive(Default, Clone, Copy)]
pub struct StageLossNodes {
    pub total: Option<NodeId>,
    pub ce: Option<NodeId>,
    pub l1: Option<NodeId>,
    pub adv: Option<NodeId>,
    pub bend: Option<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f32,
    pub ce: f32,
    pub l1: f32,
    pub adv: f32,
    pub bend: f32,
}

impl StageLossNodes {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, g: &mut Graph, slot: Component, raw: NodeId, weight: f32) {
        let weighted = g.scale(raw, weight);
        match slot {
            Component::Ce => self.ce = Some(weighted),
            Component::L1 => self.l1 = Some(weighted),
            Component::Adv => self.adv = Some(weighted),
            Component::Bend => self.bend = Some(weighted),
        }
        self.total = Some(match self.total {
            Some(t) => g.add(t, weighted),
            None => weighted,
        });
    }

    pub fn with_ce(mut self, g: &mut Graph, raw: NodeId, weight: f32) -> Self {
        self.push(g, Component::Ce, raw, weight);
        self
    }

    pub fn with_l1(mut self, g: &mut Graph, raw: NodeId, weight: f32) -> Self {
        self.push(g, Component::L1, raw, weight);
        self
    }

    pub fn with_adv(mut self, g: &mut Graph, raw: NodeId, weight: f32) -> Self {
        self.push(g, Component::Adv, raw, weight);
        self
    }

    pub fn with_bend(mut self, g: &mut Graph, raw: NodeId, weight: f32) -> Self {
        self.push(g, Component::Bend, raw, weight);
        self
    }

    pub fn total(&self) -> NodeId {
        self.total.expect("stage loss has no components")
    }

    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let read = |n: Option<NodeId>| n.map_or(0.0, |id| g.scalar_value(id));
        LossBreakdown {
            total: read(self.total),
            ce: read(self.ce),
            l1: read(self.l1),
            adv: read(self.adv),
            bend: read(self.bend),
        }
    }
}

enum Component {
    Ce,
    L1,
    Adv,
    Bend,
}
