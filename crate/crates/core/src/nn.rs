//! Parameterized layers shared by the topic model and the generator.

use rand::Rng;

use crate::error::Result;
use crate::numeric::{NodeId, ParamGroup, ParamId, ParamStore, Session};

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = store.add_normal(format!("{name}.w"), group, &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng);
        let b = store.add_const(format!("{name}.b"), group, &[fan_out], 0.0);
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        let w = s.param(self.w);
        let b = s.param(self.b);
        let y = s.matmul(x, w)?;
        s.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gain: store.add_const(format!("{name}.gain"), group, &[dim], 1.0),
            bias: store.add_const(format!("{name}.bias"), group, &[dim], 0.0),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        let g = s.param(self.gain);
        let b = s.param(self.bias);
        s.layer_norm(x, g, b)
    }
}

/// Multi-head attention projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Sig;
        Self {
            q: Linear::new(store, &format!("{name}.q"), g, d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), g, d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), g, d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), g, d, d, rng),
            heads,
        }
    }

    /// Projects keys and values from `x`.
    pub fn kv(&self, s: &mut Session<'_>, x: NodeId) -> Result<(NodeId, NodeId)> {
        Ok((self.k.forward(s, x)?, self.v.forward(s, x)?))
    }

    /// Attends queries from `x` over projected `keys`/`values`. `mask` is an
    /// additive `[Tq, Tk]` constant.
    pub fn attend(&self, s: &mut Session<'_>, x: NodeId, keys: NodeId, values: NodeId, mask: Option<NodeId>) -> Result<NodeId> {
        let q = self.q.forward(s, x)?;
        let d = s.shape(q)[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = s.slice(q, 1, lo, hi)?;
            let kh = s.slice(keys, 1, lo, hi)?;
            let vh = s.slice(values, 1, lo, hi)?;
            let scores = s.matmul_nt(qh, kh)?;
            let mut scores = s.scale(scores, scale);
            if let Some(m) = mask {
                scores = s.add(scores, m)?;
            }
            let p = s.softmax(scores, 1)?;
            outs.push(s.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { s.concat(&outs, 1)? };
        self.o.forward(s, cat)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), ParamGroup::Sig, d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), ParamGroup::Sig, hidden, d, rng),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        let h = self.up.forward(s, x)?;
        let h = s.gelu(h);
        self.down.forward(s, h)
    }
}
