//! Variational neural topic model over bag-of-words histories.
//!
//! ```text
//! h      = softplus(f_b(x))
//! μ      = f_μ(h),  log σ = f_σ(h)
//! z      = μ + σ ⊙ ε            (ε ~ N(0, I); z = μ when deterministic)
//! θ      = softmax(f_θ(z))
//! x̂      = softmax(f_φ(θ))       rows of f_φ's weight are the topics φ_k
//! L_NTM  = ½ Σ(μ² + σ² − 1 − 2 log σ) − Σ_w x_w log x̂_w
//! ```

use std::cell::Cell;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::BowVector;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::numeric::{argmax, NodeId, ParamGroup, ParamStore, Session, Tensor};

pub const DEFAULT_TOPIC_WORDS: usize = 30;
pub const RECON_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NtmConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub topics: usize,
}

impl NtmConfig {
    pub fn new(vocab_size: usize, topics: usize) -> Self {
        Self {
            vocab_size,
            hidden: 200,
            topics,
        }
    }
}

/// Parameter handles of the topic model (values live in a [`ParamStore`]).
#[derive(Debug, Clone)]
pub struct TopicModel {
    pub cfg: NtmConfig,
    pub f_b: Linear,
    pub f_mu: Linear,
    pub f_sigma: Linear,
    pub f_theta: Linear,
    pub f_phi: Linear,
    clamped: Cell<u64>,
}

/// Per-user guidance extracted from a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicGuidance {
    pub theta: Vec<f64>,
    pub major_topic: usize,
    /// Topic-model vocabulary ids, best first.
    pub topic_words: Vec<usize>,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct NtmForward {
    pub mu: NodeId,
    pub log_sigma: NodeId,
    pub z: NodeId,
    pub theta: NodeId,
    pub recon: NodeId,
}

impl TopicModel {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: NtmConfig, rng: &mut R) -> Result<Self> {
        if cfg.topics < 2 {
            return Err(Error::Config(format!("topic number must be at least 2, got {}", cfg.topics)));
        }
        let g = ParamGroup::Ntm;
        Ok(Self {
            cfg,
            f_b: Linear::new(store, "ntm.f_b", g, cfg.vocab_size, cfg.hidden, rng),
            f_mu: Linear::new(store, "ntm.f_mu", g, cfg.hidden, cfg.topics, rng),
            f_sigma: Linear::new(store, "ntm.f_sigma", g, cfg.hidden, cfg.topics, rng),
            f_theta: Linear::new(store, "ntm.f_theta", g, cfg.topics, cfg.topics, rng),
            f_phi: Linear::new(store, "ntm.f_phi", g, cfg.topics, cfg.vocab_size, rng),
            clamped: Cell::new(0),
        })
    }

    /// Rebinds handles to an existing store laid out by [`TopicModel::new`].
    pub fn attach(store: &ParamStore, cfg: NtmConfig) -> Result<Self> {
        let lin = |name: &str, i: usize, o: usize| -> Result<Linear> {
            let w = store.id(&format!("{name}.w")).ok_or_else(|| Error::Format(format!("missing {name}.w")))?;
            let b = store.id(&format!("{name}.b")).ok_or_else(|| Error::Format(format!("missing {name}.b")))?;
            Ok(Linear { w, b, fan_in: i, fan_out: o })
        };
        let (v, h, k) = (cfg.vocab_size, cfg.hidden, cfg.topics);
        Ok(Self {
            cfg,
            f_b: lin("ntm.f_b", v, h)?,
            f_mu: lin("ntm.f_mu", h, k)?,
            f_sigma: lin("ntm.f_sigma", h, k)?,
            f_theta: lin("ntm.f_theta", k, k)?,
            f_phi: lin("ntm.f_phi", k, v)?,
            clamped: Cell::new(0),
        })
    }

    /// Number of reconstruction probabilities clamped to the floor so far.
    pub fn clamped_count(&self) -> u64 {
        self.clamped.get()
    }

    /// Encoder input: `ln(1 + count)` per word, which keeps long histories
    /// from saturating the first layer.
    pub fn input_matrix(&self, bows: &[&BowVector]) -> Tensor {
        let mut t = self.bow_matrix(bows);
        t.data_mut().iter_mut().for_each(|c| *c = c.ln_1p());
        t
    }

    /// Dense `[rows, V]` count matrix.
    pub fn bow_matrix(&self, bows: &[&BowVector]) -> Tensor {
        let v = self.cfg.vocab_size;
        let mut data = Vec::with_capacity(bows.len() * v);
        for b in bows {
            data.extend(b.to_dense(v));
        }
        Tensor::new(&[bows.len(), v], data).expect("dense bow rows")
    }

    pub fn encode(&self, s: &mut Session<'_>, bow: NodeId) -> Result<(NodeId, NodeId)> {
        let h = self.f_b.forward(s, bow)?;
        let h = s.softplus(h);
        Ok((self.f_mu.forward(s, h)?, self.f_sigma.forward(s, h)?))
    }

    /// `z = μ + exp(log σ) ⊙ ε`; with `eps = None`, `z = μ`.
    pub fn reparameterize(&self, s: &mut Session<'_>, mu: NodeId, log_sigma: NodeId, eps: Option<Tensor>) -> Result<NodeId> {
        let Some(eps) = eps else { return Ok(mu) };
        let e = s.constant(eps);
        let sigma = s.exp(log_sigma);
        let noise = s.mul(sigma, e)?;
        s.add(mu, noise)
    }

    pub fn mixture(&self, s: &mut Session<'_>, z: NodeId) -> Result<NodeId> {
        let t = self.f_theta.forward(s, z)?;
        s.softmax(t, 1)
    }

    pub fn reconstruct(&self, s: &mut Session<'_>, theta: NodeId) -> Result<NodeId> {
        let l = self.f_phi.forward(s, theta)?;
        s.softmax(l, 1)
    }

    /// Draws `ε ~ N(0, I)` of shape `[rows, K]`.
    pub fn sample_eps<R: Rng>(&self, rows: usize, rng: &mut R) -> Tensor {
        let data = (0..rows * self.cfg.topics).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::new(&[rows, self.cfg.topics], data).expect("eps shape")
    }

    pub fn forward(&self, s: &mut Session<'_>, bow: NodeId, eps: Option<Tensor>) -> Result<NtmForward> {
        let (mu, log_sigma) = self.encode(s, bow)?;
        let z = self.reparameterize(s, mu, log_sigma, eps)?;
        let theta = self.mixture(s, z)?;
        let recon = self.reconstruct(s, theta)?;
        Ok(NtmForward {
            mu,
            log_sigma,
            z,
            theta,
            recon,
        })
    }

    /// Loss summed over rows and divided by the row count. Returns
    /// `(total, kl, reconstruction)` nodes.
    pub fn loss(&self, s: &mut Session<'_>, bow: NodeId, mu: NodeId, log_sigma: NodeId, recon: NodeId) -> Result<(NodeId, NodeId, NodeId)> {
        let rows = s.shape(mu)[0].max(1) as f64;
        let kl = kl_term(s, mu, log_sigma)?;
        let clamped = s.value(recon).iter().filter(|&&p| p < RECON_FLOOR).count() as u64;
        if clamped > 0 {
            self.clamped.set(self.clamped.get() + clamped);
            log::warn!("clamped {clamped} reconstruction probabilities at {RECON_FLOOR}");
        }
        let safe = s.clamp_min(recon, RECON_FLOOR);
        let logp = s.log(safe);
        let weighted = s.mul(bow, logp)?;
        let ll = s.sum(weighted);
        let nll = s.scale(ll, -1.0);
        let total = s.add(kl, nll)?;
        Ok((s.scale(total, 1.0 / rows), s.scale(kl, 1.0 / rows), s.scale(nll, 1.0 / rows)))
    }

    /// Deterministic guidance for one user: `z = μ`.
    pub fn guidance(&self, store: &ParamStore, bow: &BowVector, l: usize) -> Result<TopicGuidance> {
        if bow.is_empty() {
            return Err(Error::Usage("empty bag of words has no topic guidance".into()));
        }
        let mut s = Session::frozen(store);
        let x = s.constant(self.input_matrix(&[bow]));
        let f = self.forward(&mut s, x, None)?;
        let theta = s.value(f.theta).to_vec();
        let major = argmax(&theta);
        Ok(TopicGuidance {
            topic_words: self.topic_words(store, major, l),
            major_topic: major,
            theta,
        })
    }

    /// Topic-word logits `φ_c` (row `c` of the `[K, V]` weight).
    pub fn topic_row<'s>(&self, store: &'s ParamStore, c: usize) -> &'s [f64] {
        store.get(self.f_phi.w).row(c)
    }

    /// The `l` highest-weight vocabulary ids of topic `c`, lower id first on ties.
    pub fn topic_words(&self, store: &ParamStore, c: usize, l: usize) -> Vec<usize> {
        top_indices(self.topic_row(store, c), l)
    }
}

/// Indices of the `l` largest values, descending; ties by lower index.
pub fn top_indices(values: &[f64], l: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(l);
    idx
}

/// `½ Σ(μ² + σ² − 1 − 2 log σ)` summed over all entries.
pub fn kl_term(s: &mut Session<'_>, mu: NodeId, log_sigma: NodeId) -> Result<NodeId> {
    let mu2 = s.mul(mu, mu)?;
    let two_ls = s.scale(log_sigma, 2.0);
    let var = s.exp(two_ls);
    let a = s.add(mu2, var)?;
    let b = s.sub(a, two_ls)?;
    let c = s.add_scalar(b, -1.0);
    let total = s.sum(c);
    Ok(s.scale(total, 0.5))
}
