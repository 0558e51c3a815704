//! Topic-model pretraining, joint training under the weighted loss,
//! optimizers and checkpoints.
//!
//! Joint loss per batch: `α·L_NTM + (1−α)·L_SIG`, where `L_NTM` is the mean
//! topic-model loss over users with a non-empty bag of words and `L_SIG` is
//! the mean target-token negative log-likelihood. Generator parameters follow
//! AdamW, topic-model parameters plain SGD. Gradients are clipped to a global
//! norm before either update.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::ntm::TopicModel;
use crate::numeric::serialize::{read_tensors, write_tensors};
use crate::numeric::{NodeId, ParamGroup, ParamId, ParamStore, Session, Tensor};
use crate::pipeline::{Example, Vocabs};
use crate::rng;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";

/// Topic model and generator sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub ntm: TopicModel,
    pub gen: Generator,
}

impl Model {
    /// Fresh parameters drawn from the run seed.
    pub fn new(cfg: &Config, gen_vocab: usize, bow_vocab: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut r = rng::stream(cfg.train.seed, "init.ntm");
        let ntm = TopicModel::new(&mut store, cfg.ntm(bow_vocab), &mut r)?;
        let mut r = rng::stream(cfg.train.seed, "init.gen");
        let gen = Generator::new(&mut store, cfg.generator(gen_vocab), &mut r)?;
        Ok(Self { store, ntm, gen })
    }

    /// `θ` for one bag of words with `z = μ`; uniform when the bag is empty.
    pub fn theta(&self, bow: &crate::corpus::BowVector) -> Result<Vec<f64>> {
        if bow.is_empty() {
            let k = self.ntm.cfg.topics;
            return Ok(vec![1.0 / k as f64; k]);
        }
        let mut s = Session::frozen(&self.store);
        let x = s.constant(self.ntm.input_matrix(&[bow]));
        let f = self.ntm.forward(&mut s, x, None)?;
        Ok(s.value(f.theta).to_vec())
    }
}

/// AdamW moments for generator parameters and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub lr_sig: f64,
    pub lr_ntm: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(store: &ParamStore, cfg: &Config) -> Self {
        let sizes = |id: ParamId| if store.group(id) == ParamGroup::Sig { store.get(id).numel() } else { 0 };
        Self {
            m: store.ids().map(|i| vec![0.0; sizes(i)]).collect(),
            v: store.ids().map(|i| vec![0.0; sizes(i)]).collect(),
            step: 0,
            lr_sig: cfg.train.lr_sig,
            lr_ntm: cfg.train.lr_ntm,
            weight_decay: cfg.train.weight_decay,
            clip_norm: cfg.train.clip_norm,
        }
    }

    /// Clips, then applies AdamW to generator and SGD to topic-model
    /// parameters. Returns the pre-clip global norm.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &mut [(ParamId, Vec<f64>)]) -> f64 {
        let norm = clip_global(grads, self.clip_norm);
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for (id, g) in grads.iter() {
            let group = store.group(*id);
            let p = store.get_mut(*id).data_mut();
            match group {
                ParamGroup::Ntm => sgd(p, g, self.lr_ntm),
                ParamGroup::Sig => {
                    let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
                    for i in 0..p.len() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                        let upd = (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                        p[i] -= self.lr_sig * (upd + self.weight_decay * p[i]);
                    }
                }
            }
        }
        norm
    }
}

pub fn sgd(p: &mut [f64], g: &[f64], lr: f64) {
    for (x, d) in p.iter_mut().zip(g) {
        *x -= lr * d;
    }
}

/// Scales gradients so their joint L2 norm is at most `max`; returns the
/// norm before scaling. `max <= 0` disables clipping.
pub fn clip_global(grads: &mut [(ParamId, Vec<f64>)], max: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if max > 0.0 && norm > max {
        let c = max / norm;
        grads.iter_mut().flat_map(|(_, g)| g.iter_mut()).for_each(|x| *x *= c);
    }
    norm
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub l_ntm: f64,
    pub l_sig: f64,
    pub total: f64,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from("step,L_NTM,L_SIG,total\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.l_ntm, r.l_sig, r.total));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn ntm_snapshot(model: &Model) -> Vec<(ParamId, Tensor)> {
    model.store.ids().filter(|&i| model.store.group(i) == ParamGroup::Ntm).map(|i| (i, model.store.get(i).clone())).collect()
}

fn restore(model: &mut Model, snap: Vec<(ParamId, Tensor)>) {
    for (i, t) in snap {
        *model.store.get_mut(i) = t;
    }
}

/// Trains the topic model alone with SGD. Returns the mean loss of each
/// epoch. On a non-finite loss the topic-model parameters are restored to the
/// end of the last finite epoch and `Diverged` is returned.
pub fn pretrain_ntm(model: &mut Model, bows: &[&crate::corpus::BowVector], cfg: &Config) -> Result<Vec<f64>> {
    let rows: Vec<&crate::corpus::BowVector> = bows.iter().copied().filter(|b| !b.is_empty()).collect();
    let epochs = cfg.train.ntm_pretrain_epochs;
    if rows.is_empty() || epochs == 0 {
        return Ok(Vec::new());
    }
    let mut order_rng = rng::stream(cfg.train.seed, "ntm.order");
    let mut eps_rng = rng::stream(cfg.train.seed, "ntm.eps");
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    let mut snap = ntm_snapshot(model);
    for epoch in 0..epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.train.ntm_batch_size) {
            let b: Vec<&crate::corpus::BowVector> = batch.iter().map(|&i| rows[i]).collect();
            let x = model.ntm.input_matrix(&b);
            let counts = model.ntm.bow_matrix(&b);
            let eps = model.ntm.sample_eps(b.len(), &mut eps_rng);
            let pass = || -> Result<(f64, Vec<(ParamId, Vec<f64>)>)> {
                let mut s = Session::new(&model.store);
                let xn = s.constant(x);
                let cn = s.constant(counts);
                let f = model.ntm.forward(&mut s, xn, Some(eps))?;
                let (l, _, _) = model.ntm.loss(&mut s, cn, f.mu, f.log_sigma, f.recon)?;
                let v = s.scalar(l);
                if v.is_finite() {
                    s.backward(l)?;
                }
                Ok((v, s.param_grads()))
            };
            let (loss, grads) = match pass() {
                Ok(r) => r,
                // non-finite activations
                Err(Error::Numeric(_)) => (f64::NAN, Vec::new()),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grads.iter().any(|(_, g)| g.iter().any(|x| !x.is_finite())) {
                restore(model, snap);
                return Err(Error::Diverged { epoch });
            }
            for (id, g) in &grads {
                sgd(model.store.get_mut(*id).data_mut(), g, cfg.train.lr_ntm);
            }
            total += loss * b.len() as f64;
        }
        if !model.store.is_finite() {
            restore(model, snap);
            return Err(Error::Diverged { epoch });
        }
        snap = ntm_snapshot(model);
        let mean = total / rows.len() as f64;
        log::debug!("ntm epoch {epoch}: loss {mean:.4}");
        losses.push(mean);
    }
    Ok(losses)
}

/// Builds the joint loss graph of one batch and returns its parts.
pub fn batch_loss(s: &mut Session<'_>, model: &Model, batch: &[&Example], cfg: &Config, eps_rng: &mut rng::Rng) -> Result<(NodeId, NodeId, NodeId)> {
    if batch.is_empty() {
        return Err(Error::Usage("empty training batch".into()));
    }
    let alpha = cfg.train.alpha_loss;
    let nonempty: Vec<usize> = (0..batch.len()).filter(|&i| !batch[i].bow.is_empty()).collect();
    let mut thetas: Vec<Option<NodeId>> = vec![None; batch.len()];
    let l_ntm = if nonempty.is_empty() {
        s.constant(Tensor::scalar(0.0))
    } else {
        let bows: Vec<_> = nonempty.iter().map(|&i| &batch[i].bow).collect();
        let x = s.constant(model.ntm.input_matrix(&bows));
        let counts = s.constant(model.ntm.bow_matrix(&bows));
        let eps = model.ntm.sample_eps(bows.len(), eps_rng);
        let f = model.ntm.forward(s, x, Some(eps))?;
        for (row, &i) in nonempty.iter().enumerate() {
            thetas[i] = Some(s.slice(f.theta, 0, row, row + 1)?);
        }
        model.ntm.loss(s, counts, f.mu, f.log_sigma, f.recon)?.0
    };
    let k = model.ntm.cfg.topics;
    let mut nll_parts = Vec::with_capacity(batch.len());
    let mut tokens = 0usize;
    for (i, ex) in batch.iter().enumerate() {
        let prompt = if cfg.train.tpee {
            let th = match thetas[i] {
                Some(t) => t,
                None => s.constant(Tensor::new(&[1, k], vec![1.0 / k as f64; k])?),
            };
            Some(model.gen.topic_prompt(s, th)?)
        } else {
            None
        };
        let h_e = model.gen.encode(s, &ex.source, prompt)?;
        let (nll, n) = model.gen.nll(s, h_e, &ex.target)?;
        nll_parts.push(nll);
        tokens += n;
    }
    let mut sum = nll_parts[0];
    for &p in &nll_parts[1..] {
        sum = s.add(sum, p)?;
    }
    let l_sig = s.scale(sum, 1.0 / tokens as f64);
    let a = s.scale(l_ntm, alpha);
    let b = s.scale(l_sig, 1.0 - alpha);
    let total = s.add(a, b)?;
    Ok((total, l_ntm, l_sig))
}

/// Joint training state carried across calls.
pub struct JointTrainer {
    pub opt: Optimizer,
    order_rng: rng::Rng,
    eps_rng: rng::Rng,
    pub log: Vec<LogRow>,
}

impl JointTrainer {
    pub fn new(model: &Model, cfg: &Config) -> Self {
        Self {
            opt: Optimizer::new(&model.store, cfg),
            order_rng: rng::stream(cfg.train.seed, "joint.order"),
            eps_rng: rng::stream(cfg.train.seed, "joint.eps"),
            log: Vec::new(),
        }
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, model: &mut Model, batch: &[&Example], cfg: &Config) -> Result<LogRow> {
        let (row, mut grads) = {
            let mut s = Session::new(&model.store);
            let (total, l_ntm, l_sig) = batch_loss(&mut s, model, batch, cfg, &mut self.eps_rng)?;
            let row = LogRow {
                step: self.opt.step + 1,
                l_ntm: s.scalar(l_ntm),
                l_sig: s.scalar(l_sig),
                total: s.scalar(total),
            };
            if !row.total.is_finite() {
                return Err(Error::Diverged { epoch: 0 });
            }
            s.backward(total)?;
            (row, s.param_grads())
        };
        if grads.iter().any(|(_, g)| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numeric(format!("non-finite gradient at step {}", row.step)));
        }
        self.opt.apply(&mut model.store, &mut grads);
        self.log.push(row);
        Ok(row)
    }

    /// One pass over `examples` in a seeded shuffled order.
    pub fn epoch(&mut self, model: &mut Model, examples: &[Example], cfg: &Config) -> Result<f64> {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut self.order_rng);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(cfg.train.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            sum += self.step(model, &batch, cfg)?.total;
            n += 1;
        }
        Ok(sum / n.max(1) as f64)
    }
}

/// Runs all joint epochs; the model keeps the last finite state on failure.
pub fn joint_train(model: &mut Model, examples: &[Example], cfg: &Config) -> Result<JointTrainer> {
    let mut trainer = JointTrainer::new(model, cfg);
    for epoch in 0..cfg.train.joint_epochs {
        let before = model.store.clone();
        match trainer.epoch(model, examples, cfg) {
            Ok(loss) => log::info!("joint epoch {epoch}: mean loss {loss:.4}"),
            Err(Error::Diverged { .. }) => {
                model.store = before;
                return Err(Error::Diverged { epoch });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(trainer)
}

/// Saved model, optimizer state and vocabularies.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: Config,
    pub model: Model,
    pub opt: Optimizer,
    pub vocabs: Vocabs,
    pub epoch: u64,
}

fn meta_scalar(v: f64) -> Tensor {
    Tensor::vector(vec![v])
}

impl Checkpoint {
    /// Writes `config.toml`, the vocabularies and `checkpoint.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, self.config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        self.vocabs.save(dir)?;
        let store = &self.model.store;
        let mut owned: Vec<(String, Tensor)> = Vec::new();
        for id in store.ids() {
            if store.group(id) == ParamGroup::Sig {
                let shape = store.get(id).shape().to_vec();
                owned.push((format!("adam.m/{}", store.name(id)), Tensor::new(&shape, self.opt.m[id.index()].clone())?));
                owned.push((format!("adam.v/{}", store.name(id)), Tensor::new(&shape, self.opt.v[id.index()].clone())?));
            }
        }
        let h = self.config.hash();
        owned.push(("meta/epoch".into(), meta_scalar(self.epoch as f64)));
        owned.push(("meta/adam_step".into(), meta_scalar(self.opt.step as f64)));
        // two exact 32-bit halves
        owned.push(("meta/config_hash".into(), Tensor::vector(vec![(h >> 32) as f64, (h & 0xffff_ffff) as f64])));
        let mut named: Vec<(String, &Tensor)> = store.named().into_iter().map(|(n, t)| (format!("param/{n}"), t)).collect();
        named.extend(owned.iter().map(|(n, t)| (n.clone(), t)));
        let path = dir.join(CHECKPOINT_FILE);
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = std::io::BufWriter::new(f);
        write_tensors(&mut w, &named)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = Config::load(&dir.join(CONFIG_FILE))?;
        let vocabs = Vocabs::load(dir)?;
        let mut model = Model::new(&config, vocabs.gen.len(), vocabs.bow.len())?;
        let path = dir.join(CHECKPOINT_FILE);
        let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let tensors = read_tensors(std::io::BufReader::new(f))?;
        let mut opt = Optimizer::new(&model.store, &config);
        let mut params = Vec::new();
        let mut epoch = 0;
        let mut hash = None;
        for (name, t) in tensors {
            if let Some(p) = name.strip_prefix("param/") {
                params.push((p.to_string(), t));
            } else if let Some(p) = name.strip_prefix("adam.m/") {
                let id = model.store.id(p).ok_or_else(|| Error::Format(format!("moment for unknown parameter {p}")))?;
                opt.m[id.index()] = t.into_data();
            } else if let Some(p) = name.strip_prefix("adam.v/") {
                let id = model.store.id(p).ok_or_else(|| Error::Format(format!("moment for unknown parameter {p}")))?;
                opt.v[id.index()] = t.into_data();
            } else if name == "meta/epoch" {
                epoch = t.data()[0] as u64;
            } else if name == "meta/adam_step" {
                opt.step = t.data()[0] as u64;
            } else if name == "meta/config_hash" {
                hash = Some(((t.data()[0] as u64) << 32) | t.data()[1] as u64);
            }
        }
        if hash != Some(config.hash()) {
            return Err(Error::Format(format!("{}: config hash does not match {CONFIG_FILE}", path.display())));
        }
        model.store.assign(params)?;
        Ok(Self {
            config,
            model,
            opt,
            vocabs,
            epoch,
        })
    }
}
