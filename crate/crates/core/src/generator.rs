//! Transformer encoder-decoder with topic prompts prepended to the encoder
//! input.
//!
//! Blocks are pre-norm with a final layer norm on both stacks. The token
//! embedding table doubles as the output projection. Prompt vectors carry no
//! position encoding and are always visible to attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::nn::{Attention, FeedForward, LayerNorm, Linear};
use crate::numeric::{argmax, NodeId, ParamGroup, ParamId, ParamStore, Session, Tensor};

/// Additive attention mask for hidden positions. Finite so softmax accepts it.
pub const MASKED: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub prompt_len: usize,
    pub prompt_hidden: usize,
    pub topics: usize,
    pub max_input_tokens: usize,
    pub max_gen_len: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 128,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            ff_hidden: 512,
            prompt_len: 7,
            prompt_hidden: 256,
            topics: 100,
            max_input_tokens: 1024,
            max_gen_len: 32,
        }
    }
}

impl GeneratorConfig {
    /// Six encoder and six decoder layers.
    pub fn paper_shape(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            enc_layers: 6,
            dec_layers: 6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.heads == 0 {
            return Err(Error::Config("vocabulary, model width and heads must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.dec_layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross: Attention,
    ln3: LayerNorm,
    ff: FeedForward,
}

/// Parameter handles of the generator.
#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub embed: ParamId,
    prompt_up: Linear,
    prompt_down: Linear,
    enc: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    dec: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
}

/// Per-layer key/value pair.
pub type Kv = (NodeId, NodeId);

/// Inference state between decode steps.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pub h_e: Tensor,
    /// Cross-attention keys/values per decoder layer.
    pub cross: Vec<(Tensor, Tensor)>,
    /// Self-attention cache per decoder layer, `[pos, d]` each.
    pub past: Vec<(Tensor, Tensor)>,
    pub pos: usize,
}

impl DecodeState {
    /// Appends one position's keys/values.
    pub fn extend(&mut self, kv: Vec<(Tensor, Tensor)>) -> Result<()> {
        if kv.len() != self.past.len() {
            return Err(Error::Usage(format!("expected {} layers of cache, got {}", self.past.len(), kv.len())));
        }
        for ((pk, pv), (k, v)) in self.past.iter_mut().zip(kv) {
            *pk = append_rows(pk, &k)?;
            *pv = append_rows(pv, &v)?;
        }
        self.pos += 1;
        Ok(())
    }
}

fn append_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = b.shape()[1];
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    let rows = data.len() / d;
    Tensor::new(&[rows, d], data)
}

/// Sinusoidal encodings for positions `offset..offset + n`.
pub fn positions(n: usize, d: usize, offset: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for p in 0..n {
        let pos = (p + offset) as f64;
        for i in 0..d / 2 {
            let freq = (10000f64).powf(-2.0 * i as f64 / d as f64);
            data[p * d + 2 * i] = (pos * freq).sin();
            data[p * d + 2 * i + 1] = (pos * freq).cos();
        }
    }
    Tensor::new(&[n, d], data).expect("position shape")
}

/// Upper-triangular additive mask of size `n`.
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = MASKED;
        }
    }
    Tensor::new(&[n, n], data).expect("mask shape")
}

/// Teacher-forcing split: inputs `<s> y`, targets `y </s>`.
pub fn teacher_forcing(target: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(target.len() + 1);
    input.push(BOS_ID);
    input.extend_from_slice(target);
    let mut out = target.to_vec();
    out.push(EOS_ID);
    (input, out)
}

impl Generator {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: GeneratorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let g = ParamGroup::Sig;
        let d = cfg.d_model;
        let embed = store.add_normal("gen.embed", g, &[cfg.vocab_size, d], 0.02, rng);
        let prompt_up = Linear::new(store, "gen.prompt.up", g, cfg.topics, cfg.prompt_hidden, rng);
        let prompt_down = Linear::new(store, "gen.prompt.down", g, cfg.prompt_hidden, d * cfg.prompt_len, rng);
        let enc = (0..cfg.enc_layers)
            .map(|i| {
                let n = format!("gen.enc.{i}");
                EncoderLayer {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), g, d),
                    attn: Attention::new(store, &format!("{n}.attn"), d, cfg.heads, rng),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), g, d),
                    ff: FeedForward::new(store, &format!("{n}.ff"), d, cfg.ff_hidden, rng),
                }
            })
            .collect();
        let enc_norm = LayerNorm::new(store, "gen.enc.norm", g, d);
        let dec = (0..cfg.dec_layers)
            .map(|i| {
                let n = format!("gen.dec.{i}");
                DecoderLayer {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), g, d),
                    self_attn: Attention::new(store, &format!("{n}.self"), d, cfg.heads, rng),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), g, d),
                    cross: Attention::new(store, &format!("{n}.cross"), d, cfg.heads, rng),
                    ln3: LayerNorm::new(store, &format!("{n}.ln3"), g, d),
                    ff: FeedForward::new(store, &format!("{n}.ff"), d, cfg.ff_hidden, rng),
                }
            })
            .collect();
        let dec_norm = LayerNorm::new(store, "gen.dec.norm", g, d);
        Ok(Self {
            cfg,
            embed,
            prompt_up,
            prompt_down,
            enc,
            enc_norm,
            dec,
            dec_norm,
        })
    }

    /// Rebinds handles by name to a store laid out by [`Generator::new`].
    pub fn attach(store: &ParamStore, cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let id = |name: String| store.id(&name).ok_or_else(|| Error::Format(format!("missing parameter {name}")));
        let lin = |name: &str, i: usize, o: usize| -> Result<Linear> {
            Ok(Linear {
                w: id(format!("{name}.w"))?,
                b: id(format!("{name}.b"))?,
                fan_in: i,
                fan_out: o,
            })
        };
        let ln = |name: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                gain: id(format!("{name}.gain"))?,
                bias: id(format!("{name}.bias"))?,
            })
        };
        let d = cfg.d_model;
        let attn = |name: &str| -> Result<Attention> {
            Ok(Attention {
                q: lin(&format!("{name}.q"), d, d)?,
                k: lin(&format!("{name}.k"), d, d)?,
                v: lin(&format!("{name}.v"), d, d)?,
                o: lin(&format!("{name}.o"), d, d)?,
                heads: cfg.heads,
            })
        };
        let ff = |name: &str| -> Result<FeedForward> {
            Ok(FeedForward {
                up: lin(&format!("{name}.up"), d, cfg.ff_hidden)?,
                down: lin(&format!("{name}.down"), cfg.ff_hidden, d)?,
            })
        };
        let enc = (0..cfg.enc_layers)
            .map(|i| {
                let n = format!("gen.enc.{i}");
                Ok(EncoderLayer {
                    ln1: ln(&format!("{n}.ln1"))?,
                    attn: attn(&format!("{n}.attn"))?,
                    ln2: ln(&format!("{n}.ln2"))?,
                    ff: ff(&format!("{n}.ff"))?,
                })
            })
            .collect::<Result<_>>()?;
        let dec = (0..cfg.dec_layers)
            .map(|i| {
                let n = format!("gen.dec.{i}");
                Ok(DecoderLayer {
                    ln1: ln(&format!("{n}.ln1"))?,
                    self_attn: attn(&format!("{n}.self"))?,
                    ln2: ln(&format!("{n}.ln2"))?,
                    cross: attn(&format!("{n}.cross"))?,
                    ln3: ln(&format!("{n}.ln3"))?,
                    ff: ff(&format!("{n}.ff"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            embed: id("gen.embed".into())?,
            prompt_up: lin("gen.prompt.up", cfg.topics, cfg.prompt_hidden)?,
            prompt_down: lin("gen.prompt.down", cfg.prompt_hidden, d * cfg.prompt_len)?,
            enc,
            enc_norm: ln("gen.enc.norm")?,
            dec,
            dec_norm: ln("gen.dec.norm")?,
        })
    }

    /// `[L, d]` prompt from a `[1, K]` topic mixture. The MLP output is read
    /// as a `d × L` matrix whose columns are the prompt vectors.
    pub fn topic_prompt(&self, s: &mut Session<'_>, theta: NodeId) -> Result<NodeId> {
        let h = self.prompt_up.forward(s, theta)?;
        let h = s.tanh(h);
        let b = self.prompt_down.forward(s, h)?;
        let b = s.reshape(b, &[self.cfg.d_model, self.cfg.prompt_len])?;
        s.transpose(b)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            Some(i) => Err(Error::Usage(format!("token id {i} outside vocabulary of {}", self.cfg.vocab_size))),
            None => Ok(()),
        }
    }

    /// Scaled token embeddings plus positions starting at `offset`.
    fn embed_tokens(&self, s: &mut Session<'_>, ids: &[usize], offset: usize) -> Result<NodeId> {
        self.check_ids(ids)?;
        let table = s.param(self.embed);
        let e = s.embedding(table, ids)?;
        let e = s.scale(e, (self.cfg.d_model as f64).sqrt());
        let p = s.constant(positions(ids.len(), self.cfg.d_model, offset));
        s.add(e, p)
    }

    /// Encoder output `H_E` with `L + M` rows, or `M` rows without a prompt.
    pub fn encode(&self, s: &mut Session<'_>, tokens: &[usize], prompt: Option<NodeId>) -> Result<NodeId> {
        if tokens.len() > self.cfg.max_input_tokens {
            return Err(Error::Usage(format!("source has {} tokens, limit is {}", tokens.len(), self.cfg.max_input_tokens)));
        }
        if tokens.is_empty() && prompt.is_none() {
            return Err(Error::Usage("empty source without a prompt".into()));
        }
        let mut parts = Vec::with_capacity(2);
        if let Some(p) = prompt {
            parts.push(p);
        }
        if !tokens.is_empty() {
            parts.push(self.embed_tokens(s, tokens, 0)?);
        }
        let mut x = if parts.len() == 1 { parts[0] } else { s.concat(&parts, 0)? };
        for layer in &self.enc {
            let h = layer.ln1.forward(s, x)?;
            let (k, v) = layer.attn.kv(s, h)?;
            let a = layer.attn.attend(s, h, k, v, None)?;
            x = s.add(x, a)?;
            let h = layer.ln2.forward(s, x)?;
            let f = layer.ff.forward(s, h)?;
            x = s.add(x, f)?;
        }
        self.enc_norm.forward(s, x)
    }

    /// Cross-attention keys/values of every decoder layer.
    pub fn cross_kv(&self, s: &mut Session<'_>, h_e: NodeId) -> Result<Vec<Kv>> {
        self.dec.iter().map(|l| l.cross.kv(s, h_e)).collect()
    }

    fn logits(&self, s: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        let o = self.dec_norm.forward(s, x)?;
        let table = s.param(self.embed);
        s.matmul_nt(o, table)
    }

    /// Teacher-forced logits `[T, V]` for decoder inputs `inputs`.
    pub fn decode_full(&self, s: &mut Session<'_>, cross: &[Kv], inputs: &[usize]) -> Result<NodeId> {
        let mut x = self.embed_tokens(s, inputs, 0)?;
        let mask = s.constant(causal_mask(inputs.len()));
        for (layer, &(ck, cv)) in self.dec.iter().zip(cross) {
            let h = layer.ln1.forward(s, x)?;
            let (k, v) = layer.self_attn.kv(s, h)?;
            let a = layer.self_attn.attend(s, h, k, v, Some(mask))?;
            x = s.add(x, a)?;
            let h = layer.ln2.forward(s, x)?;
            let c = layer.cross.attend(s, h, ck, cv, None)?;
            x = s.add(x, c)?;
            let h = layer.ln3.forward(s, x)?;
            let f = layer.ff.forward(s, h)?;
            x = s.add(x, f)?;
        }
        self.logits(s, x)
    }

    /// One decoder position. `past` holds each layer's cached keys/values
    /// (absent at the first position). Returns `[1, V]` logits and the new
    /// position's keys/values.
    pub fn step(&self, s: &mut Session<'_>, cross: &[Kv], past: Option<&[Kv]>, token: usize, pos: usize) -> Result<(NodeId, Vec<Kv>)> {
        let mut x = self.embed_tokens(s, &[token], pos)?;
        let mut fresh = Vec::with_capacity(self.dec.len());
        for (i, (layer, &(ck, cv))) in self.dec.iter().zip(cross).enumerate() {
            let h = layer.ln1.forward(s, x)?;
            let (k, v) = layer.self_attn.kv(s, h)?;
            fresh.push((k, v));
            let (kk, vv) = match past {
                Some(p) => (s.concat(&[p[i].0, k], 0)?, s.concat(&[p[i].1, v], 0)?),
                None => (k, v),
            };
            let a = layer.self_attn.attend(s, h, kk, vv, None)?;
            x = s.add(x, a)?;
            let h = layer.ln2.forward(s, x)?;
            let c = layer.cross.attend(s, h, ck, cv, None)?;
            x = s.add(x, c)?;
            let h = layer.ln3.forward(s, x)?;
            let f = layer.ff.forward(s, h)?;
            x = s.add(x, f)?;
        }
        Ok((self.logits(s, x)?, fresh))
    }

    /// Summed target negative log-likelihood and the number of target tokens.
    pub fn nll(&self, s: &mut Session<'_>, h_e: NodeId, target: &[usize]) -> Result<(NodeId, usize)> {
        if target.is_empty() {
            return Err(Error::Usage("target has no tokens".into()));
        }
        let (input, out) = teacher_forcing(target);
        self.check_ids(&out)?;
        let cross = self.cross_kv(s, h_e)?;
        let logits = self.decode_full(s, &cross, &input)?;
        let lp = s.log_softmax(logits, 1)?;
        let v = self.cfg.vocab_size;
        let flat: Vec<usize> = out.iter().enumerate().map(|(t, &y)| t * v + y).collect();
        let picked = s.pick(lp, &flat)?;
        let total = s.sum(picked);
        Ok((s.scale(total, -1.0), out.len()))
    }

    /// Encoder output for a source and optional topic mixture.
    pub fn encode_source(&self, s: &mut Session<'_>, tokens: &[usize], theta: Option<&[f64]>) -> Result<NodeId> {
        let prompt = match theta {
            Some(th) => {
                let t = s.constant(Tensor::new(&[1, th.len()], th.to_vec())?);
                Some(self.topic_prompt(s, t)?)
            }
            None => None,
        };
        self.encode(s, tokens, prompt)
    }

    /// Mean target negative log-likelihood of one pair on a frozen model.
    pub fn loss(&self, store: &ParamStore, tokens: &[usize], theta: Option<&[f64]>, target: &[usize]) -> Result<f64> {
        let mut s = Session::frozen(store);
        let h_e = self.encode_source(&mut s, tokens, theta)?;
        let (nll, n) = self.nll(&mut s, h_e, target)?;
        Ok(s.scalar(nll) / n as f64)
    }

    /// Encodes the source and prepares cross-attention for decoding.
    pub fn start(&self, store: &ParamStore, tokens: &[usize], theta: Option<&[f64]>) -> Result<DecodeState> {
        let mut s = Session::frozen(store);
        let h_e = self.encode_source(&mut s, tokens, theta)?;
        let h_e_t = s.tensor(h_e);
        self.start_from(store, h_e_t)
    }

    pub fn start_from(&self, store: &ParamStore, h_e: Tensor) -> Result<DecodeState> {
        let mut s = Session::frozen(store);
        let h = s.constant(h_e.clone());
        let cross = self.cross_kv(&mut s, h)?;
        let d = self.cfg.d_model;
        Ok(DecodeState {
            h_e,
            cross: cross.iter().map(|&(k, v)| (s.tensor(k), s.tensor(v))).collect(),
            past: vec![(Tensor::zeros(&[0, d]), Tensor::zeros(&[0, d])); self.dec.len()],
            pos: 0,
        })
    }

    /// Logits for the next position given the last token, and that position's
    /// keys/values (not yet appended to the state).
    pub fn next_logits(&self, store: &ParamStore, state: &DecodeState, token: usize) -> Result<(Vec<f64>, Vec<(Tensor, Tensor)>)> {
        let mut s = Session::frozen(store);
        let cross: Vec<Kv> = state.cross.iter().map(|(k, v)| (s.constant(k.clone()), s.constant(v.clone()))).collect();
        let past: Option<Vec<Kv>> = (state.pos > 0).then(|| state.past.iter().map(|(k, v)| (s.constant(k.clone()), s.constant(v.clone()))).collect());
        let (logits, kv) = self.step(&mut s, &cross, past.as_deref(), token, state.pos)?;
        let kv = kv.into_iter().map(|(k, v)| (s.tensor(k), s.tensor(v))).collect();
        Ok((s.value(logits).to_vec(), kv))
    }

    /// Greedy decoding; stops after `</s>` or `max_len` tokens. The returned
    /// ids exclude the end token.
    pub fn greedy(&self, store: &ParamStore, tokens: &[usize], theta: Option<&[f64]>, max_len: usize) -> Result<Vec<usize>> {
        let mut state = self.start(store, tokens, theta)?;
        let mut out = Vec::new();
        let mut last = BOS_ID;
        for _ in 0..max_len {
            let (logits, kv) = self.next_logits(store, &state, last)?;
            state.extend(kv)?;
            last = argmax(&logits);
            if last == EOS_ID {
                break;
            }
            out.push(last);
        }
        Ok(out)
    }

    /// Beam search ranked by mean token log-probability.
    pub fn beam(&self, store: &ParamStore, tokens: &[usize], theta: Option<&[f64]>, width: usize, max_len: usize) -> Result<Vec<usize>> {
        struct Hyp {
            ids: Vec<usize>,
            logp: f64,
            state: DecodeState,
        }
        let width = width.max(1);
        let mut live = vec![Hyp {
            ids: Vec::new(),
            logp: 0.0,
            state: self.start(store, tokens, theta)?,
        }];
        let mut done: Vec<(Vec<usize>, f64)> = Vec::new();
        let norm = |logp: f64, n: usize| logp / (n.max(1)) as f64;
        for _ in 0..max_len {
            let mut cands: Vec<(usize, usize, f64)> = Vec::new();
            let mut kvs = Vec::with_capacity(live.len());
            for (h, hyp) in live.iter().enumerate() {
                let last = hyp.ids.last().copied().unwrap_or(BOS_ID);
                let (logits, kv) = self.next_logits(store, &hyp.state, last)?;
                kvs.push(kv);
                let lp = log_softmax_vec(&logits);
                for (tok, &l) in lp.iter().enumerate() {
                    cands.push((h, tok, hyp.logp + l));
                }
            }
            cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
            let mut next = Vec::with_capacity(width);
            for (h, tok, logp) in cands {
                if next.len() >= width {
                    break;
                }
                if tok == EOS_ID {
                    done.push((live[h].ids.clone(), norm(logp, live[h].ids.len() + 1)));
                    continue;
                }
                let mut state = live[h].state.clone();
                state.extend(kvs[h].clone())?;
                let mut ids = live[h].ids.clone();
                ids.push(tok);
                next.push(Hyp { ids, logp, state });
            }
            live = next;
            if done.len() >= width {
                live.clear();
                break;
            }
        }
        for h in live {
            let n = h.ids.len();
            done.push((h.ids, norm(h.logp, n)));
        }
        done.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(done.into_iter().next().map(|d| d.0).unwrap_or_default())
    }
}

pub fn log_softmax_vec(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

pub fn softmax_vec(x: &[f64]) -> Vec<f64> {
    log_softmax_vec(x).into_iter().map(f64::exp).collect()
}
