//! Decoding steered toward topic words.
//!
//! At every step the cached decoder keys/values of all layers and the encoder
//! output are shifted by `ΔH`, which ascends `log Σ_{a∈A} p(a)` for a few
//! normalized gradient rounds. The next token is read from the perturbed
//! distribution; the cache keeps the unperturbed states and `ΔH` restarts at
//! zero on the next step.

use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::generator::{DecodeState, Generator, Kv};
use crate::numeric::{argmax, NodeId, ParamStore, Session, Tensor};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    pub alpha_step: f64,
    pub gamma: f64,
    pub n_iter: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            alpha_step: 0.25,
            gamma: 1.5,
            n_iter: 3,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_step >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("control needs alpha_step >= 0 and gamma >= 0, got {} and {}", self.alpha_step, self.gamma)));
        }
        Ok(())
    }

    pub fn disabled() -> Self {
        Self {
            n_iter: 0,
            ..Self::default()
        }
    }
}

/// Diagnostics of one emitted token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub token: usize,
    pub loglik_before: f64,
    pub loglik_after: f64,
    pub delta_decoder_norm: f64,
    pub delta_encoder_norm: f64,
    /// Smallest `⟨update, gradient⟩` over the rounds of this step.
    pub min_alignment: f64,
    pub aborted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub steps: Vec<TraceStep>,
    /// Steps whose perturbation was abandoned on a non-finite gradient.
    pub warnings: u64,
}

/// `log Σ_{a∈A} p[a]`, with the sum floored at `1e-12`.
pub fn attribute_loglik(p: &[f64], a: &[usize]) -> f64 {
    let mass: f64 = a.iter().filter_map(|&i| p.get(i)).sum();
    mass.max(PROB_FLOOR).ln()
}

/// Graph form of [`attribute_loglik`] on `[1, V]` logits.
pub fn attribute_objective(s: &mut Session<'_>, logits: NodeId, a: &[usize]) -> Result<NodeId> {
    let p = s.softmax(logits, 1)?;
    let picked = s.pick(p, a)?;
    let mass = s.sum(picked);
    let mass = s.clamp_min(mass, PROB_FLOOR);
    Ok(s.log(mass))
}

/// Maps topic-model word ids to generator ids by surface form, dropping
/// words the generator vocabulary lacks.
pub fn map_topic_words(bow: &Vocabulary, gen: &Vocabulary, ids: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(ids.len());
    for &i in ids {
        match bow.token(i).and_then(|t| gen.id(t)) {
            Some(g) if !out.contains(&g) => out.push(g),
            Some(_) => {}
            None => log::warn!("topic word {:?} has no generator id; dropped", bow.token(i)),
        }
    }
    out
}

/// Result of steering one decode step.
#[derive(Debug, Clone)]
pub struct Perturbed {
    pub logits_before: Vec<f64>,
    pub logits_after: Vec<f64>,
    /// Keys/values of the new position, from the unperturbed pass.
    pub kv: Vec<(Tensor, Tensor)>,
    pub delta_decoder_norm: f64,
    pub delta_encoder_norm: f64,
    pub min_alignment: f64,
    pub aborted: bool,
}

struct Delta {
    past: Vec<(Tensor, Tensor)>,
    enc: Tensor,
}

fn shifted(s: &mut Session<'_>, base: &Tensor, delta: &Tensor, var: bool) -> Result<(NodeId, Option<NodeId>)> {
    let b = s.constant(base.clone());
    let d = if var { s.variable(delta.clone()) } else { s.constant(delta.clone()) };
    Ok((s.add(b, d)?, var.then_some(d)))
}

/// Forward pass with `ΔH` applied; with `grad`, also the objective gradient
/// as `(decoder block, encoder block)`.
fn perturbed_pass(gen: &Generator, store: &ParamStore, state: &DecodeState, token: usize, delta: &Delta, a: &[usize], grad: bool) -> Result<(Vec<f64>, Option<(Vec<f64>, Vec<f64>)>)> {
    let mut s = Session::frozen(store);
    let (h_e, d_enc) = shifted(&mut s, &state.h_e, &delta.enc, grad)?;
    let cross = gen.cross_kv(&mut s, h_e)?;
    let mut past: Vec<Kv> = Vec::new();
    let mut d_past = Vec::new();
    if state.pos > 0 {
        for ((k, v), (dk, dv)) in state.past.iter().zip(&delta.past) {
            let (kn, gk) = shifted(&mut s, k, dk, grad)?;
            let (vn, gv) = shifted(&mut s, v, dv, grad)?;
            past.push((kn, vn));
            d_past.extend(gk.into_iter().chain(gv));
        }
    }
    let past_ref = (state.pos > 0).then_some(past.as_slice());
    let (logits, _) = gen.step(&mut s, &cross, past_ref, token, state.pos)?;
    let values = s.value(logits).to_vec();
    if !grad {
        return Ok((values, None));
    }
    let obj = attribute_objective(&mut s, logits, a)?;
    s.backward(obj)?;
    let mut g_dec = Vec::new();
    for n in d_past {
        g_dec.extend_from_slice(s.grad(n).unwrap_or(&[]));
    }
    let g_enc = d_enc.and_then(|n| s.grad(n).map(<[f64]>::to_vec)).unwrap_or_default();
    Ok((values, Some((g_dec, g_enc))))
}

fn l2(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |acc, x| acc + x * x).sqrt()
}

/// Normalized ascent update `α g / ‖g‖^γ`; zero when the gradient vanishes.
fn ascent(g: &[f64], alpha: f64, gamma: f64) -> Vec<f64> {
    let n = l2(g);
    if n == 0.0 {
        return vec![0.0; g.len()];
    }
    let c = alpha / n.powf(gamma);
    g.iter().map(|x| c * x).collect()
}

fn add_flat(ts: &mut [(Tensor, Tensor)], upd: &[f64]) {
    let mut off = 0;
    for (k, v) in ts.iter_mut() {
        for t in [k, v] {
            let n = t.numel();
            for (x, u) in t.data_mut().iter_mut().zip(&upd[off..off + n]) {
                *x += u;
            }
            off += n;
        }
    }
}

/// Runs `n_iter` ascent rounds on the current step's states and returns the
/// distributions before and after.
pub fn perturb_states(gen: &Generator, store: &ParamStore, state: &DecodeState, token: usize, a: &[usize], cfg: &ControlConfig) -> Result<Perturbed> {
    cfg.validate()?;
    let (logits_before, kv) = gen.next_logits(store, state, token)?;
    let mut out = Perturbed {
        logits_after: logits_before.clone(),
        logits_before,
        kv,
        delta_decoder_norm: 0.0,
        delta_encoder_norm: 0.0,
        min_alignment: f64::INFINITY,
        aborted: false,
    };
    if cfg.n_iter == 0 {
        return Ok(out);
    }
    if a.is_empty() {
        return Err(Error::Usage("topic word set is empty".into()));
    }
    let mut delta = Delta {
        past: state.past.iter().map(|(k, v)| (Tensor::zeros(k.shape()), Tensor::zeros(v.shape()))).collect(),
        enc: Tensor::zeros(state.h_e.shape()),
    };
    for _ in 0..cfg.n_iter {
        let (_, g) = perturbed_pass(gen, store, state, token, &delta, a, true)?;
        let (g_dec, g_enc) = g.expect("gradient requested");
        if !g_dec.iter().chain(&g_enc).all(|x| x.is_finite()) {
            log::warn!("non-finite control gradient at position {}; step left unperturbed", state.pos);
            out.aborted = true;
            out.logits_after = out.logits_before.clone();
            return Ok(out);
        }
        let u_dec = ascent(&g_dec, cfg.alpha_step, cfg.gamma);
        let u_enc = ascent(&g_enc, cfg.alpha_step, cfg.gamma);
        let align: f64 = u_dec.iter().zip(&g_dec).chain(u_enc.iter().zip(&g_enc)).map(|(u, g)| u * g).sum();
        out.min_alignment = out.min_alignment.min(align);
        add_flat(&mut delta.past, &u_dec);
        for (x, u) in delta.enc.data_mut().iter_mut().zip(&u_enc) {
            *x += u;
        }
    }
    let (after, _) = perturbed_pass(gen, store, state, token, &delta, a, false)?;
    out.logits_after = after;
    out.delta_decoder_norm = delta.past.iter().flat_map(|(k, v)| k.data().iter().chain(v.data())).fold(0.0, |acc, x| acc + x * x).sqrt();
    out.delta_encoder_norm = delta.enc.l2_norm();
    Ok(out)
}

/// Greedy decoding where each token comes from the perturbed distribution.
/// Stops after `</s>` or `max_len` tokens.
pub fn controlled_decode(gen: &Generator, store: &ParamStore, tokens: &[usize], theta: Option<&[f64]>, a: &[usize], cfg: &ControlConfig, max_len: usize) -> Result<(Vec<usize>, DecodeTrace)> {
    let mut cfg = cfg.clone();
    if a.is_empty() && cfg.n_iter > 0 {
        log::warn!("no topic words map into the generator vocabulary; decoding without control");
        cfg.n_iter = 0;
    }
    let softmax = crate::generator::softmax_vec;
    let mut state = gen.start(store, tokens, theta)?;
    let mut trace = DecodeTrace::default();
    let mut out = Vec::new();
    let mut last = BOS_ID;
    for step in 0..max_len {
        let p = perturb_states(gen, store, &state, last, a, &cfg)?;
        state.extend(p.kv)?;
        last = argmax(&p.logits_after);
        if p.aborted {
            trace.warnings += 1;
        }
        trace.steps.push(TraceStep {
            step,
            token: last,
            loglik_before: attribute_loglik(&softmax(&p.logits_before), a),
            loglik_after: attribute_loglik(&softmax(&p.logits_after), a),
            delta_decoder_norm: p.delta_decoder_norm,
            delta_encoder_norm: p.delta_encoder_norm,
            min_alignment: if p.min_alignment.is_finite() { p.min_alignment } else { 0.0 },
            aborted: p.aborted,
        });
        if last == EOS_ID {
            break;
        }
        out.push(last);
    }
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::VocabKind;
    use crate::generator::GeneratorConfig;
    use crate::numeric::gradcheck::check_gradients;
    use crate::rng;

    fn tiny() -> (ParamStore, Generator) {
        let cfg = GeneratorConfig {
            vocab_size: 40,
            d_model: 16,
            enc_layers: 1,
            dec_layers: 2,
            heads: 2,
            ff_hidden: 32,
            prompt_len: 3,
            prompt_hidden: 8,
            topics: 4,
            max_input_tokens: 64,
            max_gen_len: 8,
        };
        let mut store = ParamStore::new();
        let g = Generator::new(&mut store, cfg, &mut rng::seeded(5)).unwrap();
        (store, g)
    }

    #[test]
    fn loglik_fixtures() {
        let p = vec![0.01; 100];
        let all: Vec<usize> = (0..100).collect();
        assert!(attribute_loglik(&p, &all).abs() < 1e-12);
        assert!((attribute_loglik(&p, &all[..10]) - 0.1f64.ln()).abs() < 1e-12);
        assert_eq!(attribute_loglik(&[1.0, 0.0], &[1]), PROB_FLOOR.ln());
    }

    #[test]
    fn objective_gradient() {
        let x = Tensor::new(&[1, 6], vec![0.3, -1.0, 2.0, 0.5, 0.0, 1.5]).unwrap();
        let c = check_gradients(&[x], 1e-5, |g, ids| {
            let p = g.softmax(ids[0], 1)?;
            let picked = g.pick(p, &[1, 4])?;
            let m = g.sum(picked);
            let m = g.clamp_min(m, PROB_FLOOR);
            Ok(g.log(m))
        })
        .unwrap();
        assert!(c.max_rel_error() < 1e-4);
    }

    #[test]
    fn zero_iterations_match_greedy() {
        let (store, g) = tiny();
        let src = [5, 6, 7, 8];
        let th = [0.25; 4];
        let plain = g.greedy(&store, &src, Some(&th), 8).unwrap();
        let (ctl, trace) = controlled_decode(&g, &store, &src, Some(&th), &[10, 11], &ControlConfig::disabled(), 8).unwrap();
        assert_eq!(plain, ctl);
        assert!(trace.steps.iter().all(|s| s.loglik_before == s.loglik_after));
    }

    #[test]
    fn zero_step_leaves_distribution_unchanged() {
        let (store, g) = tiny();
        let mut state = g.start(&store, &[5, 6], None).unwrap();
        let (_, kv) = g.next_logits(&store, &state, BOS_ID).unwrap();
        state.extend(kv).unwrap();
        let cfg = ControlConfig {
            alpha_step: 0.0,
            ..ControlConfig::default()
        };
        let p = perturb_states(&g, &store, &state, 9, &[10], &cfg).unwrap();
        assert_eq!(p.logits_before, p.logits_after);
        assert_eq!(p.delta_decoder_norm, 0.0);
    }

    #[test]
    fn perturbation_ascends() {
        let (store, g) = tiny();
        let mut state = g.start(&store, &[5, 6, 7], None).unwrap();
        let mut last = BOS_ID;
        let a = [10, 12, 14];
        let cfg = ControlConfig {
            alpha_step: 0.02,
            gamma: 1.0,
            n_iter: 3,
        };
        for _ in 0..4 {
            let p = perturb_states(&g, &store, &state, last, &a, &cfg).unwrap();
            let before = attribute_loglik(&crate::generator::softmax_vec(&p.logits_before), &a);
            let after = attribute_loglik(&crate::generator::softmax_vec(&p.logits_after), &a);
            assert!(after >= before, "{after} < {before}");
            assert!(p.min_alignment > 0.0);
            last = argmax(&p.logits_before);
            state.extend(p.kv).unwrap();
        }
    }

    #[test]
    fn topic_word_mapping_drops_unknown() {
        let bow = Vocabulary::from_list(VocabKind::Bow, vec!["music".into(), "guitar".into(), "zebra".into()]).unwrap();
        let gen = Vocabulary::from_list(VocabKind::Generation, vec!["<sep>".into(), "guitar".into(), "music".into()]).unwrap();
        assert_eq!(map_topic_words(&bow, &gen, &[0, 1, 2]), vec![6, 5]);
    }

    #[test]
    fn config_rejects_negative_step() {
        let cfg = ControlConfig {
            alpha_step: -1.0,
            ..ControlConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
