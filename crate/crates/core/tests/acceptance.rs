//! Acceptance suite. Runs every criterion in order, prints one line per
//! criterion and exits non-zero if any failed or overran its time budget.
//!
//! `cargo test --test acceptance -- 3 5` runs only criteria 3 and 5.

mod common;

use std::time::{Duration, Instant};

use rand::Rng;
use utged::config::Config;
use utged::control::{attribute_objective, controlled_decode, perturb_states, ControlConfig};
use utged::corpus::BowVector;
use utged::evaluation::{self, lcs_len, rouge, rouge_l, SweepAxis};
use utged::generator::{softmax_vec, Generator, GeneratorConfig};
use utged::numeric::gradcheck::check_gradients;
use utged::numeric::{Graph, NodeId, ParamStore, Session, Tensor};
use utged::ntm::{NtmConfig, TopicModel};
use utged::pipeline::{build_examples, tokenize_users, Example, Vocabs};
use utged::rng;
use utged::selection::{rank_and_keep, select, ScoreMode, Shortlist};
use utged::similarity::{SentenceEmbedding, SimilarityMatrix};
use utged::synth::{self, alignment_precision, SynthConfig};
use utged::training::{self, batch_loss, Checkpoint, JointTrainer, Model};

use common::{param_check, random_tensor, session_check, GradReport};

const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const SIMPLEX_TOL: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria = [
        Criterion { id: 1, name: "gradient correctness", budget: mins(2), run: gradients },
        Criterion { id: 2, name: "simplex and normalization", budget: mins(1), run: simplex },
        Criterion { id: 3, name: "selection matches brute force", budget: mins(1), run: selection_oracle },
        Criterion { id: 4, name: "ROUGE oracle", budget: mins(1), run: rouge_oracle },
        Criterion { id: 5, name: "topic recovery", budget: mins(10), run: topic_recovery },
        Criterion { id: 6, name: "overfit memorization", budget: mins(10), run: overfit },
        Criterion { id: 7, name: "controlled-decoding ascent", budget: mins(5), run: ascent },
        Criterion { id: 8, name: "ablation ordering", budget: mins(30), run: ablation },
        Criterion { id: 9, name: "determinism", budget: mins(20), run: determinism },
        Criterion { id: 10, name: "sweep grids", budget: mins(60), run: sweeps },
    ];
    let mut failed = 0;
    let mut ran = 0;
    for c in criteria.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let out = (c.run)();
        let took = start.elapsed();
        let in_time = took <= c.budget;
        let pass = out.pass && in_time;
        ran += 1;
        if !pass {
            failed += 1;
        }
        println!(
            "{} [{:>2}] {} ({:.1}s of {}s{}): {}",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            took.as_secs_f64(),
            c.budget.as_secs(),
            if in_time { "" } else { ", over budget" },
            out.detail
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn mins(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

// ---------------------------------------------------------------- 1

/// Weighted sum with fixed pseudo-random weights, so every output element
/// affects the checked scalar.
fn wsum(g: &mut Graph<'_>, x: NodeId) -> utged::Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let w = g.constant(random_tensor(&shape, 1.0, 99));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

type Primitive = (&'static str, Vec<Tensor>, fn(&mut Graph<'_>, &[NodeId]) -> utged::Result<NodeId>);

fn primitives() -> Vec<Primitive> {
    let r = |shape: &[usize], seed: u64| random_tensor(shape, 1.0, seed);
    let positive = |shape: &[usize], seed: u64| {
        let mut t = random_tensor(shape, 1.0, seed);
        t.data_mut().iter_mut().for_each(|x| *x = 0.5 + x.abs());
        t
    };
    let away_from_zero = |shape: &[usize], seed: u64| {
        let mut t = random_tensor(shape, 1.0, seed);
        t.data_mut().iter_mut().for_each(|x| *x = x.signum() * (0.2 + x.abs()));
        t
    };
    vec![
        ("add", vec![r(&[3, 4], 1), r(&[3, 4], 2)], |g, x| {
            let y = g.add(x[0], x[1])?;
            wsum(g, y)
        }),
        ("sub", vec![r(&[3, 4], 3), r(&[3, 4], 4)], |g, x| {
            let y = g.sub(x[0], x[1])?;
            wsum(g, y)
        }),
        ("mul", vec![r(&[3, 4], 5), r(&[3, 4], 6)], |g, x| {
            let y = g.mul(x[0], x[1])?;
            wsum(g, y)
        }),
        ("add_row", vec![r(&[3, 4], 7), r(&[4], 8)], |g, x| {
            let y = g.add_row(x[0], x[1])?;
            wsum(g, y)
        }),
        ("scale", vec![r(&[2, 3], 9)], |g, x| {
            let y = g.scale(x[0], -1.7);
            wsum(g, y)
        }),
        ("add_scalar", vec![r(&[2, 3], 10)], |g, x| {
            let y = g.add_scalar(x[0], 0.3);
            let y = g.mul(y, y)?;
            wsum(g, y)
        }),
        ("exp", vec![r(&[2, 3], 11)], |g, x| {
            let y = g.exp(x[0]);
            wsum(g, y)
        }),
        ("log", vec![positive(&[2, 3], 12)], |g, x| {
            let y = g.log(x[0]);
            wsum(g, y)
        }),
        ("tanh", vec![r(&[2, 3], 13)], |g, x| {
            let y = g.tanh(x[0]);
            wsum(g, y)
        }),
        ("softplus", vec![r(&[2, 3], 14)], |g, x| {
            let y = g.softplus(x[0]);
            wsum(g, y)
        }),
        ("gelu", vec![r(&[2, 3], 15)], |g, x| {
            let y = g.gelu(x[0]);
            wsum(g, y)
        }),
        ("clamp_min", vec![away_from_zero(&[2, 3], 16)], |g, x| {
            let y = g.clamp_min(x[0], 0.0);
            wsum(g, y)
        }),
        ("matmul", vec![r(&[3, 4], 17), r(&[4, 2], 18)], |g, x| {
            let y = g.matmul(x[0], x[1])?;
            wsum(g, y)
        }),
        ("matmul_nt", vec![r(&[3, 4], 19), r(&[2, 4], 20)], |g, x| {
            let y = g.matmul_nt(x[0], x[1])?;
            wsum(g, y)
        }),
        ("transpose", vec![r(&[3, 4], 21)], |g, x| {
            let y = g.transpose(x[0])?;
            wsum(g, y)
        }),
        ("softmax", vec![r(&[3, 5], 22)], |g, x| {
            let y = g.softmax(x[0], 1)?;
            wsum(g, y)
        }),
        ("log_softmax", vec![r(&[3, 5], 23)], |g, x| {
            let y = g.log_softmax(x[0], 1)?;
            wsum(g, y)
        }),
        ("layer_norm", vec![r(&[3, 5], 24), r(&[5], 25), r(&[5], 26)], |g, x| {
            let y = g.layer_norm(x[0], x[1], x[2])?;
            wsum(g, y)
        }),
        ("reshape", vec![r(&[3, 4], 27)], |g, x| {
            let y = g.reshape(x[0], &[4, 3])?;
            wsum(g, y)
        }),
        ("concat rows", vec![r(&[2, 3], 28), r(&[1, 3], 29)], |g, x| {
            let y = g.concat(&[x[0], x[1]], 0)?;
            wsum(g, y)
        }),
        ("concat columns", vec![r(&[2, 3], 30), r(&[2, 2], 31)], |g, x| {
            let y = g.concat(&[x[0], x[1]], 1)?;
            wsum(g, y)
        }),
        ("slice", vec![r(&[4, 3], 32)], |g, x| {
            let y = g.slice(x[0], 0, 1, 3)?;
            wsum(g, y)
        }),
        ("embedding", vec![r(&[6, 3], 33)], |g, x| {
            let y = g.embedding(x[0], &[1, 4, 1, 5])?;
            wsum(g, y)
        }),
        ("norm", vec![r(&[2, 3], 34)], |g, x| Ok(g.norm(x[0]))),
        ("sum", vec![r(&[2, 3], 35)], |g, x| {
            let y = g.mul(x[0], x[0])?;
            Ok(g.sum(y))
        }),
        ("mean", vec![r(&[2, 3], 36)], |g, x| {
            let y = g.mul(x[0], x[0])?;
            Ok(g.mean(y))
        }),
        ("pick", vec![r(&[2, 4], 37)], |g, x| {
            let y = g.pick(x[0], &[0, 3, 5, 3])?;
            wsum(g, y)
        }),
    ]
}

fn tiny_ntm() -> (ParamStore, TopicModel) {
    let mut store = ParamStore::new();
    let cfg = NtmConfig {
        vocab_size: 7,
        hidden: 5,
        topics: 3,
    };
    let m = TopicModel::new(&mut store, cfg, &mut rng::seeded(3)).unwrap();
    (store, m)
}

fn tiny_gen_cfg() -> GeneratorConfig {
    GeneratorConfig {
        vocab_size: 12,
        d_model: 8,
        enc_layers: 1,
        dec_layers: 2,
        heads: 2,
        ff_hidden: 16,
        prompt_len: 2,
        prompt_hidden: 6,
        topics: 3,
        max_input_tokens: 32,
        max_gen_len: 8,
    }
}

fn tiny_gen() -> (ParamStore, Generator) {
    let mut store = ParamStore::new();
    let g = Generator::new(&mut store, tiny_gen_cfg(), &mut rng::seeded(4)).unwrap();
    (store, g)
}

fn tiny_config() -> Config {
    let mut c = Config::default();
    let g = tiny_gen_cfg();
    c.model.topics = 3;
    c.model.ntm_hidden = 5;
    c.model.d_model = g.d_model;
    c.model.heads = g.heads;
    c.model.ff_hidden = g.ff_hidden;
    c.model.enc_layers = g.enc_layers;
    c.model.dec_layers = g.dec_layers;
    c.model.prompt_len = g.prompt_len;
    c.model.prompt_hidden = g.prompt_hidden;
    c.data.max_input_tokens = 32;
    c
}

fn bow(pairs: &[(usize, u32)]) -> BowVector {
    BowVector::from_counts(pairs.iter().copied().collect())
}

fn gradients() -> Outcome {
    let mut worst: Vec<(String, f64)> = Vec::new();
    for (name, inputs, f) in primitives() {
        match check_gradients(&inputs, FD_STEP, f) {
            Ok(c) => worst.push((name.to_string(), c.max_rel_error())),
            Err(e) => return Outcome::new(false, format!("{name}: {e}")),
        }
    }

    // composed topic-model loss over every topic-model parameter
    let (store, ntm) = tiny_ntm();
    let bows = [bow(&[(0, 3), (2, 1), (5, 2)]), bow(&[(1, 4), (6, 1)])];
    let refs: Vec<&BowVector> = bows.iter().collect();
    let x = ntm.input_matrix(&refs);
    let counts = ntm.bow_matrix(&refs);
    let eps = ntm.sample_eps(2, &mut rng::seeded(5));
    let rep = param_check(&store, FD_STEP, |s| {
        let xn = s.constant(x.clone());
        let cn = s.constant(counts.clone());
        let f = ntm.forward(s, xn, Some(eps.clone()))?;
        Ok(ntm.loss(s, cn, f.mu, f.log_sigma, f.recon)?.0)
    });
    collect(&mut worst, "L_NTM", rep);

    // generator negative log-likelihood with a topic prompt
    let (store, gen) = tiny_gen();
    let theta = [0.2, 0.5, 0.3];
    let rep = param_check(&store, FD_STEP, |s| {
        let h = gen.encode_source(s, &[4, 5, 6, 7, 4], Some(&theta))?;
        let (nll, n) = gen.nll(s, h, &[5, 6, 8])?;
        Ok(s.scale(nll, 1.0 / n as f64))
    });
    collect(&mut worst, "L_SIG", rep);

    // joint weighted loss, where the prompt carries gradient into the topic model
    let mut cfg = tiny_config();
    cfg.train.alpha_loss = 0.3;
    let model = Model::new(&cfg, 12, 7).unwrap();
    let ex = |src: Vec<usize>, tgt: Vec<usize>, b: BowVector| Example {
        user_id: "u".into(),
        source: src,
        target: tgt,
        target_tokens: Vec::new(),
        bow: b,
        history_docs: 1,
        kept: vec![0],
        scores: Vec::new(),
    };
    let batch = [ex(vec![4, 5, 6], vec![7, 8], bows[0].clone()), ex(vec![9, 10], vec![11, 4, 5], bows[1].clone())];
    let batch: Vec<&Example> = batch.iter().collect();
    let rep = param_check(&model.store, FD_STEP, |s| {
        let mut eps_rng = rng::stream(1, "gradcheck");
        Ok(batch_loss(s, &model, &batch, &cfg, &mut eps_rng)?.0)
    });
    collect(&mut worst, "joint loss", rep);

    // attribute objective with respect to the steered states
    let (store, gen) = tiny_gen();
    let mut state = gen.start(&store, &[4, 5, 6, 7], Some(&theta)).unwrap();
    let (_, kv) = gen.next_logits(&store, &state, 1).unwrap();
    state.extend(kv).unwrap();
    let mut inputs = vec![state.h_e.clone()];
    for (k, v) in &state.past {
        inputs.push(k.clone());
        inputs.push(v.clone());
    }
    let pos = state.pos;
    let rep = session_check(&store, &inputs, FD_STEP, |s, ids| {
        let cross = gen.cross_kv(s, ids[0])?;
        let past: Vec<(NodeId, NodeId)> = ids[1..].chunks(2).map(|c| (c[0], c[1])).collect();
        let (logits, _) = gen.step(s, &cross, Some(&past), 9, pos)?;
        attribute_objective(s, logits, &[5, 8, 10])
    });
    collect(&mut worst, "attribute objective", rep);

    let (name, max) = worst.iter().max_by(|a, b| a.1.total_cmp(&b.1)).cloned().unwrap();
    let pass = worst.iter().all(|(_, e)| *e < GRAD_TOL);
    let failing: Vec<&str> = worst.iter().filter(|(_, e)| *e >= GRAD_TOL).map(|(n, _)| n.as_str()).collect();
    Outcome::new(
        pass,
        format!("{} checks, max relative error {max:.2e} ({name}){}", worst.len(), if failing.is_empty() { String::new() } else { format!("; failing: {failing:?}") }),
    )
}

fn collect(worst: &mut Vec<(String, f64)>, name: &str, rep: utged::Result<GradReport>) {
    match rep {
        Ok(r) => worst.push((format!("{name} / {}", r.worst_name), r.max_rel_error)),
        Err(e) => worst.push((format!("{name}: {e}"), f64::INFINITY)),
    }
}

// ---------------------------------------------------------------- 2

fn on_simplex(p: &[f64]) -> bool {
    p.iter().all(|&x| x >= 0.0 && x.is_finite()) && (p.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
}

fn simplex() -> Outcome {
    let mut passes = 0;
    let mut failures = Vec::new();
    let mut r = rng::seeded(2024);
    let check = |what: &str, p: &[f64], failures: &mut Vec<String>| {
        if !on_simplex(p) && failures.len() < 5 {
            failures.push(format!("{what}: sum {}", p.iter().sum::<f64>()));
        }
    };
    for model_seed in 0..10u64 {
        let mut cfg = tiny_config();
        cfg.train.seed = model_seed;
        cfg.model.topics = 2 + model_seed as usize % 4;
        let model = Model::new(&cfg, 12, 7).unwrap();
        for _ in 0..100 {
            // bags of words from tiny to very large counts
            let scale = [1u32, 10, 1000, 100_000][r.random_range(0..4)];
            let mut pairs: Vec<(usize, u32)> = Vec::new();
            for i in 0..7 {
                if r.random_bool(0.6) {
                    pairs.push((i, r.random_range(1..=scale)));
                }
            }
            let b = bow(&pairs);
            let refs = [&b];
            let mut s = Session::frozen(&model.store);
            let x = s.constant(model.ntm.input_matrix(&refs));
            let eps = model.ntm.sample_eps(1, &mut r);
            let f = match model.ntm.forward(&mut s, x, Some(eps)) {
                Ok(f) => f,
                Err(e) => return Outcome::new(false, format!("topic model forward failed: {e}")),
            };
            check("theta", s.value(f.theta), &mut failures);
            check("reconstruction", s.value(f.recon), &mut failures);
            let theta = model.theta(&b).unwrap();
            check("theta at mean", &theta, &mut failures);

            let len = r.random_range(1..10);
            let src: Vec<usize> = (0..len).map(|_| r.random_range(0..12)).collect();
            let tpee = r.random_bool(0.5).then_some(theta.as_slice());
            let gen = &model.gen;
            let mut s = Session::frozen(&model.store);
            let h = gen.encode_source(&mut s, &src, tpee).unwrap();
            let cross = gen.cross_kv(&mut s, h).unwrap();
            let tgt: Vec<usize> = (0..4).map(|_| r.random_range(1..12)).collect();
            let logits = gen.decode_full(&mut s, &cross, &tgt).unwrap();
            let probs = s.softmax(logits, 1).unwrap();
            let v = s.value(probs).to_vec();
            for row in v.chunks(12) {
                check("teacher-forced token distribution", row, &mut failures);
            }
            let state = gen.start(&model.store, &src, tpee).unwrap();
            let ctl = ControlConfig::default();
            let p = perturb_states(gen, &model.store, &state, 1, &[5, 6], &ctl).unwrap();
            check("next-token distribution", &softmax_vec(&p.logits_before), &mut failures);
            check("steered next-token distribution", &softmax_vec(&p.logits_after), &mut failures);
            passes += 1;
        }
    }
    Outcome::new(failures.is_empty(), format!("{passes} random forward passes, {} violations {:?}", failures.len(), failures))
}

// ---------------------------------------------------------------- 3

/// Step-by-step re-simulation: boolean pool mask, scores as raw sums over
/// the live pool, candidates sorted by (score desc, position asc).
fn brute_select(sim: &[Vec<f64>], lambda: f64, recompute: bool) -> Vec<usize> {
    let n = sim.len();
    let mut live = vec![true; n];
    let mut out = Vec::new();
    let full: Vec<f64> = (0..n).map(|u| sim[u].iter().sum::<f64>()).collect();
    while live.iter().any(|&b| b) {
        let mut cands: Vec<(f64, usize)> = (0..n)
            .filter(|&u| live[u])
            .map(|u| {
                let s = if recompute { (0..n).filter(|&v| live[v]).map(|v| sim[u][v]).sum::<f64>() } else { full[u] };
                (s, u)
            })
            .collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let h = cands[0].1;
        out.push(h);
        for v in 0..n {
            if v == h || sim[h][v] > lambda {
                live[v] = false;
            }
        }
    }
    out
}

fn random_similarity(r: &mut rng::Rng, n: usize) -> Vec<Vec<f64>> {
    if r.random_bool(0.5) {
        // cosines of random embeddings
        let embs: Vec<SentenceEmbedding> = (0..n).map(|_| SentenceEmbedding::dense((0..3).map(|_| r.random_range(-1.0..1.0)).collect())).collect();
        let m = SimilarityMatrix::from_embeddings(&embs);
        (0..n).map(|i| (0..n).map(|j| m.get(i, j)).collect()).collect()
    } else {
        // coarse grid values so exact ties occur
        let mut m = vec![vec![1.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let v = r.random_range(-8i32..=8) as f64 / 8.0;
                m[i][j] = v;
                m[j][i] = v;
            }
        }
        m
    }
}

fn selection_oracle() -> Outcome {
    let mut r = rng::seeded(77);
    let mut mismatches = 0;
    let mut bound_violations = 0;
    let mut budget_mismatches = 0;
    for inst in 0..500 {
        let n = r.random_range(1..=8);
        let sim = random_similarity(&mut r, n);
        let lambda = if inst % 2 == 0 { 0.8 } else { r.random_range(0.05..=1.0) };
        let mode = if inst % 3 == 0 { ScoreMode::Static } else { ScoreMode::Recompute };
        let m = SimilarityMatrix::from_values(n, sim.iter().flatten().copied().collect()).unwrap();
        let got: Shortlist = select(&m, lambda, mode);
        let idx = got.indices();
        if idx != brute_select(&sim, lambda, mode == ScoreMode::Recompute) {
            mismatches += 1;
        }
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                if sim[i][j] > lambda {
                    bound_violations += 1;
                }
            }
        }
        // budget fill against the largest fitting prefix of the ranking
        let docs: Vec<Vec<String>> = (0..n).map(|i| vec![format!("w{i}"); r.random_range(1..6)]).collect();
        let budget = r.random_range(1..20);
        let (kept, seq) = rank_and_keep(&got, &docs, budget).unwrap();
        let mut ranked = got.entries.clone();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
        let cost = |k: usize| ranked[..k].iter().map(|e| docs[e.index].len()).sum::<usize>() + k.saturating_sub(1);
        let k = (0..=ranked.len()).rev().find(|&k| cost(k) <= budget).unwrap();
        let mut expect: Vec<usize> = ranked[..k.max(1)].iter().map(|e| e.index).collect();
        expect.sort_unstable();
        if kept != expect || seq.len() > budget {
            budget_mismatches += 1;
        }
    }
    Outcome::new(
        mismatches == 0 && bound_violations == 0 && budget_mismatches == 0,
        format!("500 instances: {mismatches} shortlist mismatches, {bound_violations} redundancy violations, {budget_mismatches} budget mismatches"),
    )
}

// ---------------------------------------------------------------- 4

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Longest common subsequence by enumerating every subsequence of `a`.
fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let len = mask.count_ones() as usize;
        if len <= best {
            continue;
        }
        let mut j = 0;
        let mut ok = true;
        for (i, &c) in a.iter().enumerate() {
            if mask & (1 << i) != 0 {
                while j < b.len() && b[j] != c {
                    j += 1;
                }
                if j == b.len() {
                    ok = false;
                    break;
                }
                j += 1;
            }
        }
        if ok {
            best = len;
        }
    }
    best
}

fn all_sequences(alphabet: &[u8], max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for &c in alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn rouge_oracle() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let mut bad = Vec::new();
    // (candidate, reference, [P,R,F] for R-1, R-2, R-L), counted by hand
    let fixtures: &[(&str, &str, [[f64; 3]; 3])] = &[
        ("the cat", "the cat sat", [[1.0, 2.0 / 3.0, 0.8], [1.0, 0.5, 2.0 / 3.0], [1.0, 2.0 / 3.0, 0.8]]),
        ("a b c", "a b c", [[1.0; 3], [1.0; 3], [1.0; 3]]),
        ("a b", "c d", [[0.0; 3], [0.0; 3], [0.0; 3]]),
        // clipped unigram count: "the" matches once
        ("the the the", "the cat", [[1.0 / 3.0, 0.5, 0.4], [0.0; 3], [1.0 / 3.0, 0.5, 0.4]]),
        // LCS "a c d" is not contiguous
        ("a x c d", "a c y d", [[0.75, 0.75, 0.75], [0.0; 3], [0.75, 0.75, 0.75]]),
        // reordering keeps R-1, breaks bigrams and shortens the LCS
        ("c b a", "a b c", [[1.0, 1.0, 1.0], [0.0; 3], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]]),
        // single-token candidate has no bigram
        ("cat", "the cat", [[1.0, 0.5, 2.0 / 3.0], [0.0; 3], [1.0, 0.5, 2.0 / 3.0]]),
    ];
    for (c, r, want) in fixtures {
        let s = rouge(&toks(c), &toks(r));
        for (got, w, label) in [(s.r1, want[0], "R-1"), (s.r2, want[1], "R-2"), (s.rl, want[2], "R-L")] {
            if !(close(got.precision, w[0]) && close(got.recall, w[1]) && close(got.f1, w[2])) {
                bad.push(format!("{c:?} vs {r:?} {label}: {got:?}"));
            }
        }
    }
    if rouge(&toks("a b"), &[]) != evaluation::RougeScore::default() {
        bad.push("empty reference is not zero".into());
    }

    let mut pairs = 0usize;
    let mut lcs_bad = 0usize;
    for (alphabet, max_len) in [(&b"ab"[..], 8), (&b"abc"[..], 5)] {
        let seqs = all_sequences(alphabet, max_len);
        for a in &seqs {
            for b in &seqs {
                pairs += 1;
                let l = brute_lcs(a, b);
                if lcs_len(a, b) != l {
                    lcs_bad += 1;
                    continue;
                }
                if a.is_empty() || b.is_empty() {
                    continue;
                }
                let sa: Vec<String> = a.iter().map(|c| (*c as char).to_string()).collect();
                let sb: Vec<String> = b.iter().map(|c| (*c as char).to_string()).collect();
                let got = rouge_l(&sa, &sb);
                let (p, rc) = (l as f64 / a.len() as f64, l as f64 / b.len() as f64);
                let f = if p + rc > 0.0 { 2.0 * p * rc / (p + rc) } else { 0.0 };
                if !(close(got.precision, p) && close(got.recall, rc) && close(got.f1, f)) {
                    lcs_bad += 1;
                }
            }
        }
    }
    if lcs_bad > 0 {
        bad.push(format!("{lcs_bad} LCS disagreements"));
    }
    Outcome::new(bad.is_empty(), format!("{} fixtures, {pairs} exhaustive LCS pairs; problems: {bad:?}", fixtures.len()))
}

// ---------------------------------------------------------------- 5

/// Pretraining schedule for the planted-topic corpus: the default learning
/// rate with many more epochs than the full-corpus default, since the
/// corpus has a few hundred users instead of a hundred thousand.
fn recovery_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.model.topics = 3;
    cfg.data.bow_vocab_size = 300;
    cfg.train.ntm_pretrain_epochs = 1000;
    cfg.train.ntm_batch_size = 8;
    cfg.train.seed = seed;
    cfg
}

fn topic_recovery() -> Outcome {
    let mut good_seeds = 0;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let (records, planted) = synth::generate(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
        let users = tokenize_users(&records);
        let cfg = recovery_config(seed);
        let vocabs = Vocabs::build(&users, &cfg.data);
        let examples = build_examples(&users, &vocabs, &cfg.data, false, None).unwrap();
        let mut model = Model::new(&cfg, vocabs.gen.len(), vocabs.bow.len()).unwrap();
        let bows: Vec<_> = examples.iter().map(|e| &e.bow).collect();
        if let Err(e) = training::pretrain_ntm(&mut model, &bows, &cfg) {
            rows.push(format!("seed {seed}: {e}"));
            continue;
        }
        let learned: Vec<Vec<String>> = (0..3).map(|c| vocabs.bow.decode(&model.ntm.topic_words(&model.store, c, 10))).collect();
        let prec = alignment_precision(&learned, &planted.topics, 10);
        let hits = prec.iter().filter(|&&p| p >= 0.8).count();
        if hits >= 2 {
            good_seeds += 1;
        }
        rows.push(format!("seed {seed}: {}", prec.iter().map(|p| format!("{p:.1}")).collect::<Vec<_>>().join("/")));
    }
    Outcome::new(good_seeds >= 4, format!("{good_seeds}/5 seeds recover >= 2 topics at precision 0.8 [{}]", rows.join(", ")))
}

// ---------------------------------------------------------------- 6

/// Synthetic pairs with short selected histories under the small generator
/// shape (d=128, 2+2 layers).
fn synth_examples(users: usize, seed: u64, cfg: &Config) -> (Vocabs, Vec<Example>) {
    let (records, _) = synth::generate(&SynthConfig { users, seed, ..SynthConfig::default() }).unwrap();
    let users = tokenize_users(&records);
    let vocabs = Vocabs::build(&users, &cfg.data);
    let ex = build_examples(&users, &vocabs, &cfg.data, cfg.train.selection, None).unwrap();
    (vocabs, ex)
}

fn small_run_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.model.topics = 3;
    cfg.data.max_input_tokens = 64;
    cfg.train.lr_sig = 1e-3;
    cfg.train.seed = seed;
    cfg
}

fn overfit() -> Outcome {
    let mut cfg = small_run_config(7);
    cfg.train.batch_size = 32;
    let (vocabs, ex) = synth_examples(32, 7, &cfg);
    let mut model = Model::new(&cfg, vocabs.gen.len(), vocabs.bow.len()).unwrap();
    let mut trainer = JointTrainer::new(&model, &cfg);
    let batch: Vec<&Example> = ex.iter().collect();
    let exact = |model: &Model| {
        ex.iter()
            .filter(|e| {
                let th = model.theta(&e.bow).unwrap();
                model.gen.greedy(&model.store, &e.source, Some(&th), 32).unwrap() == e.target
            })
            .count()
    };
    let mut last = f64::INFINITY;
    for step in 1..=300 {
        match trainer.step(&mut model, &batch, &cfg) {
            Ok(row) => last = row.l_sig,
            Err(e) => return Outcome::new(false, format!("step {step}: {e}")),
        }
        if last < 0.1 && (step % 10 == 0 || step == 300) {
            let hits = exact(&model);
            if hits * 10 >= ex.len() * 9 {
                return Outcome::new(true, format!("step {step}: L_SIG {last:.4}, {hits}/{} exact regenerations", ex.len()));
            }
        }
    }
    let hits = exact(&model);
    Outcome::new(false, format!("after 300 steps: L_SIG {last:.4}, {hits}/{} exact regenerations", ex.len()))
}

// ---------------------------------------------------------------- 7

fn ascent() -> Outcome {
    let mut cfg = small_run_config(11);
    cfg.train.batch_size = 32;
    cfg.train.ntm_pretrain_epochs = 50;
    cfg.decode.max_len = 10;
    let (vocabs, ex) = synth_examples(100, 11, &cfg);
    let mut model = Model::new(&cfg, vocabs.gen.len(), vocabs.bow.len()).unwrap();
    let bows: Vec<_> = ex.iter().map(|e| &e.bow).collect();
    training::pretrain_ntm(&mut model, &bows, &cfg).unwrap();
    let mut trainer = JointTrainer::new(&model, &cfg);
    for chunk in ex.chunks(32).cycle().take(20) {
        let b: Vec<&Example> = chunk.iter().collect();
        trainer.step(&mut model, &b, &cfg).unwrap();
    }
    let ctl = ControlConfig {
        alpha_step: 0.25,
        gamma: 1.5,
        n_iter: 3,
    };
    let off = ControlConfig { n_iter: 0, ..ctl.clone() };
    let (mut up, mut steps, mut identical) = (0usize, 0usize, 0usize);
    for e in &ex {
        let theta = model.theta(&e.bow).unwrap();
        let words = model.ntm.topic_words(&model.store, utged::numeric::argmax(&theta), cfg.decode.topic_words);
        let a = utged::control::map_topic_words(&vocabs.bow, &vocabs.gen, &words);
        let (_, trace) = controlled_decode(&model.gen, &model.store, &e.source, Some(&theta), &a, &ctl, cfg.decode.max_len).unwrap();
        for s in &trace.steps {
            steps += 1;
            if s.loglik_after >= s.loglik_before {
                up += 1;
            }
        }
        let (plain_ids, plain_trace) = controlled_decode(&model.gen, &model.store, &e.source, Some(&theta), &a, &off, cfg.decode.max_len).unwrap();
        let greedy = model.gen.greedy(&model.store, &e.source, Some(&theta), cfg.decode.max_len).unwrap();
        let same_logits = plain_trace.steps.iter().all(|s| s.loglik_after.to_bits() == s.loglik_before.to_bits());
        if plain_ids == greedy && same_logits {
            identical += 1;
        }
    }
    let rate = up as f64 / steps as f64;
    Outcome::new(
        rate >= 0.95 && identical == ex.len(),
        format!("{up}/{steps} steps ascend ({:.1}%) over {} contexts; n_iter=0 bit-identical on {identical}/{}", 100.0 * rate, ex.len(), ex.len()),
    )
}

// ---------------------------------------------------------------- 8

fn ablation() -> Outcome {
    let (mut full_sum, mut none_sum) = (0.0, 0.0);
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let (records, _) = synth::generate(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
        let users = tokenize_users(&records);
        let (train, test) = users.split_at(160);
        let mut cfg = small_run_config(seed);
        cfg.train.batch_size = 16;
        cfg.decode.max_len = 12;
        let mut none = cfg.clone();
        none.train.selection = false;
        none.train.tpee = false;
        none.train.twed = false;
        let full = evaluation::run_experiment(&cfg, train, test);
        let base = evaluation::run_experiment(&none, train, test);
        match (full, base) {
            (Ok((_, _, f)), Ok((_, _, b))) => {
                full_sum += f.rl;
                none_sum += b.rl;
                rows.push(format!("seed {seed}: {:.3} vs {:.3}", f.rl, b.rl));
            }
            (f, b) => return Outcome::new(false, format!("seed {seed} failed: {:?} / {:?}", f.err(), b.err())),
        }
    }
    let (f, b) = (full_sum / 3.0, none_sum / 3.0);
    Outcome::new(f >= b, format!("mean R-L full {f:.4} vs all-off {b:.4} [{}]", rows.join(", ")))
}

// ---------------------------------------------------------------- 9

fn train_and_evaluate(cfg: &Config, dir: &std::path::Path) -> utged::Result<(Vec<u8>, String)> {
    let (records, _) = synth::generate(&SynthConfig { users: 60, seed: 5, ..SynthConfig::default() })?;
    let users = tokenize_users(&records);
    let (train, test) = users.split_at(48);
    let vocabs = Vocabs::build(train, &cfg.data);
    let train_ex = build_examples(train, &vocabs, &cfg.data, true, None)?;
    let test_ex = build_examples(test, &vocabs, &cfg.data, true, None)?;
    let mut model = Model::new(cfg, vocabs.gen.len(), vocabs.bow.len())?;
    let bows: Vec<_> = train_ex.iter().map(|e| &e.bow).collect();
    training::pretrain_ntm(&mut model, &bows, cfg)?;
    let trainer = training::joint_train(&mut model, &train_ex, cfg)?;
    let report = evaluation::evaluate(&model, &vocabs, &test_ex, cfg);
    let ck = Checkpoint {
        config: cfg.clone(),
        model,
        opt: trainer.opt,
        vocabs,
        epoch: cfg.train.joint_epochs as u64,
    };
    ck.save(dir)?;
    let bytes = std::fs::read(dir.join(training::CHECKPOINT_FILE))?;
    let metrics = format!("{:?} {:?} {:?} {}", report.r1.to_bits(), report.r2.to_bits(), report.rl.to_bits(), report.samples_csv());
    Ok((bytes, metrics))
}

fn determinism() -> Outcome {
    let mut cfg = small_run_config(13);
    cfg.train.ntm_pretrain_epochs = 20;
    cfg.train.joint_epochs = 2;
    cfg.decode.max_len = 10;
    let tmp = tempfile::tempdir().unwrap();
    let a = train_and_evaluate(&cfg, &tmp.path().join("a"));
    let b = train_and_evaluate(&cfg, &tmp.path().join("b"));
    match (a, b) {
        (Ok(a), Ok(b)) => {
            let same_ck = a.0 == b.0;
            let same_metrics = a.1 == b.1;
            Outcome::new(
                same_ck && same_metrics,
                format!("checkpoints {} ({} bytes), metrics {}", if same_ck { "byte-identical" } else { "differ" }, a.0.len(), if same_metrics { "identical" } else { "differ" }),
            )
        }
        (a, b) => Outcome::new(false, format!("run failed: {:?} / {:?}", a.err(), b.err())),
    }
}

// ---------------------------------------------------------------- 10

fn well_formed(csv: &str, axis: &str, values: &[usize]) -> Result<(), String> {
    let lines: Vec<&str> = csv.lines().collect();
    if lines.first() != Some(&format!("{axis},status,samples,r1,r2,rl").as_str()) {
        return Err(format!("bad header {:?}", lines.first()));
    }
    if lines.len() != values.len() + 1 {
        return Err(format!("{} rows for {} values", lines.len() - 1, values.len()));
    }
    for (line, v) in lines[1..].iter().zip(values) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 || f[0] != v.to_string() || f[1] != "ok" || f[2].parse::<usize>().map_or(true, |n| n == 0) {
            return Err(format!("bad row {line:?}"));
        }
        if !f[3..].iter().all(|x| x.parse::<f64>().is_ok_and(|x| (0.0..=1.0).contains(&x))) {
            return Err(format!("bad scores {line:?}"));
        }
    }
    Ok(())
}

fn sweeps() -> Outcome {
    let (records, _) = synth::generate(&SynthConfig { users: 100, seed: 21, ..SynthConfig::default() }).unwrap();
    let users = tokenize_users(&records);
    let (train, test) = users.split_at(80);
    let mut base = small_run_config(21);
    base.train.ntm_pretrain_epochs = 20;
    base.train.joint_epochs = 2;
    base.decode.max_len = 10;
    let mut notes = Vec::new();
    let mut pass = true;
    for axis in [SweepAxis::TopicNumber, SweepAxis::PromptLength] {
        let values = axis.default_values();
        let report = evaluation::sweep(axis, &values, &base, train, test);
        match well_formed(&report.csv(), axis.name(), &values) {
            Ok(()) => notes.push(format!("{} grid {values:?} ok", axis.name())),
            Err(e) => {
                pass = false;
                notes.push(format!("{} grid: {e}", axis.name()));
            }
        }
    }
    Outcome::new(pass, notes.join("; "))
}

