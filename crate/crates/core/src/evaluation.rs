//! ROUGE scoring, corpus evaluation, parameter sweeps and a paired bootstrap.
//!
//! ROUGE runs on the corpus tokenizer's output with no stemming or stopword
//! removal. Corpus scores are macro-averages of per-sample F1.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::control::{controlled_decode, map_topic_words, DecodeTrace};
use crate::error::{Error, Result};
use crate::numeric::argmax;
use crate::pipeline::{build_examples, Example, TokenizedUser, Vocabs};
use crate::rng;
use crate::training::{joint_train, pretrain_ntm, Model};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(overlap: usize, cand: usize, reference: usize) -> Self {
        let p = if cand == 0 { 0.0 } else { overlap as f64 / cand as f64 };
        let r = if reference == 0 { 0.0 } else { overlap as f64 / reference as f64 };
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        Self {
            precision: p,
            recall: r,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub r1: Prf,
    pub r2: Prf,
    pub rl: Prf,
}

fn ngrams<'a>(toks: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// ROUGE-N from clipped n-gram counts.
pub fn rouge_n(cand: &[String], reference: &[String], n: usize) -> Prf {
    let c = ngrams(cand, n);
    let r = ngrams(reference, n);
    let overlap: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    Prf::from_counts(overlap, cand.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(cand: &[String], reference: &[String]) -> Prf {
    Prf::from_counts(lcs_len(cand, reference), cand.len(), reference.len())
}

/// ROUGE-1/2/L; an empty reference scores zero with a warning.
pub fn rouge(cand: &[String], reference: &[String]) -> RougeScore {
    if reference.is_empty() {
        log::warn!("empty reference scored as zero");
        return RougeScore::default();
    }
    RougeScore {
        r1: rouge_n(cand, reference, 1),
        r2: rouge_n(cand, reference, 2),
        rl: rouge_l(cand, reference),
    }
}

/// One generated sample and its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub user_id: String,
    pub generated: String,
    pub reference: String,
    pub history_docs: usize,
    pub score: RougeScore,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub samples: Vec<Sample>,
    /// Samples whose decoding failed; they are excluded from the means.
    pub failures: usize,
}

impl EvalReport {
    pub fn from_samples(samples: Vec<Sample>, failures: usize) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = |f: fn(&RougeScore) -> f64| samples.iter().map(|s| f(&s.score)).sum::<f64>() / n;
        Self {
            r1: mean(|s| s.r1.f1),
            r2: mean(|s| s.r2.f1),
            rl: mean(|s| s.rl.f1),
            samples,
            failures,
        }
    }

    pub fn samples_csv(&self) -> String {
        let mut out = String::from("user_id,history_docs,r1_p,r1_r,r1_f,r2_p,r2_r,r2_f,rl_p,rl_r,rl_f\n");
        for s in &self.samples {
            let c = &s.score;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                csv_field(&s.user_id),
                s.history_docs,
                c.r1.precision,
                c.r1.recall,
                c.r1.f1,
                c.r2.precision,
                c.r2.recall,
                c.r2.f1,
                c.rl.precision,
                c.rl.recall,
                c.rl.f1
            );
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Decodes one example under the configured ablation flags. Returns the
/// generated tokens and, when steering ran, its trace.
pub fn generate(model: &Model, vocabs: &Vocabs, ex: &Example, cfg: &Config, topic_words: Option<&[usize]>) -> Result<(Vec<String>, Option<DecodeTrace>)> {
    let d = &cfg.decode;
    let theta = model.theta(&ex.bow)?;
    let th = cfg.train.tpee.then_some(theta.as_slice());
    let gen = &model.gen;
    if cfg.train.twed && d.n_iter > 0 {
        let a = match topic_words {
            Some(a) => a.to_vec(),
            None if ex.bow.is_empty() => Vec::new(),
            None => {
                let words = model.ntm.topic_words(&model.store, argmax(&theta), d.topic_words);
                map_topic_words(&vocabs.bow, &vocabs.gen, &words)
            }
        };
        let (ids, trace) = controlled_decode(gen, &model.store, &ex.source, th, &a, &d.control(), d.max_len)?;
        return Ok((vocabs.gen.decode(&ids), Some(trace)));
    }
    let ids = if d.beam_width > 1 {
        gen.beam(&model.store, &ex.source, th, d.beam_width, d.max_len)?
    } else {
        gen.greedy(&model.store, &ex.source, th, d.max_len)?
    };
    Ok((vocabs.gen.decode(&ids), None))
}

/// Generates and scores every example; failing samples are skipped and
/// counted.
pub fn evaluate(model: &Model, vocabs: &Vocabs, examples: &[Example], cfg: &Config) -> EvalReport {
    let mut samples = Vec::with_capacity(examples.len());
    let mut failures = 0;
    for ex in examples {
        match generate(model, vocabs, ex, cfg, None) {
            Ok((toks, _)) => samples.push(Sample {
                user_id: ex.user_id.clone(),
                score: rouge(&toks, &ex.target_tokens),
                generated: toks.join(" "),
                reference: ex.target_tokens.join(" "),
                history_docs: ex.history_docs,
            }),
            Err(e) => {
                log::warn!("decoding failed for {}: {e}", ex.user_id);
                failures += 1;
            }
        }
    }
    EvalReport::from_samples(samples, failures)
}

/// Fraction of bootstrap resamples in which system `a` has the higher mean.
pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Usage("paired bootstrap needs two equal-length non-empty score lists".into()));
    }
    let mut r = rng::stream(seed, "bootstrap");
    let n = a.len();
    let mut wins = 0;
    for _ in 0..resamples {
        let mut diff = 0.0;
        for _ in 0..n {
            let i = r.random_range(0..n);
            diff += a[i] - b[i];
        }
        if diff > 0.0 {
            wins += 1;
        }
    }
    Ok(wins as f64 / resamples.max(1) as f64)
}

/// Train on `train`, evaluate on `test`, under `cfg`.
pub fn run_experiment(cfg: &Config, train: &[TokenizedUser], test: &[TokenizedUser]) -> Result<(Model, Vocabs, EvalReport)> {
    let vocabs = Vocabs::build(train, &cfg.data);
    let train_ex = build_examples(train, &vocabs, &cfg.data, cfg.train.selection, None)?;
    let test_ex = build_examples(test, &vocabs, &cfg.data, cfg.train.selection, None)?;
    let mut model = Model::new(cfg, vocabs.gen.len(), vocabs.bow.len())?;
    let bows: Vec<_> = train_ex.iter().map(|e| &e.bow).collect();
    pretrain_ntm(&mut model, &bows, cfg)?;
    joint_train(&mut model, &train_ex, cfg)?;
    let report = evaluate(&model, &vocabs, &test_ex, cfg);
    Ok((model, vocabs, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    /// Number of topics `K`.
    TopicNumber,
    /// Prompt length `L`.
    PromptLength,
    /// Users grouped by history size; value `v` covers `(v − 20, v]`.
    Bucket,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "K" | "k" | "topic-number" => Ok(SweepAxis::TopicNumber),
            "L" | "l" | "prompt-length" => Ok(SweepAxis::PromptLength),
            "bucket" | "history-size" => Ok(SweepAxis::Bucket),
            other => Err(Error::Usage(format!("unknown sweep axis {other:?} (expected K, L or bucket)"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::TopicNumber => "K",
            SweepAxis::PromptLength => "L",
            SweepAxis::Bucket => "bucket",
        }
    }

    pub fn default_values(self) -> Vec<usize> {
        match self {
            SweepAxis::TopicNumber => vec![50, 100, 150, 200],
            SweepAxis::PromptLength => vec![3, 7, 11, 15, 19],
            SweepAxis::Bucket => vec![20, 40, 60, 80, 100],
        }
    }
}

pub const BUCKET_WIDTH: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub status: String,
    pub samples: usize,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: String,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn csv(&self) -> String {
        let mut out = format!("{},status,samples,r1,r2,rl\n", self.axis);
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.value, r.status, r.samples, r.r1, r.r2, r.rl);
        }
        out
    }

    /// Whitespace-separated columns for plotting tools.
    pub fn plot_data(&self) -> String {
        let mut out = format!("# {} r1 r2 rl\n", self.axis);
        for r in self.rows.iter().filter(|r| r.status == "ok") {
            let _ = writeln!(out, "{} {} {} {}", r.value, r.r1, r.r2, r.rl);
        }
        out
    }
}

fn ok_row(value: usize, rep: &EvalReport) -> SweepRow {
    SweepRow {
        value,
        status: "ok".into(),
        samples: rep.samples.len(),
        r1: rep.r1,
        r2: rep.r2,
        rl: rep.rl,
    }
}

/// Groups an existing evaluation by history size.
pub fn bucket_rows(report: &EvalReport, values: &[usize]) -> Vec<SweepRow> {
    values
        .iter()
        .map(|&v| {
            let lo = v.saturating_sub(BUCKET_WIDTH);
            let picked: Vec<Sample> = report.samples.iter().filter(|s| s.history_docs > lo && s.history_docs <= v).cloned().collect();
            ok_row(v, &EvalReport::from_samples(picked, 0))
        })
        .collect()
}

/// Trains and evaluates once per value of `axis`. A failing leg is reported
/// with its error and the remaining legs still run.
pub fn sweep(axis: SweepAxis, values: &[usize], base: &Config, train: &[TokenizedUser], test: &[TokenizedUser]) -> SweepReport {
    let rows = match axis {
        SweepAxis::Bucket => match run_experiment(base, train, test) {
            Ok((_, _, rep)) => bucket_rows(&rep, values),
            Err(e) => values.iter().map(|&v| failed_row(v, &e)).collect(),
        },
        _ => values
            .iter()
            .map(|&v| {
                let mut cfg = base.clone();
                match axis {
                    SweepAxis::TopicNumber => cfg.model.topics = v,
                    _ => cfg.model.prompt_len = v,
                }
                let leg = cfg.validate().and_then(|_| run_experiment(&cfg, train, test));
                match leg {
                    Ok((_, _, rep)) => ok_row(v, &rep),
                    Err(e) => failed_row(v, &e),
                }
            })
            .collect(),
    };
    SweepReport {
        axis: axis.name().into(),
        seed: base.train.seed,
        rows,
    }
}

fn failed_row(value: usize, e: &Error) -> SweepRow {
    log::warn!("sweep leg {value} failed: {e}");
    SweepRow {
        value,
        status: format!("failed: {}", e.to_string().replace([',', '\n'], ";")),
        samples: 0,
        r1: 0.0,
        r2: 0.0,
        rl: 0.0,
    }
}
