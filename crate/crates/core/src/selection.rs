//! Shortlisting of representative, non-redundant history documents and
//! construction of the encoder input sequence.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::SEP;
use crate::error::{Error, Result};
use crate::similarity::{cosine, SentenceEncoder, SimilarityMatrix};

pub const DEFAULT_LAMBDA: f64 = 0.8;
pub const DEFAULT_MAX_TOKENS: usize = 1024;

/// How representativeness is scored while the pool shrinks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Rescore against the remaining pool every round.
    #[default]
    Recompute,
    /// Score once against the full history.
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShortlistEntry {
    pub index: usize,
    /// Representativeness over the full history, used for ranking.
    pub score: f64,
}

/// Documents in the order they were shortlisted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Shortlist {
    pub entries: Vec<ShortlistEntry>,
}

impl Shortlist {
    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }
}

/// Repeatedly moves the highest-scoring pool document to the shortlist and
/// discards pool documents more similar than `lambda` to it. Ties go to the
/// earlier document.
pub fn select(sim: &SimilarityMatrix, lambda: f64, mode: ScoreMode) -> Shortlist {
    let n = sim.len();
    let full: Vec<usize> = (0..n).collect();
    let overall = sim.all_representativeness();
    let mut pool = full;
    let mut entries = Vec::new();
    while !pool.is_empty() {
        let score = |u: usize| match mode {
            ScoreMode::Recompute => sim.mean_over(u, &pool),
            ScoreMode::Static => overall[u],
        };
        // pool is ascending, so a strict comparison keeps the earliest on ties
        let mut best = pool[0];
        let mut best_score = score(best);
        for &u in &pool[1..] {
            let s = score(u);
            if s > best_score {
                best = u;
                best_score = s;
            }
        }
        entries.push(ShortlistEntry {
            index: best,
            score: overall[best],
        });
        pool.retain(|&v| v != best && sim.get(best, v) <= lambda);
    }
    Shortlist { entries }
}

/// Keeps the top-ranked shortlisted documents while they fit in
/// `max_tokens` (separators included), restores chronological order and
/// joins them with `<sep>`. If even the best document is too long it is
/// truncated to the budget.
pub fn rank_and_truncate(shortlist: &Shortlist, docs: &[Vec<String>], max_tokens: usize) -> Result<Vec<String>> {
    Ok(rank_and_keep(shortlist, docs, max_tokens)?.1)
}

/// [`rank_and_truncate`] that also reports the kept indices, ascending.
pub fn rank_and_keep(shortlist: &Shortlist, docs: &[Vec<String>], max_tokens: usize) -> Result<(Vec<usize>, Vec<String>)> {
    let mut ranked = shortlist.entries.clone();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    let order: Vec<usize> = ranked.iter().map(|e| e.index).collect();
    fill_budget(&order, docs, max_tokens)
}

fn fill_budget(ranked: &[usize], docs: &[Vec<String>], max_tokens: usize) -> Result<(Vec<usize>, Vec<String>)> {
    if max_tokens < 1 {
        return Err(Error::Config("token budget must be at least 1".into()));
    }
    let mut kept = Vec::new();
    let mut used = 0;
    for &i in ranked {
        let cost = docs[i].len() + usize::from(!kept.is_empty());
        if used + cost > max_tokens {
            break;
        }
        used += cost;
        kept.push(i);
    }
    if kept.is_empty() {
        if let Some(&first) = ranked.first() {
            return Ok((vec![first], docs[first].iter().take(max_tokens).cloned().collect()));
        }
    }
    kept.sort_unstable();
    let seq = join_docs(&kept, docs);
    Ok((kept, seq))
}

pub fn join_docs(indices: &[usize], docs: &[Vec<String>]) -> Vec<String> {
    let mut out = Vec::new();
    for (k, &i) in indices.iter().enumerate() {
        if k > 0 {
            out.push(SEP.to_string());
        }
        out.extend(docs[i].iter().cloned());
    }
    out
}

/// Chronological head of the raw history, cut at the budget (selection off).
pub fn chronological_truncation(docs: &[Vec<String>], max_tokens: usize) -> Vec<String> {
    let all: Vec<usize> = (0..docs.len()).collect();
    let mut seq = join_docs(&all, docs);
    seq.truncate(max_tokens);
    seq
}

/// Full selection path: shortlist, then rank and truncate. Returns the
/// shortlist, the kept indices and the joined sequence.
pub fn select_input(docs: &[Vec<String>], encoder: &dyn SentenceEncoder, lambda: f64, mode: ScoreMode, max_tokens: usize) -> Result<(Shortlist, Vec<usize>, Vec<String>)> {
    let sim = SimilarityMatrix::from_docs(encoder, docs);
    let sl = select(&sim, lambda, mode);
    let (kept, seq) = rank_and_keep(&sl, docs, max_tokens)?;
    Ok((sl, kept, seq))
}

/// Reference-aware selection used for upper-bound comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    /// The single history document most similar to the reference.
    Extractive,
    /// Documents ranked by similarity to the reference, budget-filled.
    AbstractiveInput,
    /// The most representative document, reference-free.
    Consen,
}

impl FromStr for OracleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "extractive" => Ok(OracleMode::Extractive),
            "abstractive-input" => Ok(OracleMode::AbstractiveInput),
            "consen" => Ok(OracleMode::Consen),
            other => Err(Error::Usage(format!("unknown oracle mode {other:?}"))),
        }
    }
}

pub fn oracle_select(docs: &[Vec<String>], reference: &[String], mode: OracleMode, encoder: &dyn SentenceEncoder, max_tokens: usize) -> Result<Vec<String>> {
    if docs.is_empty() {
        return Ok(Vec::new());
    }
    let by_score = |scores: &[f64]| {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order
    };
    match mode {
        OracleMode::Extractive | OracleMode::AbstractiveInput => {
            let r = encoder.embed(reference);
            let scores: Vec<f64> = docs.iter().map(|d| cosine(&r, &encoder.embed(d))).collect();
            let order = by_score(&scores);
            if mode == OracleMode::Extractive {
                Ok(docs[order[0]].clone())
            } else {
                Ok(fill_budget(&order, docs, max_tokens)?.1)
            }
        }
        OracleMode::Consen => {
            let scores = SimilarityMatrix::from_docs(encoder, docs).all_representativeness();
            Ok(docs[by_score(&scores)[0]].clone())
        }
    }
}
