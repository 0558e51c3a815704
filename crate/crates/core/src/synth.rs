//! Synthetic corpora with planted topics.
//!
//! The vocabulary splits into one disjoint word block per topic plus a
//! background block. Each user draws a topic mixture from a symmetric
//! Dirichlet; each document picks a topic from that mixture and draws Zipf
//! weighted words from the topic's block, with occasional background words.
//! The self-introduction is a template over the three words of the dominant
//! topic the user wrote most often.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::corpus::UserRecord;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub topics: usize,
    pub users: usize,
    pub docs_min: usize,
    pub docs_max: usize,
    pub vocab: usize,
    pub words_per_doc: usize,
    /// Share of the vocabulary reserved for background words.
    pub background_share: f64,
    /// Probability that a document word comes from the background block.
    pub noise: f64,
    pub concentration: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            topics: 3,
            users: 200,
            docs_min: 30,
            docs_max: 60,
            vocab: 300,
            words_per_doc: 12,
            background_share: 0.1,
            noise: 0.1,
            concentration: 0.3,
            seed: 0,
        }
    }
}

/// Planted structure written next to the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Planted {
    /// Word block of each topic, most probable first.
    pub topics: Vec<Vec<String>>,
    pub background: Vec<String>,
    pub users: Vec<PlantedUser>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedUser {
    pub user_id: String,
    pub dominant: usize,
    pub mixture: Vec<f64>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Usage(m.to_string()));
        if self.topics == 0 || self.users == 0 || self.words_per_doc == 0 {
            return bad("topics, users and words per document must be positive");
        }
        if self.docs_min == 0 || self.docs_min > self.docs_max {
            return bad("documents per user must satisfy 0 < min <= max");
        }
        if !(0.0..1.0).contains(&self.background_share) || !(0.0..=1.0).contains(&self.noise) {
            return bad("background share must be in [0, 1) and noise in [0, 1]");
        }
        if !(self.concentration > 0.0) {
            return bad("concentration must be positive");
        }
        if self.block() < 3 {
            return bad("vocabulary too small for the topic count");
        }
        Ok(())
    }

    fn background(&self) -> usize {
        (self.vocab as f64 * self.background_share).round() as usize
    }

    fn block(&self) -> usize {
        (self.vocab - self.background().min(self.vocab)) / self.topics
    }
}

// Pronounceable, letter-only pseudo-words; distinct for distinct indices.
fn pseudo_word(i: usize) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let mut n = i;
    let mut w = String::new();
    loop {
        w.push(C[n % C.len()] as char);
        n /= C.len();
        w.push(V[n % V.len()] as char);
        n /= V.len();
        if n == 0 {
            break;
        }
        n -= 1;
    }
    w.push('x');
    w
}

/// Generates the corpus and its planted structure.
pub fn generate(cfg: &SynthConfig) -> Result<(Vec<UserRecord>, Planted)> {
    cfg.validate()?;
    let block = cfg.block();
    let n_bg = cfg.background().max(1);
    let mut next = 0;
    let mut take = |n: usize| -> Vec<String> {
        let out = (next..next + n).map(pseudo_word).collect();
        next += n;
        out
    };
    let topics: Vec<Vec<String>> = (0..cfg.topics).map(|_| take(block)).collect();
    let background = take(n_bg);
    let zipf: Vec<f64> = (0..block).map(|r| 1.0 / (r as f64 + 1.0)).collect();
    let word_dist = WeightedIndex::new(&zipf).map_err(|e| Error::Config(e.to_string()))?;
    let gamma = Gamma::new(cfg.concentration, 1.0).map_err(|e| Error::Config(e.to_string()))?;

    let mut r = rng::stream(cfg.seed, "synth");
    let mut records = Vec::with_capacity(cfg.users);
    let mut planted = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        let raw: Vec<f64> = (0..cfg.topics).map(|_| gamma.sample(&mut r).max(1e-12)).collect();
        let z: f64 = raw.iter().sum();
        let mixture: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let dominant = crate::numeric::argmax(&mixture);
        let topic_dist = WeightedIndex::new(&mixture).map_err(|e| Error::Config(e.to_string()))?;
        let n_docs = r.random_range(cfg.docs_min..=cfg.docs_max);
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        let mut docs = Vec::with_capacity(n_docs);
        for _ in 0..n_docs {
            let t = topic_dist.sample(&mut r);
            let words: Vec<&str> = (0..cfg.words_per_doc)
                .map(|_| {
                    if r.random_bool(cfg.noise) {
                        background[r.random_range(0..background.len())].as_str()
                    } else {
                        let w = word_dist.sample(&mut r);
                        if t == dominant {
                            *counts.entry(w).or_insert(0) += 1;
                        }
                        topics[t][w].as_str()
                    }
                })
                .collect();
            docs.push(words.join(" "));
        }
        let mut favourite: Vec<(usize, usize)> = counts.into_iter().collect();
        favourite.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut picks: Vec<&str> = favourite.iter().take(3).map(|&(w, _)| topics[dominant][w].as_str()).collect();
        for w in &topics[dominant] {
            if picks.len() >= 3 {
                break;
            }
            if !picks.contains(&w.as_str()) {
                picks.push(w);
            }
        }
        let intro = format!("i talk about {} , {} and {}", picks[0], picks[1], picks[2]);
        let user_id = format!("user{u:05}");
        records.push(UserRecord {
            user_id: user_id.clone(),
            self_intro: intro,
            history: docs,
        });
        planted.push(PlantedUser { user_id, dominant, mixture });
    }
    Ok((
        records,
        Planted {
            topics,
            background,
            users: planted,
        },
    ))
}

impl Planted {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?)
    }
}

/// Greedy one-to-one alignment of learned topics to planted topics by
/// top-`n` word overlap. Returns, per planted topic, the precision of its
/// matched learned topic (`0` when unmatched).
pub fn alignment_precision(learned: &[Vec<String>], planted: &[Vec<String>], n: usize) -> Vec<f64> {
    let overlap = |l: &[String], p: &[String]| l.iter().take(n).filter(|w| p.contains(w)).count() as f64 / n as f64;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, l) in learned.iter().enumerate() {
        for (j, p) in planted.iter().enumerate() {
            pairs.push((overlap(l, p), i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_l = vec![false; learned.len()];
    let mut out = vec![0.0; planted.len()];
    let mut done = vec![false; planted.len()];
    for (prec, i, j) in pairs {
        if !used_l[i] && !done[j] {
            used_l[i] = true;
            done[j] = true;
            out[j] = prec;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    #[test]
    fn deterministic_and_well_formed() {
        let cfg = SynthConfig {
            users: 20,
            ..SynthConfig::default()
        };
        let (a, pa) = generate(&cfg).unwrap();
        let (b, pb) = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(pa.topics.len(), 3);
        assert_eq!(pa.topics[0].len(), 90);
        for r in &a {
            assert!((30..=60).contains(&r.history.len()));
            let intro = tokenize(&r.self_intro);
            assert_eq!(intro.len(), 8);
        }
        let all: std::collections::HashSet<_> = pa.topics.iter().flatten().chain(&pa.background).collect();
        assert_eq!(all.len(), 300);
    }

    #[test]
    fn words_survive_tokenization() {
        for i in [0, 13, 69, 70, 1000] {
            let w = pseudo_word(i);
            assert_eq!(tokenize(&w), vec![w.clone()]);
            assert!(!crate::corpus::is_stopword(&w));
        }
    }

    #[test]
    fn invalid_ranges_are_usage_errors() {
        let cfg = SynthConfig {
            docs_min: 10,
            docs_max: 5,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn alignment_is_one_to_one() {
        let w = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
        let planted = vec![w("a b"), w("c d")];
        let learned = vec![w("a b"), w("a c")];
        assert_eq!(alignment_precision(&learned, &planted, 2), vec![1.0, 0.5]);
    }
}
