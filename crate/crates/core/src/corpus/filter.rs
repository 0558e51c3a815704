use serde::{Deserialize, Serialize};

use super::tokenize::tokenize;
use super::UserRecord;
use crate::error::{Error, Result};
use crate::similarity::SentenceEncoder;

/// Which history documents count as the "top" ones for the similarity filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopOrder {
    /// The documents most similar to the self-introduction.
    MostSimilar,
    /// The latest documents.
    MostRecent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub min_intro_tokens: usize,
    pub max_intro_tokens: usize,
    /// Minimum number of documents originally published.
    pub min_history_docs: usize,
    /// History is capped to this many latest documents.
    pub max_history_docs: usize,
    pub min_similarity: f64,
    pub top_k: usize,
    pub top_order: TopOrder,
    /// Drop records whose self-introduction has a lower fraction of ASCII characters.
    pub min_ascii_ratio: Option<f64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_intro_tokens: 7,
            max_intro_tokens: 30,
            min_history_docs: 30,
            max_history_docs: 100,
            min_similarity: 0.4,
            top_k: 30,
            top_order: TopOrder::MostSimilar,
            min_ascii_ratio: None,
        }
    }
}

/// Mean similarity between the self-introduction and the top `k` history
/// documents under `order`. Histories shorter than `k` use every document.
pub fn mean_top_similarity(record: &UserRecord, encoder: &dyn SentenceEncoder, k: usize, order: TopOrder) -> f64 {
    if record.history.is_empty() || k == 0 {
        return 0.0;
    }
    let intro = encoder.embed(&tokenize(&record.self_intro));
    let sims: Vec<f64> = record
        .history
        .iter()
        .map(|d| crate::similarity::cosine(&intro, &encoder.embed(&tokenize(d))))
        .collect();
    let top: Vec<f64> = match order {
        TopOrder::MostRecent => sims[sims.len().saturating_sub(k)..].to_vec(),
        TopOrder::MostSimilar => {
            let mut s = sims;
            s.sort_by(|a, b| b.total_cmp(a));
            s.truncate(k);
            s
        }
    };
    top.iter().sum::<f64>() / top.len() as f64
}

fn ascii_ratio(s: &str) -> f64 {
    let n = s.chars().count();
    if n == 0 {
        return 1.0;
    }
    s.chars().filter(char::is_ascii).count() as f64 / n as f64
}

/// Applies the length, history-size and similarity filters. Survivors keep
/// their content (history capped to the latest documents) and input order.
pub fn filter_records(records: Vec<UserRecord>, cfg: &FilterConfig, encoder: &dyn SentenceEncoder) -> Result<Vec<UserRecord>> {
    let total = records.len();
    let mut kept = Vec::new();
    for mut r in records {
        if r.history.len() < cfg.min_history_docs {
            continue;
        }
        if r.history.len() > cfg.max_history_docs {
            r.history.drain(..r.history.len() - cfg.max_history_docs);
        }
        let n = tokenize(&r.self_intro).len();
        if n < cfg.min_intro_tokens || n > cfg.max_intro_tokens {
            continue;
        }
        if cfg.min_ascii_ratio.is_some_and(|min| ascii_ratio(&r.self_intro) < min) {
            continue;
        }
        if mean_top_similarity(&r, encoder, cfg.top_k, cfg.top_order) < cfg.min_similarity {
            continue;
        }
        kept.push(r);
    }
    if kept.is_empty() {
        return Err(Error::Config(format!(
            "all {total} records were filtered out; review the length and similarity thresholds"
        )));
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::SentenceEmbedding;

    /// Encodes "sim:<x>" documents so their cosine to the intro is exactly x.
    struct Planted;

    impl SentenceEncoder for Planted {
        fn embed(&self, tokens: &[String]) -> SentenceEmbedding {
            let x = tokens
                .iter()
                .position(|t| t == "sim")
                .and_then(|i| tokens[i + 2..].join("").parse::<f64>().ok());
            match x {
                Some(c) => SentenceEmbedding::dense(vec![c, (1.0 - c * c).max(0.0).sqrt()]),
                None => SentenceEmbedding::dense(vec![1.0, 0.0]),
            }
        }
    }

    fn record(intro_len: usize, n_docs: usize, sim: f64) -> UserRecord {
        UserRecord {
            user_id: "u".into(),
            self_intro: vec!["word"; intro_len].join(" "),
            history: (0..n_docs).map(|_| format!("sim:{sim}")).collect(),
        }
    }

    fn keeps(r: UserRecord) -> bool {
        filter_records(vec![r], &FilterConfig::default(), &Planted).is_ok()
    }

    #[test]
    fn intro_length_bounds() {
        assert!(!keeps(record(5, 40, 0.9)));
        assert!(keeps(record(7, 40, 0.9)));
        assert!(keeps(record(30, 40, 0.9)));
        assert!(!keeps(record(31, 40, 0.9)));
    }

    #[test]
    fn similarity_threshold() {
        assert!(!keeps(record(10, 40, 0.39)));
        assert!(keeps(record(10, 40, 0.41)));
    }

    #[test]
    fn history_size_rules() {
        assert!(!keeps(record(10, 29, 0.9)));
        let kept = filter_records(vec![record(10, 150, 0.9)], &FilterConfig::default(), &Planted).unwrap();
        assert_eq!(kept[0].history.len(), 100);
    }

    #[test]
    fn history_cap_keeps_latest() {
        let mut r = record(10, 120, 0.9);
        r.history[119] = "sim:0.8".into();
        let kept = filter_records(vec![r], &FilterConfig::default(), &Planted).unwrap();
        assert_eq!(kept[0].history.last().unwrap(), "sim:0.8");
    }

    #[test]
    fn top_order_variants_differ() {
        let mut r = record(10, 60, 0.1);
        for d in r.history.iter_mut().take(30) {
            *d = "sim:0.9".into();
        }
        let sim = mean_top_similarity(&r, &Planted, 30, TopOrder::MostSimilar);
        let rec = mean_top_similarity(&r, &Planted, 30, TopOrder::MostRecent);
        assert!((sim - 0.9).abs() < 1e-12);
        assert!((rec - 0.1).abs() < 1e-12);
    }

    #[test]
    fn empty_result_is_config_error() {
        let err = filter_records(vec![record(2, 40, 0.9)], &FilterConfig::default(), &Planted).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn survivors_keep_order_and_content() {
        let mut a = record(10, 40, 0.9);
        a.user_id = "a".into();
        let b = record(3, 40, 0.9);
        let mut c = record(10, 40, 0.9);
        c.user_id = "c".into();
        let kept = filter_records(vec![a.clone(), b, c.clone()], &FilterConfig::default(), &Planted).unwrap();
        assert_eq!(kept, vec![a, c]);
    }
}
