use std::fmt::Write as _;

use super::filter::{mean_top_similarity, TopOrder};
use super::UserRecord;
use crate::similarity::SentenceEncoder;

#[derive(Debug, Clone, PartialEq)]
pub struct Bin {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

/// Dataset statistics: similarity and history-size histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsReport {
    pub users: usize,
    pub mean_docs: f64,
    /// Fraction of users with more than 90 history documents.
    pub frac_over_90_docs: f64,
    /// `[-1,0)` then ten bins of width 0.1 over `[0,1]`, the last one closed.
    pub similarity: Vec<Bin>,
    /// Bins of width 10 starting at 0.
    pub doc_counts: Vec<Bin>,
}

pub fn similarity_bin(v: f64) -> usize {
    if v < 0.0 {
        0
    } else {
        1 + ((v * 10.0).floor() as usize).min(9)
    }
}

pub fn stats(records: &[UserRecord], encoder: &dyn SentenceEncoder, top_k: usize, order: TopOrder) -> StatsReport {
    let mut similarity: Vec<Bin> = std::iter::once(Bin {
        start: -1.0,
        end: 0.0,
        count: 0,
    })
    .chain((0..10).map(|i| Bin {
        start: i as f64 / 10.0,
        end: (i + 1) as f64 / 10.0,
        count: 0,
    }))
    .collect();
    let max_docs = records.iter().map(|r| r.history.len()).max().unwrap_or(0);
    let mut doc_counts: Vec<Bin> = (0..=max_docs / 10)
        .map(|i| Bin {
            start: (i * 10) as f64,
            end: (i * 10 + 10) as f64,
            count: 0,
        })
        .collect();
    for r in records {
        let s = mean_top_similarity(r, encoder, top_k, order);
        similarity[similarity_bin(s)].count += 1;
        doc_counts[r.history.len() / 10].count += 1;
    }
    let n = records.len();
    let total_docs: usize = records.iter().map(|r| r.history.len()).sum();
    StatsReport {
        users: n,
        mean_docs: if n == 0 { 0.0 } else { total_docs as f64 / n as f64 },
        frac_over_90_docs: if n == 0 { 0.0 } else { records.iter().filter(|r| r.history.len() > 90).count() as f64 / n as f64 },
        similarity,
        doc_counts,
    }
}

pub fn bins_csv(bins: &[Bin]) -> String {
    let mut s = String::from("bin_start,bin_end,count\n");
    for b in bins {
        writeln!(s, "{},{},{}", b.start, b.end, b.count).unwrap();
    }
    s
}

impl StatsReport {
    pub fn summary(&self) -> String {
        format!(
            "users: {}\nmean history documents: {:.2}\nusers with >90 documents: {:.1}%\n",
            self.users,
            self.mean_docs,
            100.0 * self.frac_over_90_docs
        )
    }
}
