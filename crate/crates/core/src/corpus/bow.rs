use std::collections::BTreeMap;

use super::tokenize::tokenize;
use super::vocab::Vocabulary;
use super::UserRecord;

/// Sparse term counts over the topic-model vocabulary.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BowVector {
    counts: BTreeMap<usize, u32>,
}

impl BowVector {
    pub fn from_counts(counts: BTreeMap<usize, u32>) -> Self {
        debug_assert!(counts.values().all(|&c| c > 0));
        Self { counts }
    }

    /// Counts over pre-tokenized documents; out-of-vocabulary tokens are skipped.
    pub fn from_tokens<'a>(docs: impl IntoIterator<Item = &'a [String]>, vocab: &Vocabulary) -> Self {
        let mut counts = BTreeMap::new();
        for doc in docs {
            for t in doc {
                if let Some(id) = vocab.id(t) {
                    *counts.entry(id).or_insert(0) += 1;
                }
            }
        }
        Self { counts }
    }

    /// Empty vectors carry no signal and are excluded from topic-model batches.
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn get(&self, id: usize) -> u32 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }

    pub fn total(&self) -> u64 {
        self.counts.values().map(|&c| u64::from(c)).sum()
    }

    pub fn to_dense(&self, size: usize) -> Vec<f64> {
        let mut v = vec![0.0; size];
        for (k, c) in self.iter() {
            v[k] = f64::from(c);
        }
        v
    }
}

/// Bag of words over the user's whole history.
pub fn build_bow(record: &UserRecord, vocab: &Vocabulary) -> BowVector {
    let docs: Vec<Vec<String>> = record.history.iter().map(|d| tokenize(d)).collect();
    BowVector::from_tokens(docs.iter().map(Vec::as_slice), vocab)
}
