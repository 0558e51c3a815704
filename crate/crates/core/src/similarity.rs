//! Sentence similarity backends and document representativeness.
//!
//! Two interchangeable encoders are provided: corpus-fitted TF-IDF (the
//! default, deterministic and training-free) and the mean of generator token
//! embeddings. Similarity is cosine; a sentence with no in-vocabulary tokens
//! gets a zero embedding whose cosine to everything, itself included, is 0.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Tfidf,
    MeanTokenEmbedding,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tfidf" => Ok(Backend::Tfidf),
            "mean-token-embedding" => Ok(Backend::MeanTokenEmbedding),
            other => Err(Error::Usage(format!("unknown similarity backend {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Values {
    /// Sorted by term id.
    Sparse(Vec<(usize, f64)>),
    Dense(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    values: Values,
    backend: Backend,
}

impl SentenceEmbedding {
    pub fn backend(&self) -> Backend {
        self.backend
    }

    fn norm(&self) -> f64 {
        match &self.values {
            Values::Sparse(v) => v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt(),
            Values::Dense(v) => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.norm() == 0.0
    }

    /// Multiplies every component by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let values = match &self.values {
            Values::Sparse(v) => Values::Sparse(v.iter().map(|&(i, x)| (i, x * k)).collect()),
            Values::Dense(v) => Values::Dense(v.iter().map(|x| x * k).collect()),
        };
        Self {
            values,
            backend: self.backend,
        }
    }

    pub fn dense(values: Vec<f64>) -> Self {
        Self {
            values: Values::Dense(values),
            backend: Backend::MeanTokenEmbedding,
        }
    }
}

/// Cosine similarity clamped to [-1, 1]; 0 when either side is a zero vector.
pub fn cosine(a: &SentenceEmbedding, b: &SentenceEmbedding) -> f64 {
    let dot = match (&a.values, &b.values) {
        (Values::Dense(x), Values::Dense(y)) => x.iter().zip(y).map(|(p, q)| p * q).sum(),
        (Values::Sparse(x), Values::Sparse(y)) => sparse_dot(x, y),
        _ => panic!("cosine across embedding backends"),
    };
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn sparse_dot(x: &[(usize, f64)], y: &[(usize, f64)]) -> f64 {
    // Accumulate in ascending term order on both sides so the sum is the
    // same regardless of argument order.
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < x.len() && j < y.len() {
        match x[i].0.cmp(&y[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += x[i].1 * y[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    s
}

/// Maps a tokenized sentence to an embedding.
pub trait SentenceEncoder {
    fn embed(&self, tokens: &[String]) -> SentenceEmbedding;

    fn similarity(&self, a: &[String], b: &[String]) -> f64 {
        cosine(&self.embed(a), &self.embed(b))
    }
}

/// TF-IDF with smoothed idf `ln((1+N)/(1+df)) + 1`, L2-normalized.
#[derive(Debug, Clone)]
pub struct TfidfEncoder {
    terms: HashMap<String, usize>,
    idf: Vec<f64>,
}

impl TfidfEncoder {
    pub fn fit<'a>(docs: impl IntoIterator<Item = &'a [String]>) -> Result<Self> {
        let mut terms: HashMap<String, usize> = HashMap::new();
        let mut df: Vec<usize> = Vec::new();
        let mut n_docs = 0usize;
        for doc in docs {
            n_docs += 1;
            let mut seen: Vec<usize> = doc
                .iter()
                .map(|t| {
                    let next = terms.len();
                    *terms.entry(t.clone()).or_insert(next)
                })
                .collect();
            seen.sort_unstable();
            seen.dedup();
            df.resize(terms.len(), 0);
            for id in seen {
                df[id] += 1;
            }
        }
        if n_docs == 0 || terms.is_empty() {
            return Err(Error::Config("tfidf backend fitted on an empty corpus".into()));
        }
        let n = n_docs as f64;
        let idf = df.iter().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();
        Ok(Self { terms, idf })
    }

    pub fn num_terms(&self) -> usize {
        self.idf.len()
    }
}

impl SentenceEncoder for TfidfEncoder {
    fn embed(&self, tokens: &[String]) -> SentenceEmbedding {
        let mut tf: HashMap<usize, f64> = HashMap::new();
        for t in tokens {
            if let Some(&id) = self.terms.get(t) {
                *tf.entry(id).or_default() += 1.0;
            }
        }
        let mut v: Vec<(usize, f64)> = tf.into_iter().map(|(id, c)| (id, c * self.idf[id])).collect();
        v.sort_unstable_by_key(|&(id, _)| id);
        let norm = v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|(_, x)| *x /= norm);
        }
        SentenceEmbedding {
            values: Values::Sparse(v),
            backend: Backend::Tfidf,
        }
    }
}

/// Mean of generator token embeddings, L2-normalized.
#[derive(Debug, Clone)]
pub struct MeanEmbeddingEncoder {
    vocab: Vocabulary,
    table: Tensor,
}

impl MeanEmbeddingEncoder {
    pub fn new(vocab: Vocabulary, table: Tensor) -> Result<Self> {
        if table.rank() != 2 || table.shape()[0] != vocab.len() {
            return Err(Error::shape("mean-token-embedding", table.shape(), &[vocab.len()]));
        }
        Ok(Self { vocab, table })
    }
}

impl SentenceEncoder for MeanEmbeddingEncoder {
    fn embed(&self, tokens: &[String]) -> SentenceEmbedding {
        let d = self.table.shape()[1];
        let mut acc = vec![0.0; d];
        let mut n = 0usize;
        for t in tokens {
            if let Some(id) = self.vocab.id(t) {
                acc.iter_mut().zip(self.table.row(id)).for_each(|(a, b)| *a += b);
                n += 1;
            }
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0 && norm > 0.0 {
            acc.iter_mut().for_each(|x| *x /= norm);
        }
        SentenceEmbedding {
            values: Values::Dense(acc),
            backend: Backend::MeanTokenEmbedding,
        }
    }
}

/// Symmetric matrix of pairwise cosines over a document list.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_embeddings(embs: &[SentenceEmbedding]) -> Self {
        let n = embs.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = if embs[i].is_zero() { 0.0 } else { 1.0 };
            for j in i + 1..n {
                let s = cosine(&embs[i], &embs[j]);
                values[i * n + j] = s;
                values[j * n + i] = s;
            }
        }
        Self { n, values }
    }

    pub fn from_docs(encoder: &dyn SentenceEncoder, docs: &[Vec<String>]) -> Self {
        let embs: Vec<_> = docs.iter().map(|d| encoder.embed(d)).collect();
        Self::from_embeddings(&embs)
    }

    /// Builds from an explicit row-major matrix (must be square and symmetric).
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::shape("similarity matrix", &[n, n], &[values.len()]));
        }
        for i in 0..n {
            for j in 0..i {
                if values[i * n + j] != values[j * n + i] {
                    return Err(Error::Format(format!("similarity matrix not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { n, values })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Mean similarity of `u` to every document in `pool` (self included if present).
    pub fn mean_over(&self, u: usize, pool: &[usize]) -> f64 {
        if pool.is_empty() {
            return 0.0;
        }
        pool.iter().map(|&v| self.get(u, v)).sum::<f64>() / pool.len() as f64
    }

    /// Representativeness of `u` over all documents.
    pub fn representativeness(&self, u: usize) -> f64 {
        let row = &self.values[u * self.n..(u + 1) * self.n];
        row.iter().sum::<f64>() / self.n as f64
    }

    pub fn all_representativeness(&self) -> Vec<f64> {
        (0..self.n).map(|u| self.representativeness(u)).collect()
    }

    /// Cache layout: `UTGSIM1`, n as u64 LE, n² f64 LE row-major.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Format("not a similarity cache file".into()));
        }
        let mut nb = [0u8; 8];
        r.read_exact(&mut nb)?;
        let n = u64::from_le_bytes(nb) as usize;
        let mut raw = vec![0u8; n * n * 8];
        r.read_exact(&mut raw)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_values(n, values)
    }
}

const CACHE_MAGIC: &[u8; 7] = b"UTGSIM1";

/// Representativeness of document `u`: mean cosine to every document in
/// `docs`, including itself.
pub fn representativeness(u: usize, docs: &[Vec<String>], encoder: &dyn SentenceEncoder) -> f64 {
    let eu = encoder.embed(&docs[u]);
    docs.iter().map(|d| cosine(&eu, &encoder.embed(d))).sum::<f64>() / docs.len() as f64
}
