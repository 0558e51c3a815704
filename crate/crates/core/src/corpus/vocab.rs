use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::stopwords::is_stopword;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
/// Joins selected documents into one encoder input.
pub const SEP: &str = "<sep>";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

const SPECIALS: [&str; 4] = [PAD, BOS, EOS, UNK];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabKind {
    /// Ids 0..=3 are pad, begin, end, unknown; `<sep>` follows.
    Generation,
    /// Topic-model vocabulary: no specials, ids start at 0.
    Bow,
}

/// Bijective token/id map.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    kind: VocabKind,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(kind: VocabKind, tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { kind, tokens, index })
    }

    /// Generation vocabulary: specials, `<sep>`, then the `max_size` most
    /// frequent tokens (ties by token order).
    pub fn build_generation<'a>(docs: impl IntoIterator<Item = &'a [String]>, max_size: usize) -> Self {
        let ranked = rank_by_frequency(docs, |t| !SPECIALS.contains(&t) && t != SEP);
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.push(SEP.to_string());
        tokens.extend(ranked.into_iter().take(max_size));
        Self::from_tokens(VocabKind::Generation, tokens).expect("ranked tokens are unique")
    }

    /// Topic-model vocabulary: top `size` tokens after dropping stopwords,
    /// single-character tokens, tags, and tokens without a letter.
    pub fn build_bow<'a>(docs: impl IntoIterator<Item = &'a [String]>, size: usize) -> Self {
        let ranked = rank_by_frequency(docs, bow_eligible);
        Self::from_tokens(VocabKind::Bow, ranked.into_iter().take(size).collect()).expect("ranked tokens are unique")
    }

    /// Builds a vocabulary directly from an explicit token list (no specials
    /// are added for [`VocabKind::Bow`]).
    pub fn from_list(kind: VocabKind, list: Vec<String>) -> Result<Self> {
        let tokens = match kind {
            VocabKind::Bow => list,
            VocabKind::Generation => SPECIALS.iter().map(|s| s.to_string()).chain(list).collect(),
        };
        Self::from_tokens(kind, tokens)
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or the unknown id for generation vocabularies.
    pub fn id_or_unk(&self, token: &str) -> Option<usize> {
        self.id(token).or(match self.kind {
            VocabKind::Generation => Some(UNK_ID),
            VocabKind::Bow => None,
        })
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().filter_map(|t| self.id_or_unk(t)).collect()
    }

    /// Joins tokens, stopping at the end token and skipping pad/begin.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        let mut out = Vec::new();
        for &i in ids {
            if self.kind == VocabKind::Generation {
                if i == EOS_ID {
                    break;
                }
                if i == PAD_ID || i == BOS_ID {
                    continue;
                }
            }
            out.push(self.token(i).unwrap_or(UNK).to_string());
        }
        out
    }

    fn listed(&self) -> &[String] {
        match self.kind {
            VocabKind::Generation => &self.tokens[SPECIALS.len()..],
            VocabKind::Bow => &self.tokens,
        }
    }

    /// One token per line; line `n` holds id `n` + number of specials.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in self.listed() {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, kind: VocabKind) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_list(kind, s.lines().map(str::to_string).collect())
    }
}

fn bow_eligible(t: &str) -> bool {
    t.chars().count() > 1 && t.chars().any(char::is_alphabetic) && !t.starts_with('<') && !t.starts_with('@') && !is_stopword(t)
}

fn rank_by_frequency<'a>(docs: impl IntoIterator<Item = &'a [String]>, keep: impl Fn(&str) -> bool) -> Vec<String> {
    let mut counts: HashMap<&'a str, usize> = HashMap::new();
    for doc in docs {
        for t in doc {
            if keep(t) {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.into_iter().map(|(t, _)| t.to_string()).collect()
}
