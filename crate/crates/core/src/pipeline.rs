//! From user records to model-ready examples: tokenization, vocabularies,
//! document selection and id encoding.

use std::path::Path;

use crate::config::DataConfig;
use crate::corpus::{tokenize, BowVector, UserRecord, VocabKind, Vocabulary};
use crate::error::Result;
use crate::selection::{chronological_truncation, select_input};
use crate::similarity::{SentenceEncoder, TfidfEncoder};

pub const GEN_VOCAB_FILE: &str = "gen_vocab.txt";
pub const BOW_VOCAB_FILE: &str = "bow_vocab.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedUser {
    pub user_id: String,
    pub docs: Vec<Vec<String>>,
    pub intro: Vec<String>,
}

impl From<&UserRecord> for TokenizedUser {
    fn from(r: &UserRecord) -> Self {
        Self {
            user_id: r.user_id.clone(),
            docs: r.history.iter().map(|d| tokenize(d)).collect(),
            intro: tokenize(&r.self_intro),
        }
    }
}

pub fn tokenize_users(records: &[UserRecord]) -> Vec<TokenizedUser> {
    records.iter().map(TokenizedUser::from).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabs {
    pub gen: Vocabulary,
    pub bow: Vocabulary,
}

impl Vocabs {
    /// Generation vocabulary over histories and introductions; topic-model
    /// vocabulary over histories only.
    pub fn build(users: &[TokenizedUser], cfg: &DataConfig) -> Self {
        let all = users.iter().flat_map(|u| u.docs.iter().chain(std::iter::once(&u.intro))).map(Vec::as_slice);
        let gen = Vocabulary::build_generation(all, cfg.gen_vocab_size);
        let bow = Vocabulary::build_bow(users.iter().flat_map(|u| u.docs.iter()).map(Vec::as_slice), cfg.bow_vocab_size);
        Self { gen, bow }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.gen.save(&dir.join(GEN_VOCAB_FILE))?;
        self.bow.save(&dir.join(BOW_VOCAB_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            gen: Vocabulary::load(&dir.join(GEN_VOCAB_FILE), VocabKind::Generation)?,
            bow: Vocabulary::load(&dir.join(BOW_VOCAB_FILE), VocabKind::Bow)?,
        })
    }
}

/// One source/target pair in id form.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub user_id: String,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub target_tokens: Vec<String>,
    pub bow: BowVector,
    pub history_docs: usize,
    /// Selected history documents in chronological order (all when
    /// selection is off).
    pub kept: Vec<usize>,
    /// Full-history representativeness of each kept document.
    pub scores: Vec<f64>,
}

/// Builds the encoder input of one user: selection over a TF-IDF encoder
/// fitted on the user's own history, or the chronological head when
/// selection is off.
pub fn source_tokens(user: &TokenizedUser, cfg: &DataConfig, selection: bool, encoder: Option<&dyn SentenceEncoder>) -> Result<(Vec<String>, Vec<usize>, Vec<f64>)> {
    if !selection || user.docs.is_empty() {
        let seq = chronological_truncation(&user.docs, cfg.max_input_tokens);
        return Ok((seq, (0..user.docs.len()).collect(), Vec::new()));
    }
    let fitted;
    let enc: &dyn SentenceEncoder = match encoder {
        Some(e) => e,
        None => match TfidfEncoder::fit(user.docs.iter().map(Vec::as_slice)) {
            Ok(e) => {
                fitted = e;
                &fitted
            }
            // a history without any token has nothing to rank
            Err(_) => return Ok((chronological_truncation(&user.docs, cfg.max_input_tokens), (0..user.docs.len()).collect(), Vec::new())),
        },
    };
    let (shortlist, kept, seq) = select_input(&user.docs, enc, cfg.lambda, cfg.score_mode, cfg.max_input_tokens)?;
    let scores = kept.iter().map(|&i| shortlist.entries.iter().find(|e| e.index == i).map_or(0.0, |e| e.score)).collect();
    Ok((seq, kept, scores))
}

pub fn build_example(user: &TokenizedUser, vocabs: &Vocabs, cfg: &DataConfig, selection: bool, encoder: Option<&dyn SentenceEncoder>) -> Result<Example> {
    let (seq, kept, scores) = source_tokens(user, cfg, selection, encoder)?;
    Ok(Example {
        user_id: user.user_id.clone(),
        source: vocabs.gen.encode(&seq),
        target: vocabs.gen.encode(&user.intro),
        target_tokens: user.intro.clone(),
        bow: BowVector::from_tokens(user.docs.iter().map(Vec::as_slice), &vocabs.bow),
        history_docs: user.docs.len(),
        kept,
        scores,
    })
}

pub fn build_examples(users: &[TokenizedUser], vocabs: &Vocabs, cfg: &DataConfig, selection: bool, encoder: Option<&dyn SentenceEncoder>) -> Result<Vec<Example>> {
    users.iter().map(|u| build_example(u, vocabs, cfg, selection, encoder)).collect()
}
