//! User records, tokenization, vocabularies and dataset preprocessing.

mod bow;
mod filter;
mod records;
mod split;
mod stats;
mod stopwords;
mod tokenize;
mod vocab;

pub use bow::{build_bow, BowVector};
pub use filter::{filter_records, mean_top_similarity, FilterConfig, TopOrder};
pub use records::{parse_jsonl, read_jsonl, write_jsonl, UserRecord};
pub use split::{split, SplitRatios};
pub use stats::{bins_csv, similarity_bin, stats, Bin, StatsReport};
pub use stopwords::{is_stopword, STOPWORDS};
pub use tokenize::{tokenize, MENTION_TAG, URL_TAG};
pub use vocab::{VocabKind, Vocabulary, BOS, BOS_ID, EOS, EOS_ID, PAD, PAD_ID, SEP, UNK, UNK_ID};
