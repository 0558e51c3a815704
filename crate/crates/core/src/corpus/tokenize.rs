//! Whitespace/punctuation tokenizer with mention and URL normalization.

pub const URL_TAG: &str = "<url>";
pub const MENTION_TAG: &str = "@user";

/// Lowercases, splits on whitespace, splits punctuation into single-character
/// tokens, and replaces mentions with `@user` and URLs with `<url>`.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    for chunk in lower.split_whitespace() {
        if chunk == URL_TAG || is_url(chunk) {
            out.push(URL_TAG.to_string());
            continue;
        }
        split_chunk(chunk, &mut out);
    }
    out
}

fn is_url(chunk: &str) -> bool {
    chunk.starts_with("http://") || chunk.starts_with("https://") || chunk.starts_with("www.")
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn split_chunk(chunk: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = chunk.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '@' && chars.get(i + 1).copied().is_some_and(is_word_char) {
            i += 1;
            while i < chars.len() && is_word_char(chars[i]) {
                i += 1;
            }
            out.push(MENTION_TAG.to_string());
        } else if is_word_char(c) {
            let start = i;
            while i < chars.len() && is_word_char(chars[i]) {
                i += 1;
            }
            out.push(chars[start..i].iter().collect());
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
}
