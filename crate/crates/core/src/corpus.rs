//! Small bundled English corpus for prompts and perplexity.

use crate::tokenizer::encode;

pub const CORPUS: &str = include_str!("../data/corpus.txt");

/// Non-empty lines of `text`, trimmed.
pub fn lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty())
}

/// The first `n` corpus lines as token prompts, each cut to `max_len` tokens.
pub fn prompts(n: usize, max_len: usize) -> Vec<Vec<u32>> {
    lines(CORPUS)
        .take(n)
        .map(|l| {
            let mut t = encode(l);
            t.truncate(max_len);
            t
        })
        .collect()
}

/// The whole corpus as one token stream.
pub fn stream() -> Vec<u32> {
    encode(CORPUS)
}
