use std::ops::Range;

use crate::error::{Error, Result};

pub const BOS_TOKEN: &str = "<|startoftext|>";
pub const EOS_TOKEN: &str = "<|endoftext|>";

/// Prompt split into word tokens with start/end markers and padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedPrompt {
    pub words: Vec<String>,
    pub tokens: Vec<String>,
    pub word_spans: Vec<Range<usize>>,
}

impl TokenizedPrompt {
    /// First token position of each noun, in the order given.
    pub fn noun_positions(&self, nouns: &[String]) -> Result<Vec<usize>> {
        let mut positions = Vec::with_capacity(nouns.len());
        for noun in nouns {
            let needle = normalize_word(noun);
            let idx = self
                .words
                .iter()
                .enumerate()
                .position(|(i, w)| *w == needle && !positions.contains(&self.word_spans[i].start))
                .ok_or_else(|| Error::invalid(format!("noun {noun:?} does not occur in the prompt")))?;
            positions.push(self.word_spans[idx].start);
        }
        Ok(positions)
    }
}

fn normalize_word(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// One token per whitespace-separated word, lowercased, punctuation trimmed.
/// Sequence is `[BOS, words.., EOS, EOS..]` of exactly `seq_len` tokens.
pub fn tokenize_words(prompt: &str, seq_len: usize) -> Result<TokenizedPrompt> {
    let words: Vec<String> = prompt
        .split_whitespace()
        .map(normalize_word)
        .filter(|w| !w.is_empty())
        .collect();
    if words.len() + 2 > seq_len {
        return Err(Error::invalid(format!(
            "prompt has {} words but the encoder fits at most {}",
            words.len(),
            seq_len.saturating_sub(2)
        )));
    }
    let mut tokens = Vec::with_capacity(seq_len);
    tokens.push(BOS_TOKEN.to_string());
    let mut word_spans = Vec::with_capacity(words.len());
    for w in &words {
        word_spans.push(tokens.len()..tokens.len() + 1);
        tokens.push(w.clone());
    }
    tokens.resize(seq_len, EOS_TOKEN.to_string());
    Ok(TokenizedPrompt { words, tokens, word_spans })
}
