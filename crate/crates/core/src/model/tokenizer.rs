// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic word-piece tokenizer for the toy encoder.
//!
//! Ids 0, 1 and 2 are padding, start-of-text and end-of-text. Each word is
//! lowercased, stripped to alphanumerics and cut into pieces of at most
//! [`PIECE_CHARS`] characters; every piece hashes into the remaining ids.

use crate::error::{Error, Result};
use crate::model::Tokenized;
use crate::relevance::WordSpan;

pub const PAD_ID: u32 = 0;
pub const SOT_ID: u32 = 1;
pub const EOT_ID: u32 = 2;
const FIRST_WORD_ID: u32 = 3;
pub const PIECE_CHARS: usize = 5;

/// Lowercase alphanumeric form used as the word key of spans.
pub fn normalize_word(word: &str) -> String {
    word.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Normalized words of a text, in order, empty ones dropped.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(normalize_word)
        .filter(|w| !w.is_empty())
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyTokenizer {
    pub vocab_size: u32,
    pub max_tokens: usize,
}

impl ToyTokenizer {
    pub fn piece_id(&self, piece: &str, continuation: bool) -> u32 {
        let mut key = Vec::with_capacity(piece.len() + 1);
        if continuation {
            key.push(b'#');
        }
        key.extend_from_slice(piece.as_bytes());
        FIRST_WORD_ID + (fnv1a(&key) % u64::from(self.vocab_size - FIRST_WORD_ID)) as u32
    }

    /// Ids for one word, without specials.
    pub fn word_ids(&self, word: &str) -> Vec<u32> {
        let chars: Vec<char> = normalize_word(word).chars().collect();
        chars
            .chunks(PIECE_CHARS)
            .enumerate()
            .map(|(i, c)| self.piece_id(&c.iter().collect::<String>(), i > 0))
            .collect()
    }

    pub fn tokenize(&self, text: &str) -> Result<Tokenized> {
        let mut ids = vec![SOT_ID];
        let mut spans = Vec::new();
        for word in words(text) {
            let pieces = self.word_ids(&word);
            let start = ids.len();
            ids.extend(&pieces);
            spans.push(WordSpan::new(word, (start..ids.len()).collect()));
        }
        ids.push(EOT_ID);
        if ids.len() > self.max_tokens {
            return Err(Error::invalid(format!(
                "text needs {} tokens, encoder accepts {}",
                ids.len(),
                self.max_tokens
            )));
        }
        Ok(Tokenized {
            eot_index: ids.len() - 1,
            sot_index: Some(0),
            padding: Vec::new(),
            ids,
            spans,
        })
    }
}
