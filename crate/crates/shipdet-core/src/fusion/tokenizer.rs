//! Character-level tokenizer: lowercase letters, digits, the punctuation the
//! answer grammar uses, and three specials (UNK, SEP, EOS). Input text is
//! lowercased; anything else maps to UNK.

use alloc::string::String;
use alloc::vec::Vec;

const CHARSET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789 .,;[]";

pub const UNK: usize = CHARSET.len();
pub const SEP: usize = CHARSET.len() + 1;
pub const EOS: usize = CHARSET.len() + 2;

/// Total vocabulary size including specials.
pub const VOCAB_SIZE: usize = CHARSET.len() + 3;

#[derive(Clone, Debug, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| {
                let lower = c.to_ascii_lowercase();
                CHARSET
                    .iter()
                    .position(|&b| b as char == lower)
                    .unwrap_or(UNK)
            })
            .collect()
    }

    /// Renders ids back to text; UNK prints as '?', SEP/EOS are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id < CHARSET.len() {
                out.push(CHARSET[id] as char);
            } else if id == UNK {
                out.push('?');
            }
        }
        out
    }
}
