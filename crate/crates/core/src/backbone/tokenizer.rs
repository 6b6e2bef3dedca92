//! Whitespace word-level tokenizer over a fixed vocabulary.
//!
//! The vocabulary covers the two prompt templates plus the reserved
//! placeholder; any other word maps to `<unk>`.

use crate::error::{Error, Result};

pub const ID_PLACEHOLDER: &str = "<id>";

const UNK: u32 = 0;
const BOS: u32 = 1;
const EOS: u32 = 2;
const ID: u32 = 3;

const FIXED_WORDS: &[&str] =
    &["this", "is", "a", "real", "fake", "photo", "of", "person.", "face", "the"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassTag {
    Real,
    Fake,
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    words: Vec<String>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut words = vec!["<unk>".to_string(), "<bos>".to_string(), "<eos>".to_string(), ID_PLACEHOLDER.to_string()];
        words.extend(FIXED_WORDS.iter().map(|w| w.to_string()));
        Tokenizer { words }
    }

    pub fn id_token(&self) -> u32 {
        ID
    }

    pub fn vocab_len(&self) -> usize {
        self.words.len()
    }

    /// `<bos>` + lowercased whitespace words + `<eos>`.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Vec<u32>> {
        let mut ids = vec![BOS];
        for word in text.split_whitespace() {
            let lower = word.to_lowercase();
            let id = self
                .words
                .iter()
                .position(|w| *w == lower)
                .map(|p| p as u32)
                .unwrap_or(UNK);
            ids.push(id);
        }
        ids.push(EOS);
        if ids.len() > max_len {
            return Err(Error::Validation(format!(
                "prompt tokenizes to {} tokens, exceeding the maximum {max_len}",
                ids.len()
            )));
        }
        Ok(ids)
    }
}
