//! Token vocabulary and fixed-length captions for the shapes world.
//!
//! The conditioning path needs nothing more than a stable id per symbol; a
//! learned embedding table replaces a pretrained text encoder. Token ids
//! are serialized with the model so checkpoints stay self-describing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed caption length (tokens are padded up to this).
pub const CAPTION_LEN: usize = 16;

pub const PAD_TOKEN: &str = "<pad>";

/// Ordered list of symbols; index = token id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocab {
    tokens: Vec<String>,
}

impl Default for TokenVocab {
    fn default() -> Self {
        let tokens = [
            PAD_TOKEN, // id 0
            "red", "green", "blue", "yellow", "orange", // colors
            "circle", "square", "triangle", // shapes
            "left-of", "right-of", "above", "below", // relations
            "and",
        ];
        Self {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TokenVocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// A caption as padded token ids, always [`CAPTION_LEN`] long.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub token_ids: Vec<usize>,
}

impl Caption {
    /// Tokenize whitespace-separated lowercase text against the vocabulary.
    pub fn parse(text: &str, vocab: &TokenVocab) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::Invalid {
                what: "caption",
                reason: "empty text".into(),
            });
        }
        if words.len() > CAPTION_LEN {
            return Err(Error::Invalid {
                what: "caption",
                reason: format!("{} tokens exceed the {CAPTION_LEN}-token limit", words.len()),
            });
        }
        let mut token_ids = Vec::with_capacity(CAPTION_LEN);
        for w in &words {
            let lw = w.to_lowercase();
            let id = vocab.id(&lw).ok_or_else(|| Error::UnknownToken {
                token: lw.clone(),
                hint: vocab.tokens.join(", "),
            })?;
            token_ids.push(id);
        }
        token_ids.resize(CAPTION_LEN, 0);
        Ok(Self { token_ids })
    }

    /// The non-padding tokens as text.
    pub fn to_text(&self, vocab: &TokenVocab) -> String {
        self.token_ids
            .iter()
            .take_while(|&&id| id != 0)
            .filter_map(|&id| vocab.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Number of non-padding tokens.
    pub fn content_len(&self) -> usize {
        self.token_ids.iter().take_while(|&&id| id != 0).count()
    }
}
