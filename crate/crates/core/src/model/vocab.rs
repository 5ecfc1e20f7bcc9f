//! Toy prompt vocabulary and token sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Words understood by the text embedding table, in id order. The shared
/// identity token `S*` takes the final id, after these.
pub const WORDS: [&str; 31] = [
    "<bos>", "photo", "of", "a", "person", "smiling", "glasses", "laughing", "serious", "sad",
    "angry", "surprised", "makeup", "beard", "lipstick", "funny", "singing", "sunglasses",
    "looking", "wearing", "with", "has", "heavy", "light", "dark", "background", "facing",
    "left", "right", "front", "eyeglasses",
];

pub const BOS: usize = 0;
/// Id of the shared identity token `S*`.
pub const IDENTITY_TOKEN: usize = WORDS.len();
/// Total vocabulary including `S*`.
pub const VOCAB_SIZE: usize = WORDS.len() + 1;

pub const NEUTRAL_PROMPT: &str = "photo of a person";

/// Attributes rendered into the synthetic corpus and usable as edit prompts.
pub const ATTRIBUTES: [&str; 2] = ["smiling", "glasses"];

/// A tokenized prompt. Always starts with `<bos>`; the bare `[<bos>]` sequence is
/// the empty condition ∅.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTokens {
    ids: Vec<usize>,
}

impl PromptTokens {
    /// Tokenizes lowercase words separated by spaces or punctuation.
    pub fn encode(text: &str) -> Result<Self> {
        let mut ids = vec![BOS];
        for word in text
            .split(|c: char| !c.is_ascii_alphanumeric() && c != '*')
            .filter(|w| !w.is_empty())
        {
            let word = word.to_ascii_lowercase();
            if word == "s*" {
                ids.push(IDENTITY_TOKEN);
                continue;
            }
            let id = WORDS
                .iter()
                .position(|w| *w == word)
                .ok_or_else(|| Error::Invalid(format!("unknown prompt word {word:?}")))?;
            ids.push(id);
        }
        Ok(PromptTokens { ids })
    }

    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        if ids.first() != Some(&BOS) {
            return Err(Error::Invalid("prompt must start with <bos>".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= VOCAB_SIZE) {
            return Err(Error::Invalid(format!("token id {bad} outside vocabulary")));
        }
        Ok(PromptTokens { ids })
    }

    pub fn empty() -> Self {
        PromptTokens { ids: vec![BOS] }
    }

    pub fn neutral() -> Self {
        PromptTokens::encode(NEUTRAL_PROMPT).expect("neutral prompt is in vocabulary")
    }

    /// The neutral template followed by attribute words, e.g. "photo of a person smiling".
    pub fn with_attributes<'a>(attributes: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut text = NEUTRAL_PROMPT.to_string();
        for a in attributes {
            text.push(' ');
            text.push_str(a);
        }
        PromptTokens::encode(&text)
    }

    /// Appends `S*` unless already present.
    pub fn with_identity_token(&self) -> Self {
        let mut ids = self.ids.clone();
        if !ids.contains(&IDENTITY_TOKEN) {
            ids.push(IDENTITY_TOKEN);
        }
        PromptTokens { ids }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty_condition(&self) -> bool {
        self.ids == [BOS]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, word: &str) -> bool {
        WORDS
            .iter()
            .position(|w| *w == word)
            .is_some_and(|id| self.ids.contains(&id))
    }

    pub fn decode(&self) -> String {
        self.ids[1..]
            .iter()
            .map(|&i| if i == IDENTITY_TOKEN { "S*" } else { WORDS[i] })
            .collect::<Vec<_>>()
            .join(" ")
    }
}
