use crate::error::{Error, Result};

pub const START: usize = 0;
pub const END: usize = 1;
pub const PAD: usize = 2;

const WORDS: &[&str] = &[
    "<start>", "<end>", "<pad>", "video", "direction?", "order?", "count?", "where?", "left",
    "right", "up", "down", "forward", "backward", "top-left", "top-right", "bottom-left",
    "bottom-right", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "is", "the", "what", "?",
];

/// Fixed word table shared by every task. Ids 0, 1 and 2 are reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<&'static str>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            words: WORDS.to_vec(),
        }
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| *w == word)
            .ok_or_else(|| Error::contract(format!("word {word:?} not in vocabulary")))
    }

    pub fn word(&self, id: usize) -> Result<&'static str> {
        self.words.get(id).copied().ok_or(Error::Index {
            what: "vocabulary",
            index: id,
            len: self.words.len(),
        })
    }

    pub fn ids(&self, words: &[&str]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn is_reserved(id: usize) -> bool {
        id <= PAD
    }
}
