use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::world::SyntheticWorld;

pub const BOS: u32 = 0;
pub const BOI: u32 = 1;
pub const UNK: u32 = 2;
const SPECIALS: u32 = 3;

/// Token ids: three specials, then text words, then the codebook range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
    codebook_size: usize,
}

impl Vocab {
    pub fn new(words: Vec<String>, codebook_size: usize) -> Result<Self> {
        if words.len() > 64 {
            return Err(Error::invalid(format!(
                "at most 64 text words are supported, got {}",
                words.len()
            )));
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), SPECIALS + i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Self {
            words,
            index,
            codebook_size,
        })
    }

    pub fn from_world(world: &SyntheticWorld) -> Self {
        Self::new(world.words(), world.codebook_size()).expect("world vocabulary is valid")
    }

    pub fn size(&self) -> usize {
        SPECIALS as usize + self.words.len() + self.codebook_size
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    /// First id of the codebook range.
    pub fn codebook_offset(&self) -> u32 {
        SPECIALS + self.words.len() as u32
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn is_image_token(&self, id: u32) -> bool {
        id >= self.codebook_offset() && (id as usize) < self.size()
    }

    /// `[BOS, w1, ..., wm]`; words outside the vocabulary become `UNK`.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        if text.trim().is_empty() {
            return Err(Error::invalid("prompt is empty"));
        }
        Ok(std::iter::once(BOS)
            .chain(
                text.split_whitespace()
                    .map(|w| self.word_id(w).unwrap_or(UNK)),
            )
            .collect())
    }
}
