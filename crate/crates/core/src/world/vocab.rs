//! The fixed token vocabulary shared by the instruction generator, the
//! tokenizer and the masking logic.
//!
//! Layout is positional and never changes: specials, then direction words,
//! then template filler, then the 40 landmark nouns. Training artifacts
//! (embedding tables, checkpoints) depend on this order.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;

pub const DIRECTIONS: [&str; 5] = ["left", "right", "straight", "up", "down"];
const FILLER: [&str; 8] = ["turn", "and", "walk", "to", "the", "stop", "at", "."];
pub const LANDMARKS: [&str; 40] = [
    "sofa", "table", "lamp", "bed", "chair", "desk", "mirror", "plant", "shelf", "sink",
    "oven", "fridge", "couch", "rug", "stairs", "window", "door", "piano", "vase", "clock",
    "toilet", "shower", "bathtub", "dresser", "cabinet", "counter", "stove", "bench", "bookcase",
    "painting", "fireplace", "wardrobe", "nightstand", "curtain", "towel", "basket", "ladder",
    "treadmill", "aquarium", "statue",
];

const SPECIALS: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]"];
const DIRECTION_BASE: usize = SPECIALS.len();
const FILLER_BASE: usize = DIRECTION_BASE + DIRECTIONS.len();
const LANDMARK_BASE: usize = FILLER_BASE + FILLER.len();

/// Token to id map with membership queries for the two content classes.
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut tokens: Vec<String> = Vec::new();
        tokens.extend(SPECIALS.iter().map(|s| s.to_string()));
        tokens.extend(DIRECTIONS.iter().map(|s| s.to_string()));
        tokens.extend(FILLER.iter().map(|s| s.to_string()));
        tokens.extend(LANDMARKS.iter().map(|s| s.to_string()));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Data(format!("token {token:?} is not in the vocabulary")))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn is_direction(&self, id: usize) -> bool {
        (DIRECTION_BASE..FILLER_BASE).contains(&id)
    }

    pub fn is_landmark(&self, id: usize) -> bool {
        id >= LANDMARK_BASE && id < LANDMARK_BASE + LANDMARKS.len()
    }

    /// Tokens eligible for masking during language-model pretraining.
    pub fn is_maskable(&self, id: usize) -> bool {
        self.is_direction(id) || self.is_landmark(id)
    }

    /// Word naming landmark `lm` (an id in `0..LANDMARKS.len()`).
    pub fn landmark_word(&self, lm: usize) -> &str {
        &self.tokens[LANDMARK_BASE + lm]
    }

    /// Inverse of `landmark_word` for token ids.
    pub fn landmark_of_token(&self, id: usize) -> Option<usize> {
        if self.is_landmark(id) {
            Some(id - LANDMARK_BASE)
        } else {
            None
        }
    }
}
