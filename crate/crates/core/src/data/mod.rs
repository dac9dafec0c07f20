//! Deterministic symbolic images, question–answer dialogues about them, and
//! retrieval pairs for the contrastive stage.
//!
//! An image is a `G×G` grid whose cells may hold one object (shape, color,
//! size). Each cell becomes exactly two patch tokens in row-major order: a
//! color token and a shape-and-size token, with a dedicated "empty" value of
//! each. Text is whitespace-tokenized over a closed word list.

mod dialogue;
mod image;
mod io;
mod retrieval;

pub use dialogue::{gen_corpus, gen_dialogue, split_turns, DataConfig, Dialogue, Family, Format, Record, Turn};
pub use image::{gen_image, gen_image_with, gen_images, Color, GridConfig, Object, Shape, Size, SymbolicImage};
pub use io::{read_dataset, write_dataset};
pub use retrieval::{gen_retrieval_pairs, RetrievalPair, Task};

use crate::error::{Error, Result};

/// The closed text vocabulary. Id 0 is padding.
pub const WORDS: &[&str] = &[
    "<pad>", "?", ".", ";", "red", "green", "blue", "yellow", "purple", "orange", "circle", "square",
    "triangle", "star", "small", "large", "zero", "one", "two", "three", "four", "five", "six", "seven",
    "eight", "nine", "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "yes",
    "no", "what", "color", "shape", "size", "is", "the", "object", "objects", "in", "row", "column",
    "how", "many", "are", "there", "most", "common", "do", "and", "have", "same", "left", "right", "of",
    "above", "below", "describe", "image", "a", "at",
];

pub const TEXT_VOCAB_SIZE: usize = WORDS.len();
pub const PAD: usize = 0;

/// Color tokens `0..=6` (6 = empty), shape-and-size tokens `7..=15`
/// (15 = empty).
pub const PATCH_VOCAB_SIZE: usize = 16;
pub const PATCHES_PER_CELL: usize = 2;

pub fn word(id: usize) -> Option<&'static str> {
    WORDS.get(id).copied()
}

pub fn word_id(w: &str) -> Option<usize> {
    WORDS.iter().position(|x| *x == w)
}

/// Whitespace tokenization into text ids.
pub fn encode_text(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| word_id(w).ok_or_else(|| Error::Data(format!("word `{w}` is not in the vocabulary"))))
        .collect()
}

/// Inverse of [`encode_text`]; ids outside the text range print as `<id>`.
pub fn decode_text(ids: &[usize]) -> String {
    ids.iter()
        .map(|&i| word(i).map(str::to_string).unwrap_or_else(|| format!("<{i}>")))
        .collect::<Vec<_>>()
        .join(" ")
}

pub(crate) fn number_word(n: usize) -> &'static str {
    WORDS[word_id("zero").unwrap() + n]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_unique_and_round_trips() {
        let mut seen = std::collections::HashSet::new();
        for id in 0..TEXT_VOCAB_SIZE {
            let w = word(id).unwrap();
            assert!(seen.insert(w), "duplicate {w}");
            assert_eq!(word_id(w), Some(id));
        }
        assert_eq!(word(TEXT_VOCAB_SIZE), None);
        let ids = encode_text("how many red objects are there ?").unwrap();
        assert_eq!(decode_text(&ids), "how many red objects are there ?");
        assert!(encode_text("purple elephant").is_err());
        assert_eq!(number_word(16), "sixteen");
    }
}
