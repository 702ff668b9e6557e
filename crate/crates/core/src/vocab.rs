//! Fixed sandbox vocabulary. Token ids are indices into [`VOCAB`].

pub const VOCAB: &[&str] = &[
    "a", "the", "and", "on", "in", "with", "photo", "of", "near", "under", // context words
    "cat", "dog", "horse", "bird", "car", "boat", "tree", "person", "kite", "apple", "clock", "bench",
    "giraffe", "train", "pikachu", "chair",
];

/// Ids below this are context words; the rest are objects.
pub const FIRST_OBJECT: u32 = 10;

pub fn token_id(word: &str) -> Option<u32> {
    VOCAB.iter().position(|w| *w == word).map(|i| i as u32)
}

pub fn word(id: u32) -> Option<&'static str> {
    VOCAB.get(id as usize).copied()
}
