//! Whitespace tokenization and stable word hashing.

use sha2::{Digest, Sha256};

/// Small English stopword list used when deciding whether a word is novel.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "of", "to", "in", "on", "at", "by", "for", "with",
    "from", "up", "down", "into", "onto", "off", "out", "over", "then", "than", "is", "are",
    "was", "were", "be", "been", "being", "it", "its", "this", "that", "these", "those", "he",
    "she", "they", "them", "his", "her", "their", "him", "as", "while", "after", "before",
    "again", "some", "s", "who", "which", "there", "also",
];

pub fn is_stopword(word: &str) -> bool {
    STOPWORDS.contains(&word)
}

/// Instance tokens are written in brackets, e.g. `[v]`.
pub fn is_instance_token(token: &str) -> bool {
    token.len() > 2 && token.starts_with('[') && token.ends_with(']')
}

/// Lowercased whitespace tokens with surrounding punctuation stripped.
/// Bracketed instance tokens are kept verbatim.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            if is_instance_token(raw) {
                return Some(raw.to_string());
            }
            let word: String = raw
                .chars()
                .filter(|c| c.is_alphanumeric() || *c == '\'' || *c == '-')
                .collect::<String>()
                .trim_matches(|c| c == '\'' || c == '-')
                .to_lowercase();
            (!word.is_empty()).then_some(word)
        })
        .collect()
}

/// Tokens that count as content words (stopwords and instance tokens removed).
pub fn content_words(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|w| !is_stopword(w) && !is_instance_token(w))
        .collect()
}

/// Stable 64-bit hash of a string (first 8 bytes of SHA-256, little endian).
pub fn stable_hash(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Per-item seed derived from a base seed and an item identifier.
pub fn derive_seed(seed: u64, item: &str) -> u64 {
    seed ^ stable_hash(item)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_strips_punctuation_and_case() {
        assert_eq!(
            tokenize("A Person opens the door, then LEAVES."),
            vec!["a", "person", "opens", "the", "door", "then", "leaves"]
        );
        assert_eq!(tokenize("[v] person"), vec!["[v]", "person"]);
        assert_eq!(tokenize("-- ... !"), Vec::<String>::new());
    }

    #[test]
    fn content_words_drop_stopwords() {
        assert_eq!(content_words("the [v] person sits on a chair"), vec!["person", "sits", "chair"]);
    }

    #[test]
    fn hashing_is_stable() {
        assert_eq!(stable_hash("person"), stable_hash("person"));
        assert_ne!(stable_hash("person"), stable_hash("persons"));
        assert_ne!(derive_seed(7, "a"), derive_seed(7, "b"));
    }
}
