//! Corpus-built vocabulary and tokenizer for the toy text encoder.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Id 0 is reserved for unknown words.
pub const UNK_TOKEN_ID: usize = 0;

/// Lowercased, punctuation-split word vocabulary with deterministic ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    ids: BTreeMap<String, usize>,
    words: Vec<String>,
}

impl Vocab {
    /// Build from a corpus: unique words sorted, ids starting after UNK.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(corpus: I) -> Self {
        let mut unique: Vec<String> = corpus
            .into_iter()
            .flat_map(split_words)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        unique.sort();
        let mut ids = BTreeMap::new();
        let mut words = vec!["<unk>".to_string()];
        for w in unique {
            ids.insert(w.clone(), words.len());
            words.push(w);
        }
        Self { ids, words }
    }

    /// Total id space including UNK.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 1
    }

    pub fn id_of(&self, word: &str) -> usize {
        self.ids
            .get(&word.to_lowercase())
            .copied()
            .unwrap_or(UNK_TOKEN_ID)
    }

    pub fn word_of(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }
}

fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Tokenize into vocabulary ids (UNK fallback), optionally truncating to
/// `max_len`. Returns the ids and whether truncation happened.
pub fn tokenize(sentence: &str, vocab: &Vocab, max_len: usize) -> (Vec<usize>, bool) {
    let words = split_words(sentence);
    let truncated = words.len() > max_len;
    let ids = words
        .into_iter()
        .take(max_len)
        .map(|w| vocab.id_of(&w))
        .collect();
    (ids, truncated)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_words_map_to_known_ids() {
        let vocab = Vocab::build(["A red SUV goes", "the suv stops"]);
        let (ids, truncated) = tokenize("A red SUV", &vocab, 16);
        assert_eq!(ids.len(), 3);
        assert!(!truncated);
        assert!(ids.iter().all(|&id| id != UNK_TOKEN_ID));
    }

    #[test]
    fn unseen_word_maps_to_unk() {
        let vocab = Vocab::build(["a red suv"]);
        let (ids, _) = tokenize("a purple suv", &vocab, 16);
        assert_eq!(ids[1], UNK_TOKEN_ID);
    }

    #[test]
    fn tokenization_is_case_insensitive() {
        let vocab = Vocab::build(["red"]);
        let (a, _) = tokenize("Red", &vocab, 4);
        let (b, _) = tokenize("red", &vocab, 4);
        assert_eq!(a, b);
    }

    #[test]
    fn punctuation_splits_words() {
        let vocab = Vocab::build(["a red sedan turns left"]);
        let (ids, _) = tokenize("A red sedan, turns left.", &vocab, 16);
        assert_eq!(ids.len(), 5);
        assert!(ids.iter().all(|&id| id != UNK_TOKEN_ID));
    }

    #[test]
    fn overlong_sequence_truncates_with_flag() {
        let vocab = Vocab::build(["a b c d e"]);
        let (ids, truncated) = tokenize("a b c d e", &vocab, 3);
        assert_eq!(ids.len(), 3);
        assert!(truncated);
    }

    #[test]
    fn ids_are_reversible_up_to_normalization() {
        let vocab = Vocab::build(["A red SUV goes straight"]);
        let (ids, _) = tokenize("A red SUV goes straight", &vocab, 16);
        let back: Vec<&str> = ids.iter().map(|&i| vocab.word_of(i).unwrap()).collect();
        assert_eq!(back, vec!["a", "red", "suv", "goes", "straight"]);
    }
}
