use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const EOC_WORD: &str = "<eoc>";
pub const UNK_WORD: &str = "<unk>";

/// Lowercases and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// Word ↔ index dictionary with reserved end-of-caption and unknown entries.
///
/// Index 0 is EOC, index 1 is UNK, then retained corpus words by descending
/// frequency, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabWire", into = "VocabWire")]
pub struct Vocabulary {
    word_to_index: HashMap<String, usize>,
    index_to_word: Vec<String>,
    eoc_index: usize,
    unk_index: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabWire {
    words: Vec<String>,
}

impl From<VocabWire> for Vocabulary {
    fn from(w: VocabWire) -> Self {
        Vocabulary::from_words(w.words.into_iter().filter(|w| w != EOC_WORD && w != UNK_WORD))
    }
}

impl From<Vocabulary> for VocabWire {
    fn from(v: Vocabulary) -> Self {
        VocabWire { words: v.index_to_word }
    }
}

impl Vocabulary {
    fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut index_to_word = vec![EOC_WORD.to_string(), UNK_WORD.to_string()];
        index_to_word.extend(words);
        let word_to_index = index_to_word.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { word_to_index, index_to_word, eoc_index: 0, unk_index: 1 }
    }

    pub fn len(&self) -> usize {
        self.index_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eoc_index(&self) -> usize {
        self.eoc_index
    }

    pub fn unk_index(&self) -> usize {
        self.unk_index
    }

    pub fn index(&self, word: &str) -> Option<usize> {
        self.word_to_index.get(word).copied()
    }

    pub fn index_or_unk(&self, word: &str) -> usize {
        self.index(word).unwrap_or(self.unk_index)
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.index_to_word.get(index).map(|s| s.as_str())
    }

    pub fn words(&self) -> &[String] {
        &self.index_to_word
    }
}

/// Keeps every word seen at least `min_count` times (`min_count` ≥ 1).
pub fn build_vocabulary<S: AsRef<str>>(captions: &[Vec<S>], min_count: usize) -> Vocabulary {
    let min_count = min_count.max(1);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for cap in captions {
        for w in cap {
            let w = w.as_ref();
            if w == EOC_WORD || w == UNK_WORD {
                continue;
            }
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocabulary::from_words(kept.into_iter().map(|(w, _)| w.to_string()))
}

/// A caption as exactly `n_steps` token ids, EOC padded.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenizedCaption {
    pub token_ids: Vec<usize>,
}

impl TokenizedCaption {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// True when every id after the first EOC is also EOC.
    pub fn is_well_formed(&self, vocab: &Vocabulary) -> bool {
        let eoc = vocab.eoc_index();
        let mut seen = false;
        self.token_ids.iter().all(|&t| {
            if t >= vocab.len() {
                return false;
            }
            if seen && t != eoc {
                return false;
            }
            seen |= t == eoc;
            true
        })
    }
}

/// Truncates to `n_steps` words, maps unknown words to UNK and pads with EOC.
pub fn encode_caption<S: AsRef<str>>(words: &[S], vocab: &Vocabulary, n_steps: usize) -> TokenizedCaption {
    let n_steps = n_steps.max(1);
    let mut ids: Vec<usize> = words.iter().take(n_steps).map(|w| vocab.index_or_unk(w.as_ref())).collect();
    ids.resize(n_steps, vocab.eoc_index());
    TokenizedCaption { token_ids: ids }
}

/// Words up to (excluding) the first EOC.
pub fn decode_caption(ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .take_while(|&&t| t != vocab.eoc_index())
        .map(|&t| vocab.word(t).unwrap_or(UNK_WORD).to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn caps(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| tokenize(l)).collect()
    }

    #[test]
    fn empty_corpus_has_only_reserved_words() {
        let v = build_vocabulary::<String>(&[], 2);
        assert_eq!(v.len(), 2);
        assert_eq!(v.word(v.eoc_index()), Some(EOC_WORD));
        assert_eq!(v.word(v.unk_index()), Some(UNK_WORD));
    }

    #[test]
    fn toy_corpus_min_count_two() {
        let corpus = caps(&["a red dog", "a red cat"]);
        // frequency oracle
        let mut freq: HashMap<String, usize> = HashMap::new();
        for w in corpus.iter().flatten() {
            *freq.entry(w.clone()).or_default() += 1;
        }
        let expected: usize = freq.values().filter(|&&c| c >= 2).count() + 2;
        let v = build_vocabulary(&corpus, 2);
        assert_eq!(v.len(), expected);
        assert_eq!(v.len(), 4);
        assert!(v.index("a").is_some() && v.index("red").is_some());
        assert!(v.index("dog").is_none());
        // ties by frequency break lexicographically
        assert_eq!(v.word(2), Some("a"));
        assert_eq!(v.word(3), Some("red"));
    }

    #[test]
    fn encode_truncates_and_pads() {
        let corpus = caps(&["one two three four five six seven eight"; 2]);
        let v = build_vocabulary(&corpus, 1);
        let long = encode_caption(&corpus[0], &v, 6);
        assert_eq!(long.token_ids.len(), 6);
        assert_eq!(decode_caption(&long.token_ids, &v), corpus[0][..6].to_vec());

        let short = encode_caption(&corpus[0][..4], &v, 6);
        assert_eq!(&short.token_ids[4..], &[v.eoc_index(), v.eoc_index()]);

        let unk = encode_caption(&["zzz-unseen"], &v, 6);
        assert_eq!(unk.token_ids, vec![v.unk_index(), 0, 0, 0, 0, 0]);
        assert!(unk.is_well_formed(&v));
    }

    #[test]
    fn tokenizer_lowercases() {
        assert_eq!(tokenize("  A Red\tDog "), vec!["a", "red", "dog"]);
    }

    #[test]
    fn serde_round_trip() {
        let v = build_vocabulary(&caps(&["b a c a"]), 1);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
    }

    proptest! {
        #[test]
        fn permutation_invariant(mut lines in prop::collection::vec("[a-e]{1,2}( [a-e]{1,2}){0,4}", 0..12), k in 1usize..3) {
            let a = build_vocabulary(&caps(&lines.iter().map(|s| s.as_str()).collect::<Vec<_>>()), k);
            lines.reverse();
            let b = build_vocabulary(&caps(&lines.iter().map(|s| s.as_str()).collect::<Vec<_>>()), k);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn decode_encode_round_trip(words in prop::collection::vec("[a-f]{1,3}", 0..10), n in 1usize..8) {
            let v = build_vocabulary(&[words.clone()], 1);
            let enc = encode_caption(&words, &v, n);
            prop_assert!(enc.is_well_formed(&v));
            prop_assert_eq!(decode_caption(&enc.token_ids, &v), words[..words.len().min(n)].to_vec());
        }
    }
}
