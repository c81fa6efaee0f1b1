use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::TextExample;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;

const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && ch != '_') {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Word-level vocabulary. Ids 0..4 are the special tokens; the rest are
/// ordered by descending train frequency, ties broken alphabetically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn build<'a>(examples: impl IntoIterator<Item = &'a TextExample>) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for ex in examples {
            let b = ex.text_b.as_deref().unwrap_or("");
            for w in split_words(&ex.text_a).into_iter().chain(split_words(b)) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its token list, e.g. after deserializing.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// `[CLS] a… ([SEP] b…)`, truncated to `max_len` ids. The CLS id is
    /// always kept.
    pub fn tokenize(&self, text_a: &str, text_b: Option<&str>, max_len: usize) -> Vec<usize> {
        let mut ids = vec![CLS];
        ids.extend(split_words(text_a).iter().map(|w| self.id(w)));
        if let Some(b) = text_b {
            ids.push(SEP);
            ids.extend(split_words(b).iter().map(|w| self.id(w)));
        }
        ids.truncate(max_len.max(1));
        ids
    }

    /// Space-joined words of `ids`, skipping CLS and padding.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != CLS && i != PAD)
            .map(|&i| self.tokens.get(i).map(String::as_str).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(texts: &[&str]) -> Vocab {
        let ex: Vec<_> = texts
            .iter()
            .map(|t| TextExample {
                text_a: t.to_string(),
                text_b: None,
                label: 0,
            })
            .collect();
        Vocab::build(&ex)
    }

    #[test]
    fn splitting_lowercases_and_isolates_punctuation() {
        assert_eq!(split_words("Hello, World!"), ["hello", ",", "world", "!"]);
        assert_eq!(split_words("  a\tb\n"), ["a", "b"]);
        assert!(split_words("").is_empty());
    }

    #[test]
    fn empty_text_is_cls_only() {
        let v = vocab(&["a b"]);
        assert_eq!(v.tokenize("", None, 16), vec![CLS]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = vocab(&["a b"]);
        assert_eq!(v.tokenize("a zebra", None, 16), vec![CLS, v.id("a"), UNK]);
    }

    #[test]
    fn truncation_keeps_cls() {
        let v = vocab(&["a b c d"]);
        assert_eq!(v.tokenize("a b c d", None, 3).len(), 3);
        assert_eq!(v.tokenize("a b c d", None, 0), vec![CLS]);
    }

    #[test]
    fn pairs_are_separated() {
        let v = vocab(&["a b"]);
        assert_eq!(
            v.tokenize("a", Some("b"), 8),
            vec![CLS, v.id("a"), SEP, v.id("b")]
        );
    }

    #[test]
    fn frequency_order_with_alphabetical_ties() {
        let v = vocab(&["b a b", "c a b"]);
        assert_eq!(&v.tokens()[4..], ["b", "a", "c"]);
    }

    #[test]
    fn round_trip_through_detokenize() {
        let v = vocab(&["the cat sat", "on the mat ."]);
        for text in ["the cat sat on the mat .", "mat cat", ""] {
            let ids = v.tokenize(text, None, 32);
            assert_eq!(v.tokenize(&v.detokenize(&ids), None, 32), ids);
        }
    }
}
