//! Word-level tokenizer over a closed vocabulary.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP_USR: TokenId = 3;
pub const SEP_SYS: TokenId = 4;
pub const SEP_KNOW: TokenId = 5;
pub const UNK: TokenId = 6;

const SPECIALS: [&str; 7] = ["<pad>", "<bos>", "<eos>", "<usr>", "<sys>", "<know>", "<unk>"];
const PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '(', ')', '"'];

/// Lowercases, splits on whitespace, and detaches punctuation into its own
/// tokens.
pub fn normalize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Tokenizer {
    /// Specials followed by the sorted, deduplicated normalized words of `texts`.
    pub fn from_texts<'t>(texts: impl IntoIterator<Item = &'t str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(normalize).collect();
        Self::from_vocab(SPECIALS.iter().map(|s| s.to_string()).chain(words).collect())
            .expect("specials are distinct from normalized words")
    }

    /// Rebuilds a tokenizer from a full vocabulary list (specials first).
    pub fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        if vocab.len() < SPECIALS.len() || vocab[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Config("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self { vocab, index })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        normalize(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.vocab.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// Whitespace join of the non-special tokens.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| !Self::is_special(id))
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn punctuation_is_split() {
        assert_eq!(normalize("Hi, Bob!"), ["hi", ",", "bob", "!"]);
        assert_eq!(normalize("  32 C. "), ["32", "c", "."]);
    }

    #[test]
    fn round_trip_modulo_normalization() {
        let tok = Tokenizer::from_texts(["the weather is sunny .", "hello there"]);
        let ids = tok.encode("The weather is Sunny.");
        assert_eq!(tok.decode(&ids), "the weather is sunny .");
        assert_eq!(tok.encode("zebra"), vec![UNK]);
    }

    #[test]
    fn specials_have_fixed_ids() {
        let tok = Tokenizer::from_texts(["a"]);
        assert_eq!(tok.token(SEP_KNOW), "<know>");
        assert_eq!(tok.id("a"), Some(7));
        assert!(Tokenizer::from_vocab(vec!["a".into()]).is_err());
    }
}
