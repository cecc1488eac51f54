//! Response filtering applied to every outgoing reply.

use std::collections::BTreeSet;
use std::path::Path;

use adapterbot::tokenizer::normalize;

/// Decides whether a generated reply may be shown.
pub trait ResponseFilter: Send + Sync {
    fn blocked(&self, text: &str) -> bool;
}

impl<F: Fn(&str) -> bool + Send + Sync> ResponseFilter for F {
    fn blocked(&self, text: &str) -> bool {
        self(text)
    }
}

/// Blocks any reply containing a listed word or phrase (matched on
/// normalized token boundaries, case-insensitive).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BlockList {
    phrases: BTreeSet<Vec<String>>,
}

impl BlockList {
    pub fn new<S: AsRef<str>>(terms: impl IntoIterator<Item = S>) -> Self {
        Self {
            phrases: terms
                .into_iter()
                .map(|t| normalize(t.as_ref()))
                .filter(|t| !t.is_empty())
                .collect(),
        }
    }

    /// One term per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Self {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }
}

impl ResponseFilter for BlockList {
    fn blocked(&self, text: &str) -> bool {
        let toks = normalize(text);
        self.phrases
            .iter()
            .any(|p| toks.windows(p.len()).any(|w| w == p.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_whole_tokens_only() {
        let b = BlockList::parse("# comment\nhate\n\nbad word\n");
        assert_eq!(b.len(), 2);
        assert!(b.blocked("I HATE it!"));
        assert!(b.blocked("a bad word here"));
        assert!(!b.blocked("whatever"));
        assert!(!b.blocked("bad, word"));
        assert!(!BlockList::default().blocked("anything"));
    }
}
