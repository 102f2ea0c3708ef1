use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::dataset::VideoRecord;
use crate::error::{DvcError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercase, then split on whitespace; every other non-alphanumeric
/// character becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            current.push(ch);
            continue;
        }
        if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

/// Caption vocabulary. Indices 0..4 are always pad, begin, end, unknown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TextVocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for TextVocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<TextVocabulary> for Vec<String> {
    fn from(v: TextVocabulary) -> Self {
        v.tokens
    }
}

impl TextVocabulary {
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, idx: usize) -> Option<&str> {
        self.tokens.get(idx).map(String::as_str)
    }

    /// Token ids without begin/end markers; unknown words map to `UNK`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.index_of(t.as_ref()).unwrap_or(UNK)).collect()
    }

    /// Words up to the first end token; pad and begin markers are skipped.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }
}

/// Vocabulary of caption tokens with corpus frequency ≥ `min_freq`, ordered by
/// frequency (descending) then lexicographically.
pub fn build_text_vocabulary(records: &[VideoRecord], min_freq: usize) -> Result<TextVocabulary> {
    if min_freq == 0 {
        return Err(DvcError::InvalidArgument("minFreq must be ≥ 1".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for ev in records.iter().flat_map(|r| &r.events) {
        for tok in &ev.caption {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(DvcError::Vocabulary("empty caption corpus".into()));
    }
    let mut words: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Ok(TextVocabulary::from_words(words.into_iter().map(|(w, _)| w.to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::{GroundTruthEvent, TimeStamp};
    use proptest::prelude::*;

    fn corpus(sentences: &[&str]) -> Vec<VideoRecord> {
        let events = sentences
            .iter()
            .map(|s| GroundTruthEvent {
                timestamp: TimeStamp { start: 0.0, end: 1.0 },
                caption: tokenize(s),
                labels: Default::default(),
            })
            .collect();
        vec![VideoRecord::new("v".into(), 10.0, vec![], vec![], events)]
    }

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("Apply Lipstick, then blush."), ["apply", "lipstick", ",", "then", "blush", "."]);
        assert_eq!(tokenize("  "), Vec::<String>::new());
    }

    #[test]
    fn vocabulary_counts_and_threshold() {
        let recs = corpus(&["apply lipstick", "apply blush"]);
        let v = build_text_vocabulary(&recs, 1).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.token(4), Some("apply"));
        assert_eq!(v.token(5), Some("blush"));
        assert_eq!(v.token(6), Some("lipstick"));

        let v2 = build_text_vocabulary(&recs, 2).unwrap();
        assert_eq!(v2.len(), 5);
        assert_eq!(v2.token(4), Some("apply"));

        assert!(build_text_vocabulary(&recs, 0).is_err());
        assert!(build_text_vocabulary(&corpus(&[]), 1).is_err());
    }

    #[test]
    fn reserved_indices_are_fixed() {
        let v = TextVocabulary::from_words(vec!["a".into()]);
        assert_eq!(v.index_of("<pad>"), Some(PAD));
        assert_eq!(v.index_of("<bos>"), Some(BOS));
        assert_eq!(v.index_of("<eos>"), Some(EOS));
        assert_eq!(v.index_of("<unk>"), Some(UNK));
        assert_eq!(v.encode(&["a", "zzz"]), vec![4, UNK]);
        assert_eq!(v.decode(&[BOS, 4, EOS, 4]), vec!["a".to_string()]);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<TextVocabulary>(&json).unwrap(), v);
    }

    proptest! {
        #[test]
        fn tokenize_detokenize_identity(words in prop::collection::vec("[a-z0-9]{1,6}|[.,!?;]", 1..10)) {
            let text = words.join(" ");
            prop_assert_eq!(detokenize(&tokenize(&text)), text);
        }
    }
}
