use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{tokenize, Sample};
use crate::error::{Error, Result};
use crate::model::{TokenSequence, END, N_SPECIALS, PAD, START, UNK};

const SPECIAL_NAMES: [&str; N_SPECIALS] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Token ↔ index maps. Indices 0..4 are the specials pad, start, end, unk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabRepr {
    min_freq: usize,
    words: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        Vocabulary::from_words(r.words, r.min_freq)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            min_freq: v.min_freq,
            words: v.words[N_SPECIALS..].to_vec(),
        }
    }
}

impl Vocabulary {
    /// Index every token whose corpus frequency reaches `min_freq`, ordered by
    /// descending frequency then lexicographically.
    pub fn build<'a, I>(questions: I, min_freq: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for q in questions {
            for tok in tokenize(q) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, n)| *n >= min_freq.max(1)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_words(kept.into_iter().map(|(w, _)| w).collect(), min_freq).expect("tokens are unique")
    }

    pub fn from_samples(samples: &[Sample], min_freq: usize) -> Self {
        Self::build(samples.iter().map(|s| s.question.as_str()), min_freq)
    }

    /// From an explicit list of non-special words, in index order.
    pub fn from_words(words: Vec<String>, min_freq: usize) -> Result<Self> {
        let mut all: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        for (i, s) in SPECIAL_NAMES.iter().enumerate() {
            index.insert(s.to_string(), i);
        }
        for w in words {
            if index.contains_key(&w) {
                return Err(Error::Config(format!("duplicate vocabulary entry `{w}`")));
            }
            index.insert(w.clone(), all.len());
            all.push(w);
        }
        Ok(Self {
            words: all,
            index,
            min_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() == N_SPECIALS
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    /// Non-special words in index order.
    pub fn words(&self) -> &[String] {
        &self.words[N_SPECIALS..]
    }

    pub fn index_of(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }

    /// `[start, words…, end]`, with out-of-vocabulary words mapped to unk and
    /// the body truncated so the whole sequence fits in `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        let words = tokenize(text);
        if words.is_empty() {
            return Err(Error::Domain(format!("question `{text}` has no words")));
        }
        if max_len < 3 {
            return Err(Error::Domain("max_len must be at least 3".into()));
        }
        let mut tokens = Vec::with_capacity(words.len().min(max_len - 2) + 2);
        tokens.push(START);
        tokens.extend(words.iter().take(max_len - 2).map(|w| self.index_of(w)));
        tokens.push(END);
        TokenSequence::new(tokens, self.len())
    }

    /// Words of the sequence, specials other than unk dropped.
    pub fn decode(&self, seq: &TokenSequence) -> String {
        seq.tokens()
            .iter()
            .filter(|&&t| t != PAD && t != START && t != END)
            .map(|&t| self.words.get(t).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn min_freq_filters() {
        let v = Vocabulary::build(["what is it", "what is that"], 2);
        let mut words = v.words().to_vec();
        words.sort();
        assert_eq!(words, vec!["is", "what"]);
        let all = Vocabulary::build(["what is it", "what is that"], 1);
        assert_eq!(all.words().len(), 4);
        assert_eq!(v.index_of("that"), UNK);
    }

    #[test]
    fn specials_fixed() {
        let v = Vocabulary::build(["a b"], 1);
        assert_eq!(v.word(PAD), Some("<pad>"));
        assert_eq!(v.word(START), Some("<start>"));
        assert_eq!(v.word(END), Some("<end>"));
        assert_eq!(v.word(UNK), Some("<unk>"));
    }

    #[test]
    fn truncation_respects_max_len() {
        let v = Vocabulary::build(["a b c d e f"], 1);
        let s = v.encode("a b c d e f", 5).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.ends_with_end_marker());
        assert!(v.encode("?!", 5).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::build(["what color is the cat", "what is it"], 1);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }

    proptest! {
        #[test]
        fn encode_decode_identity(words in proptest::collection::vec("[a-z]{1,6}", 1..10)) {
            let text = words.join(" ");
            let v = Vocabulary::build([text.as_str()], 1);
            let seq = v.encode(&text, 64).unwrap();
            prop_assert_eq!(v.decode(&seq), text);
        }
    }
}
