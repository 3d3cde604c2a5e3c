use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::SpecialIds;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const INST: &str = "[INST]";
pub const INST_END: &str = "[/INST]";
pub const IMG_START: &str = "<img>";
pub const IMG_END: &str = "</img>";

const SPECIALS: [&str; 8] = [PAD, UNK, BOS, EOS, INST, INST_END, IMG_START, IMG_END];
const PUNCT: [char; 4] = ['?', ',', '.', ':'];

/// Word-level tokenizer over a closed vocabulary. Punctuation marks are
/// separate tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Specials first (in a fixed order), then `words` in the given order.
    /// Duplicates are ignored.
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = vocab.iter().cloned().zip(0..).collect();
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Contract(format!("invalid vocabulary word {w:?}")));
            }
            if !index.contains_key(w) {
                index.insert(w.to_string(), vocab.len());
                vocab.push(w.to_string());
            }
        }
        Ok(Self { vocab, index })
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        SpecialIds {
            pad: 0,
            unk: 1,
            bos: 2,
            eos: 3,
            inst: 4,
            inst_end: 5,
            img_start: 6,
            img_end: 7,
        }
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        self.vocab.get(id).map_or(UNK, String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.vocab
    }

    fn pieces(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for raw in text.split_whitespace() {
            let mut cur = String::new();
            for ch in raw.chars() {
                if PUNCT.contains(&ch) && !raw.starts_with('[') && !raw.starts_with('<') {
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
        }
        out
    }

    /// Ids for `text`; out-of-vocabulary words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        Self::pieces(text)
            .iter()
            .map(|p| self.id(p).unwrap_or(self.specials().unk))
            .collect()
    }

    /// Like [`encode`](Self::encode) but rejects unknown words.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<usize>> {
        Self::pieces(text)
            .iter()
            .map(|p| {
                self.id(p)
                    .ok_or_else(|| Error::Contract(format!("word {p:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn unknown_count(&self, text: &str) -> usize {
        Self::pieces(text).iter().filter(|p| self.id(p).is_none()).count()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tok() -> Tokenizer {
        Tokenizer::new(["what", "color", "is", "blippo", "?", "it", "blue"]).unwrap()
    }

    #[test]
    fn punctuation_splits_off() {
        let t = tok();
        assert_eq!(t.decode(&t.encode("What color is blippo?")), "<unk> color is blippo ?");
        assert_eq!(t.encode("what color is blippo?"), t.encode("what color is blippo ?"));
    }

    #[test]
    fn specials_are_fixed() {
        let t = tok();
        let sp = t.specials();
        assert_eq!(t.id(EOS), Some(sp.eos));
        assert_eq!(t.id(INST_END), Some(sp.inst_end));
        assert_eq!(t.id(IMG_START), Some(sp.img_start));
        assert_eq!(t.encode("[INST] what [/INST] </s>"), vec![sp.inst, 8, sp.inst_end, sp.eos]);
    }

    #[test]
    fn strict_encoding_rejects_unknown_words() {
        let t = tok();
        assert!(t.encode_strict("what is zorbak").is_err());
        assert_eq!(t.unknown_count("what is zorbak"), 1);
    }

    #[test]
    fn invalid_words_are_rejected() {
        assert!(Tokenizer::new(["two words"]).is_err());
        assert!(Tokenizer::new([""]).is_err());
    }

    proptest! {
        #[test]
        fn decode_then_encode_is_identity(ids in proptest::collection::vec(0usize..15, 0..30)) {
            let t = tok();
            prop_assert_eq!(t.encode(&t.decode(&ids)), ids);
        }
    }
}
