use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: usize = 0;
/// Terminal position; the text encoder reads its class feature here.
pub const EOT: usize = 1;

const ALPHABET: &str = " abcdefghijklmnopqrstuvwxyz0123456789-_.,'";

/// Token ids for one text, always ending in [`EOT`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Character-level tokenizer. Characters outside the alphabet map to
/// [`UNK`]; they are never dropped.
#[derive(Clone, Debug)]
pub struct CharTokenizer {
    max_len: usize,
}

impl CharTokenizer {
    pub fn new(max_len: usize) -> Self {
        Self { max_len }
    }

    pub fn vocab_size() -> usize {
        2 + ALPHABET.chars().count()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn token(c: char) -> usize {
        ALPHABET.chars().position(|a| a == c).map_or(UNK, |p| p + 2)
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let mut ids: Vec<usize> = text.chars().map(Self::token).collect();
        ids.push(EOT);
        if ids.len() > self.max_len {
            return Err(Error::TextTooLong {
                len: ids.len(),
                max: self.max_len,
            });
        }
        Ok(TokenSequence(ids))
    }
}

pub const CLS_PLACEHOLDER: &str = "[CLS]";

/// One token sequence per class name, built by substituting each name into
/// `template` at its single `[CLS]` placeholder.
pub fn encode_class_names<S: AsRef<str>>(
    names: &[S],
    template: &str,
    tokenizer: &CharTokenizer,
) -> Result<Vec<TokenSequence>> {
    let holes = template.matches(CLS_PLACEHOLDER).count();
    if holes != 1 {
        return Err(Error::Template(holes));
    }
    names
        .iter()
        .map(|n| tokenizer.encode(&template.replace(CLS_PLACEHOLDER, n.as_ref())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_substitution() {
        let tok = CharTokenizer::new(32);
        let seqs = encode_class_names(&["cat"], "a photo of a [CLS]", &tok).unwrap();
        assert_eq!(seqs[0], tok.encode("a photo of a cat").unwrap());
        assert_eq!(seqs[0].len(), "a photo of a cat".len() + 1);
        assert_eq!(*seqs[0].ids().last().unwrap(), EOT);
    }

    #[test]
    fn one_sequence_per_class_and_duplicates_agree() {
        let tok = CharTokenizer::new(16);
        let seqs = encode_class_names(&["red row", "blu dot", "red row"], "[CLS]", &tok).unwrap();
        assert_eq!(seqs.len(), 3);
        assert_eq!(seqs[0], seqs[2]);
        assert_ne!(seqs[0], seqs[1]);
    }

    #[test]
    fn unknown_characters_become_unk() {
        let tok = CharTokenizer::new(16);
        let s = tok.encode("C@t").unwrap();
        assert_eq!(s.ids(), &[UNK, UNK, CharTokenizer::token('t'), EOT]);
    }

    #[test]
    fn template_needs_exactly_one_placeholder() {
        let tok = CharTokenizer::new(16);
        assert!(matches!(
            encode_class_names(&["x"], "no hole", &tok),
            Err(Error::Template(0))
        ));
        assert!(matches!(
            encode_class_names(&["x"], "[CLS] [CLS]", &tok),
            Err(Error::Template(2))
        ));
    }

    #[test]
    fn overlong_text_is_rejected() {
        let tok = CharTokenizer::new(8);
        assert!(tok.encode("red row").is_ok());
        assert!(matches!(
            tok.encode("red rows"),
            Err(Error::TextTooLong { len: 9, max: 8 })
        ));
    }

    #[test]
    fn vocab_fits_default_config() {
        assert!(CharTokenizer::vocab_size() <= 64);
    }
}
