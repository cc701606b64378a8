use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const BLANK: TokenId = 0;
pub const SOS: TokenId = 1;
pub const EOS: TokenId = 2;
const RESERVED: [&str; 3] = ["<blank>", "<sos>", "<eos>"];

/// Character vocabulary with reserved `<blank>`, `<sos>` and `<eos>` at
/// indices 0, 1 and 2. Every network head in the crate emits a distribution
/// over all indices; the reserved ones that are never targets simply learn
/// to carry no mass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, TokenId>,
}

impl Vocabulary {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let chars: Vec<char> = chars.into_iter().collect();
        if chars.is_empty() {
            return Err(Error::Vocabulary("alphabet is empty".into()));
        }
        let mut index = HashMap::new();
        for (i, &c) in chars.iter().enumerate() {
            if c == '\n' || c == '\t' || c == '\r' {
                return Err(Error::Vocabulary(format!("control character {c:?} in alphabet")));
            }
            if index.insert(c, i + RESERVED.len()).is_some() {
                return Err(Error::Vocabulary(format!("duplicate character {c:?}")));
            }
        }
        Ok(Vocabulary { chars, index })
    }

    pub fn len(&self) -> usize {
        self.chars.len() + RESERVED.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn alphabet(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn is_char(&self, id: TokenId) -> bool {
        id >= RESERVED.len() && id < self.len()
    }

    /// Tokens a decoder may emit: every character, then `<eos>`.
    pub fn emittable(&self) -> impl Iterator<Item = TokenId> {
        (RESERVED.len()..self.len()).chain(std::iter::once(EOS))
    }

    pub fn id(&self, c: char) -> Option<TokenId> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| Error::Vocabulary(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    /// Characters of `ids`; reserved symbols are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&i| self.is_char(i))
            .map(|&i| self.chars[i - RESERVED.len()])
            .collect()
    }

    pub fn symbol(&self, id: TokenId) -> String {
        match id {
            i if i < RESERVED.len() => RESERVED[i].to_string(),
            i if i < self.len() => self.chars[i - RESERVED.len()].to_string(),
            _ => "<unk>".into(),
        }
    }

    pub fn check(&self, id: TokenId) -> Result<()> {
        if id < self.len() {
            Ok(())
        } else {
            Err(Error::Vocabulary(format!("token id {id} outside vocabulary of {}", self.len())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_indices_and_reserved() {
        let v = Vocabulary::new("ab ".chars()).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.encode("ba b").unwrap(), vec![4, 3, 5, 4]);
        assert_eq!(v.symbol(BLANK), "<blank>");
        assert_eq!(v.emittable().collect::<Vec<_>>(), vec![3, 4, 5, EOS]);
        assert!(!v.emittable().any(|t| t == BLANK));
    }

    #[test]
    fn oov_and_duplicates() {
        let v = Vocabulary::new("ab".chars()).unwrap();
        assert!(matches!(v.encode("abc"), Err(Error::Vocabulary(_))));
        assert!(Vocabulary::new("aa".chars()).is_err());
        assert!(v.check(5).is_err());
    }

    proptest::proptest! {
        #[test]
        fn encode_decode_identity(s in "[abc d]{0,30}") {
            let v = Vocabulary::new("abcd ".chars()).unwrap();
            proptest::prop_assert_eq!(v.decode(&v.encode(&s).unwrap()), s);
        }
    }
}
