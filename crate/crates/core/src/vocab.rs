//! Token alphabet and token sequences.
//!
//! The default vocabulary is byte-level: every byte is its own token id, so
//! `V = 256`. A compact alphabet can be supplied instead, in which case the id
//! of a byte is its index in the alphabet. Small synthetic tasks use this to
//! keep `V` tiny while the on-disk text stays readable.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Self {
        TokenSeq(tokens)
    }

    pub fn into_inner(self) -> Vec<u32> {
        self.0
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t as usize >= vocab) {
            Some(&token) => Err(Error::TokenOutOfRange { token, vocab }),
            None => Ok(()),
        }
    }
}

impl Deref for TokenSeq {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(v: Vec<u32>) -> Self {
        TokenSeq(v)
    }
}

impl From<&[u32]> for TokenSeq {
    fn from(v: &[u32]) -> Self {
        TokenSeq(v.to_vec())
    }
}

impl FromIterator<u32> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = u32>>(iter: I) -> Self {
        TokenSeq(iter.into_iter().collect())
    }
}

/// Byte-level encoding: one token per byte.
pub fn encode(text: &[u8]) -> TokenSeq {
    text.iter().map(|&b| u32::from(b)).collect()
}

/// Inverse of [`encode`]. Ids above 255 are truncated, which cannot happen
/// for sequences produced by `encode`.
pub fn decode(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().map(|&t| t as u8).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Vocabulary {
    /// `None` means byte-level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alphabet: Option<Vec<u8>>,
}

impl Vocabulary {
    pub fn byte_level() -> Self {
        Vocabulary { alphabet: None }
    }

    /// A vocabulary of the distinct bytes of `alphabet`, in order.
    pub fn from_alphabet(alphabet: &[u8]) -> Result<Self> {
        if alphabet.is_empty() {
            return Err(Error::InvalidConfig("alphabet is empty".into()));
        }
        let mut seen = [false; 256];
        for &b in alphabet {
            if std::mem::replace(&mut seen[b as usize], true) {
                return Err(Error::InvalidConfig(format!(
                    "alphabet repeats byte {b:#04x}"
                )));
            }
        }
        Ok(Vocabulary {
            alphabet: Some(alphabet.to_vec()),
        })
    }

    pub fn size(&self) -> usize {
        self.alphabet.as_ref().map_or(256, Vec::len)
    }

    pub fn is_byte_level(&self) -> bool {
        self.alphabet.is_none()
    }

    pub fn alphabet(&self) -> Option<&[u8]> {
        self.alphabet.as_deref()
    }

    pub fn encode(&self, text: &[u8]) -> Result<TokenSeq> {
        match &self.alphabet {
            None => Ok(encode(text)),
            Some(alpha) => text
                .iter()
                .map(|&byte| {
                    alpha
                        .iter()
                        .position(|&a| a == byte)
                        .map(|i| i as u32)
                        .ok_or(Error::UnknownByte { byte })
                })
                .collect::<Result<Vec<_>>>()
                .map(TokenSeq),
        }
    }

    pub fn decode(&self, tokens: &[u32]) -> Result<Vec<u8>> {
        let vocab = self.size();
        tokens
            .iter()
            .map(|&t| match &self.alphabet {
                _ if t as usize >= vocab => Err(Error::TokenOutOfRange { token: t, vocab }),
                None => Ok(t as u8),
                Some(alpha) => Ok(alpha[t as usize]),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_is_byte_identity() {
        assert_eq!(encode(b"AB").as_slice(), &[65, 66]);
        assert!(encode(b"").is_empty());
    }

    #[test]
    fn alphabet_vocabulary() {
        let v = Vocabulary::from_alphabet(b"abAB").unwrap();
        assert_eq!(v.size(), 4);
        assert_eq!(v.encode(b"aBb").unwrap().as_slice(), &[0, 3, 1]);
        assert_eq!(v.decode(&[2, 0]).unwrap(), b"Aa");
        assert!(matches!(
            v.encode(b"z"),
            Err(Error::UnknownByte { byte: b'z' })
        ));
        assert!(v.decode(&[4]).is_err());
        assert!(Vocabulary::from_alphabet(b"aa").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let toks = encode(&bytes);
            prop_assert!(toks.iter().all(|&t| t < 256));
            prop_assert_eq!(decode(&toks), bytes.clone());
            let v = Vocabulary::byte_level();
            prop_assert_eq!(v.decode(&v.encode(&bytes).unwrap()).unwrap(), bytes);
        }
    }
}
