//! Byte-level tokenizer: token id = UTF-8 byte value.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Encodes and checks every id against `vocab_size`.
    pub fn encode_checked(&self, text: &str, vocab_size: usize) -> Result<Vec<u32>> {
        let ids = self.encode(text);
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab_size });
        }
        Ok(ids)
    }

    /// Ids above 255 have no byte and decode to U+FFFD, as do invalid sequences.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::with_capacity(ids.len());
        let mut out = String::new();
        for &id in ids {
            match u8::try_from(id) {
                Ok(b) => bytes.push(b),
                Err(_) => {
                    out.push_str(&String::from_utf8_lossy(&bytes));
                    bytes.clear();
                    out.push(char::REPLACEMENT_CHARACTER);
                }
            }
        }
        out.push_str(&String::from_utf8_lossy(&bytes));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_utf8() {
        let t = ByteTokenizer;
        let s = "Réponds en français. 你好";
        assert_eq!(t.decode(&t.encode(s)), s);
    }

    #[test]
    fn concatenation_is_additive() {
        let t = ByteTokenizer;
        let mut joined = t.encode("Answer in French. ");
        joined.extend(t.encode("Hello"));
        assert_eq!(joined, t.encode("Answer in French. Hello"));
    }

    #[test]
    fn checked_encoding_respects_small_vocab() {
        assert!(ByteTokenizer.encode_checked("a", 64).is_err());
        assert!(ByteTokenizer.encode_checked("a", 128).is_ok());
    }
}
