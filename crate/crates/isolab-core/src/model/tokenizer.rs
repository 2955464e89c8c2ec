use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Id reserved for empty input.
pub const UNK: u32 = 0;

/// Whitespace tokenizer that hashes each token into a fixed bucket range.
///
/// The bucket of a token is `1 + fnv1a64(token) mod (vocab_size − 1)`, where
/// `fnv1a64` is 64-bit FNV-1a over the UTF-8 bytes (after lowercasing when
/// enabled). Bucket 0 is [`UNK`], produced only for utterances without
/// any token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tokenizer {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_lowercase")]
    pub lowercase: bool,
}

fn default_vocab() -> usize {
    4096
}

fn default_lowercase() -> bool {
    true
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer {
            vocab_size: default_vocab(),
            lowercase: default_lowercase(),
        }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Tokenizer {
    pub fn token_id(&self, token: &str) -> u32 {
        let buckets = (self.vocab_size.max(2) - 1) as u64;
        let h = if self.lowercase {
            let lower: String = token.to_lowercase();
            fnv1a64(lower.as_bytes())
        } else {
            fnv1a64(token.as_bytes())
        };
        (1 + h % buckets) as u32
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let ids: Vec<u32> = text.split_whitespace().map(|t| self.token_id(t)).collect();
        if ids.is_empty() {
            vec![UNK]
        } else {
            ids
        }
    }

    pub fn encode_batch<S: AsRef<str>>(&self, texts: &[S]) -> Vec<Vec<u32>> {
        texts.iter().map(|t| self.encode(t.as_ref())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_ids_in_range() {
        let tok = Tokenizer::default();
        let a = tok.encode("Book a flight to Paris");
        assert_eq!(a, tok.encode("book A FLIGHT   to paris"));
        assert!(a
            .iter()
            .all(|&id| id >= 1 && (id as usize) < tok.vocab_size));
        assert_eq!(tok.encode("   "), vec![UNK]);
    }

    #[test]
    fn fnv_reference_values() {
        // published FNV-1a 64 test vectors
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn case_sensitivity_is_configurable() {
        let tok = Tokenizer {
            vocab_size: 1 << 20,
            lowercase: false,
        };
        assert_ne!(tok.token_id("Hello"), tok.token_id("hello"));
    }
}
