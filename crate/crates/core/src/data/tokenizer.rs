//! Byte-level tokenizer.
//!
//! Id table: `0` pad, `1` bos, `2` eos, then byte `b` maps to `b + 3`, for a
//! vocabulary of 259 ids.

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const BYTE_OFFSET: usize = 3;
pub const VOCAB_SIZE: usize = 256 + BYTE_OFFSET;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn tokenize(&self, bytes: &[u8]) -> Vec<usize> {
        bytes.iter().map(|&b| b as usize + BYTE_OFFSET).collect()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.tokenize(text.as_bytes())
    }

    /// Maps ids back to bytes. Reserved ids render as nothing.
    pub fn detokenize(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                PAD_ID | BOS_ID | EOS_ID => {}
                id if id < VOCAB_SIZE => out.push((id - BYTE_OFFSET) as u8),
                id => {
                    return Err(Error::InvalidArgument(format!(
                        "token id {id} is outside the {VOCAB_SIZE}-id vocabulary"
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Lossy text rendering of [`ByteTokenizer::detokenize`].
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.detokenize(ids)?).into_owned())
    }
}
