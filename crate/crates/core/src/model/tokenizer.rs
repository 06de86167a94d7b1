//! Byte-level tokenizer: ids 0..=255 are bytes, 256 is BOS, 257 is EOS.

use super::{ModelConfig, TokenId, TokenSequence};
use crate::error::{Error, Result};

pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;

fn check_vocab(cfg: &ModelConfig) -> Result<()> {
    if cfg.vocab_size < 258 {
        return Err(Error::Config(format!(
            "byte tokenizer needs vocab_size >= 258, got {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// `[BOS, bytes...]` as a prompt sequence.
pub fn byte_tokenize(cfg: &ModelConfig, text: &[u8]) -> Result<TokenSequence> {
    check_vocab(cfg)?;
    let mut ids = Vec::with_capacity(text.len() + 1);
    ids.push(BOS);
    ids.extend(text.iter().map(|&b| b as TokenId));
    Ok(TokenSequence::prompt(ids))
}

/// Inverse of [`byte_tokenize`]. Specials and non-byte ids render as nothing.
pub fn byte_detokenize(cfg: &ModelConfig, ids: &[TokenId]) -> Result<Vec<u8>> {
    check_vocab(cfg)?;
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if id as usize >= cfg.vocab_size {
            return Err(Error::UnknownToken {
                id,
                vocab: cfg.vocab_size,
            });
        }
        if id < 256 {
            out.push(id as u8);
        }
    }
    Ok(out)
}
