//! Character-level vocabulary with four reserved control tokens.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::TokenId;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const NUM_RESERVED: usize = 4;

/// Display glyphs of the reserved tokens. Raw text containing them is rejected.
const RESERVED_GLYPHS: [char; NUM_RESERVED] = ['\u{0}', '\u{2}', '\u{3}', '\u{1f}'];

/// The default inventory: space, lowercase letters, digits and punctuation,
/// for a vocabulary of 64 tokens.
pub const DEFAULT_INVENTORY: &str =
    " abcdefghijklmnopqrstuvwxyz0123456789.,:;!?'\"-()[]+=*/<>@#&%";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_inventory(DEFAULT_INVENTORY).expect("default inventory is valid")
    }
}

impl Vocab {
    /// Builds a vocabulary from a set of distinct, non-reserved characters.
    pub fn from_inventory(inventory: &str) -> Result<Self> {
        let mut chars = Vec::new();
        let mut index = HashMap::new();
        for c in inventory.chars() {
            if RESERVED_GLYPHS.contains(&c) || c == '\t' || c == '\n' {
                return Err(Error::input(format!("character {c:?} cannot be in the inventory")));
            }
            if index.insert(c, (NUM_RESERVED + chars.len()) as TokenId).is_some() {
                return Err(Error::input(format!("duplicate inventory character {c:?}")));
            }
            chars.push(c);
        }
        if chars.is_empty() {
            return Err(Error::input("empty inventory"));
        }
        Ok(Self { chars, index })
    }

    pub fn size(&self) -> usize {
        NUM_RESERVED + self.chars.len()
    }

    pub fn inventory(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    /// Stable 64-bit fingerprint of the inventory (first 8 bytes of SHA-256).
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"dkd-vocab-v1\0");
        h.update(self.inventory().as_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .enumerate()
            .map(|(pos, c)| {
                if RESERVED_GLYPHS.contains(&c) {
                    return Err(Error::input(format!(
                        "reserved token glyph {c:?} at character {pos}"
                    )));
                }
                self.index.get(&c).copied().ok_or_else(|| {
                    Error::input(format!("unknown character {c:?} at character {pos}"))
                })
            })
            .collect()
    }

    /// Inverse of [`Vocab::tokenize`]; reserved tokens render as their glyphs.
    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        tokens.iter().map(|&t| self.glyph(t)).collect()
    }

    pub fn glyph(&self, token: TokenId) -> char {
        let t = token as usize;
        if t < NUM_RESERVED {
            RESERVED_GLYPHS[t]
        } else {
            self.chars.get(t - NUM_RESERVED).copied().unwrap_or('\u{fffd}')
        }
    }
}

/// A token sequence whose first `prompt_len` tokens are conditioning only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
}

impl TokenSeq {
    pub fn new(tokens: Vec<TokenId>, prompt_len: usize) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(Error::input(format!(
                "prompt length {prompt_len} exceeds sequence length {}",
                tokens.len()
            )));
        }
        Ok(Self { tokens, prompt_len })
    }

    /// `BOS prompt SEP response EOS`, or `BOS response EOS` when the prompt
    /// is empty. The prompt part covers everything up to and including SEP.
    pub fn from_example(vocab: &Vocab, prompt: &str, response: &str) -> Result<Self> {
        let mut tokens = vec![BOS];
        if !prompt.is_empty() {
            tokens.extend(vocab.tokenize(prompt)?);
            tokens.push(SEP);
        }
        let prompt_len = tokens.len();
        tokens.extend(vocab.tokenize(response)?);
        tokens.push(EOS);
        Ok(Self { tokens, prompt_len })
    }

    /// `BOS prompt SEP`, the decoding start for a prompt.
    pub fn prompt_only(vocab: &Vocab, prompt: &str) -> Result<Self> {
        let mut tokens = vec![BOS];
        tokens.extend(vocab.tokenize(prompt)?);
        tokens.push(SEP);
        let prompt_len = tokens.len();
        Ok(Self { tokens, prompt_len })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions `t` whose next token `tokens[t + 1]` is a supervised
    /// (response or EOS) token.
    pub fn loss_positions(&self) -> std::ops::Range<usize> {
        let first = self.prompt_len.max(1) - 1;
        first..self.tokens.len().saturating_sub(1)
    }

    pub fn response_tokens(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }
}
