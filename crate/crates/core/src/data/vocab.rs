use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::TokenId;

/// Character vocabulary with fixed special ids: 0 blank/pad, 1 begin, 2 end,
/// 3 mask, then sentinels, then characters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    alphabet: Vec<char>,
    sentinels: usize,
}

pub const DESK_ALPHABET: &str = "abcdefghijklmnopqrstuvw ";

impl Vocab {
    pub const BLANK: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const MASK: TokenId = 3;
    const FIRST_SENTINEL: TokenId = 4;

    pub fn new(alphabet: &str, sentinels: usize) -> Result<Self> {
        let chars: Vec<char> = alphabet.chars().collect();
        if chars.is_empty() {
            return Err(Error::Config("empty alphabet".into()));
        }
        let mut sorted = chars.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != chars.len() {
            return Err(Error::Config(format!("alphabet {alphabet:?} repeats characters")));
        }
        Ok(Self {
            alphabet: chars,
            sentinels,
        })
    }

    /// 24 characters and 4 sentinels: 32 ids in total.
    pub fn desk() -> Self {
        Self::new(DESK_ALPHABET, 4).expect("valid alphabet")
    }

    pub fn size(&self) -> usize {
        Self::FIRST_SENTINEL + self.sentinels + self.alphabet.len()
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn alphabet_string(&self) -> String {
        self.alphabet.iter().collect()
    }

    pub fn sentinels(&self) -> Vec<TokenId> {
        (0..self.sentinels).map(|k| Self::FIRST_SENTINEL + k).collect()
    }

    fn first_char(&self) -> TokenId {
        Self::FIRST_SENTINEL + self.sentinels
    }

    pub fn char_index(&self, c: char) -> Option<usize> {
        self.alphabet.iter().position(|&a| a == c)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| {
                self.char_index(c)
                    .map(|i| self.first_char() + i)
                    .ok_or_else(|| Error::Data(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    /// Characters for character ids; special ids are skipped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter_map(|&id| id.checked_sub(self.first_char()))
            .filter_map(|i| self.alphabet.get(i))
            .collect()
    }

    pub fn is_char(&self, id: TokenId) -> bool {
        id >= self.first_char() && id < self.size()
    }

    /// Ids a text decoder may emit: characters and end-of-sequence.
    pub fn emittable(&self) -> Vec<TokenId> {
        std::iter::once(Self::EOS)
            .chain(self.first_char()..self.size())
            .collect()
    }
}
