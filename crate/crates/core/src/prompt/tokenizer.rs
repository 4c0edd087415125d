use std::collections::HashMap;

use super::PromptError;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

/// Characters that tokenize one-to-one: newline, space and printable ASCII
/// except the angle brackets reserved for the `<s>` / `</s>` markup.
pub fn is_plain_char(c: char) -> bool {
    c == '\n' || c == ' ' || (c.is_ascii_graphic() && c != '<' && c != '>')
}

/// Character-level tokenizer with two atomic markup tokens.
///
/// Ids 0 and 1 are `<s>` and `</s>`; every other id is one character.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub const BOS_ID: usize = 0;
    pub const EOS_ID: usize = 1;
    const FIRST_CHAR_ID: usize = 2;

    pub fn new() -> Self {
        let chars: Vec<char> = std::iter::once('\n')
            .chain((0x20u8..0x7f).map(char::from))
            .filter(|&c| is_plain_char(c))
            .collect();
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + Self::FIRST_CHAR_ID))
            .collect();
        Self { chars, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.chars.len() + Self::FIRST_CHAR_ID
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < Self::FIRST_CHAR_ID
    }

    pub fn char_id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, PromptError> {
        let mut ids = Vec::with_capacity(text.len());
        let mut rest = text;
        while let Some(c) = rest.chars().next() {
            if let Some(tail) = rest.strip_prefix(BOS) {
                ids.push(Self::BOS_ID);
                rest = tail;
            } else if let Some(tail) = rest.strip_prefix(EOS) {
                ids.push(Self::EOS_ID);
                rest = tail;
            } else {
                ids.push(self.char_id(c).ok_or(PromptError::UnknownChar(c))?);
                rest = &rest[c.len_utf8()..];
            }
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String, PromptError> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            match id {
                Self::BOS_ID => out.push_str(BOS),
                Self::EOS_ID => out.push_str(EOS),
                _ => out.push(
                    *self
                        .chars
                        .get(id - Self::FIRST_CHAR_ID)
                        .ok_or(PromptError::UnknownId(id))?,
                ),
            }
        }
        Ok(out)
    }
}
