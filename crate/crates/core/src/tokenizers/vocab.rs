use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

const FIXED_RESERVED: [&str; 4] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN];

pub fn lang_token(code: &str) -> String {
    format!("[LANG:{code}]")
}

/// Dense token/id bijection. Ids `0..4` are `[PAD] [UNK] [CLS] [SEP]`,
/// followed by one `[LANG:xx]` per configured language.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    languages: Vec<String>,
}

impl Vocabulary {
    pub fn new(languages: &[String]) -> Result<Self> {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
            languages: Vec::new(),
        };
        for t in FIXED_RESERVED {
            v.push(t);
        }
        for code in languages {
            if code.is_empty() || v.ids.contains_key(&lang_token(code)) {
                return Err(Error::Tokenizer(format!("invalid or duplicate language {code:?}")));
            }
            v.push(&lang_token(code));
            v.languages.push(code.clone());
        }
        Ok(v)
    }

    /// Rebuilds a vocabulary from its id-ordered token list, checking the
    /// reserved prefix and uniqueness.
    pub fn from_tokens(tokens: Vec<String>, languages: &[String]) -> Result<Self> {
        let mut v = Vocabulary::new(languages)?;
        let reserved = v.reserved_count();
        if tokens.len() < reserved || tokens[..reserved] != v.tokens[..] {
            return Err(Error::Tokenizer(format!(
                "vocabulary must start with the reserved tokens {:?}",
                v.tokens
            )));
        }
        for t in &tokens[reserved..] {
            if t.is_empty() || v.ids.contains_key(t) {
                return Err(Error::Tokenizer(format!("empty or duplicate token {t:?}")));
            }
            v.push(t);
        }
        Ok(v)
    }

    /// Adds `token` if absent; returns its id either way.
    pub fn push(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn lang_id(&self, code: &str) -> Option<TokenId> {
        self.languages
            .iter()
            .position(|l| l == code)
            .map(|i| FIXED_RESERVED.len() + i)
    }

    pub fn is_lang_id(&self, id: TokenId) -> bool {
        (FIXED_RESERVED.len()..self.reserved_count()).contains(&id)
    }

    pub fn reserved_count(&self) -> usize {
        FIXED_RESERVED.len() + self.languages.len()
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        id < self.reserved_count()
    }
}
