use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const MASK: &str = "<mask>";
pub const UNK: &str = "<unk>";

/// Ids of the reserved tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub mask: TokenId,
    pub unk: TokenId,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Vocabulary::SPECIALS
    }
}

impl SpecialTokens {
    /// BOS, EOS and PAD delimit sequences; they are never masked or selected.
    pub fn is_structural(&self, id: TokenId) -> bool {
        id == self.pad || id == self.bos || id == self.eos
    }
}

/// Closed whitespace-token vocabulary. Ids `0..5` are the reserved tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
    specials: SpecialTokens,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    tokens: Vec<String>,
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = Error;

    fn try_from(file: VocabularyFile) -> Result<Self> {
        let reserved = [PAD, BOS, EOS, MASK, UNK];
        if file.tokens.len() < reserved.len()
            || file.tokens.iter().zip(reserved).any(|(t, r)| t != r)
        {
            return Err(Error::Config("vocabulary must start with the reserved tokens".into()));
        }
        Vocabulary::with_words(file.tokens[reserved.len()..].iter().cloned())
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        Self { tokens: v.id_to_token }
    }
}

impl Vocabulary {
    pub const SPECIALS: SpecialTokens = SpecialTokens { pad: 0, bos: 1, eos: 2, mask: 3, unk: 4 };

    /// Reserved tokens followed by `words` in order. Duplicates are rejected.
    pub fn with_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> =
            [PAD, BOS, EOS, MASK, UNK].iter().map(|s| s.to_string()).collect();
        id_to_token.extend(words.into_iter().map(Into::into));
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { id_to_token, token_to_id, specials: SpecialTokens::default() })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn specials(&self) -> SpecialTokens {
        self.specials
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Unknown words map to the UNK id.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<TokenId> {
        words.iter().map(|w| self.id(w.as_ref()).unwrap_or(self.specials.unk)).collect()
    }

    /// `[BOS] words [EOS]`
    pub fn encode_wrapped<S: AsRef<str>>(&self, words: &[S]) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(self.specials.bos);
        ids.extend(self.encode(words));
        ids.push(self.specials.eos);
        ids
    }

    /// Drops BOS, PAD and everything from the first EOS on.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        let sp = self.specials;
        ids.iter()
            .take_while(|&&id| id != sp.eos)
            .filter(|&&id| id != sp.bos && id != sp.pad)
            .map(|&id| self.token(id).unwrap_or(UNK).to_string())
            .collect()
    }
}
