// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Reserved tokens in id order. Every vocabulary starts with exactly these.
pub const RESERVED_TOKENS: [&str; 7] = [
    "<pad>",
    "<s>",
    "</s>",
    "<unk>",
    "<Trans>",
    "<Summary>",
    "<PseudoTrans>",
];

/// Bidirectional token/id map with the reserved ids 0..7 fixed in place.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub const PAD: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const UNK: TokenId = 3;
    pub const TRANS: TokenId = 4;
    pub const SUMMARY: TokenId = 5;
    pub const PSEUDO_TRANS: TokenId = 6;
    pub const N_RESERVED: usize = RESERVED_TOKENS.len();

    /// Vocabulary holding only the reserved tokens.
    pub fn reserved_only() -> Vocabulary {
        Self::from_tokens(Vec::<String>::new()).expect("reserved layout is valid")
    }

    /// Builds from content tokens in id order (ids start at 7).
    pub fn from_tokens<S: Into<String>>(content: impl IntoIterator<Item = S>) -> Result<Vocabulary> {
        let mut v = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for tok in RESERVED_TOKENS {
            v.push(tok.to_owned())?;
        }
        for tok in content {
            v.push(tok.into())?;
        }
        Ok(v)
    }

    fn push(&mut self, tok: String) -> Result<()> {
        let id = self.id_to_token.len() as TokenId;
        if self.token_to_id.insert(tok.clone(), id).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate vocabulary token {tok}")));
        }
        self.id_to_token.push(tok);
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
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

    /// Maps tokens to ids, substituting UNK for anything unknown.
    pub fn encode_lossy<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(Self::UNK))
            .collect()
    }

    /// Maps tokens to ids; unknown tokens are an error.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| Error::VocabMismatch(format!("token {:?} not in vocabulary", t.as_ref())))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(RESERVED_TOKENS[Self::UNK as usize]).to_owned())
            .collect()
    }

    pub fn is_reserved(id: TokenId) -> bool {
        (id as usize) < Self::N_RESERVED
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.id_to_token.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        if tokens.len() < Vocabulary::N_RESERVED
            || tokens.iter().zip(RESERVED_TOKENS).any(|(a, b)| a != b)
        {
            return Err(serde::de::Error::custom("vocabulary does not start with the reserved tokens"));
        }
        Vocabulary::from_tokens(tokens.into_iter().skip(Vocabulary::N_RESERVED))
            .map_err(serde::de::Error::custom)
    }
}

/// Source and target vocabularies of one model. `shared` pairs point at the
/// same token list on both sides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabPair {
    pub src: Vocabulary,
    pub tgt: Vocabulary,
}

impl VocabPair {
    pub fn shared(v: Vocabulary) -> VocabPair {
        VocabPair { src: v.clone(), tgt: v }
    }
}

/// Frequency-ranked vocabulary: descending count, ties lexicographic, at most
/// `max_size` entries including the reserved block.
pub fn build_vocab<'a, I, S>(corpus: I, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    if max_size < Vocabulary::N_RESERVED {
        return Err(Error::InvalidConfig(format!(
            "max_size {max_size} is smaller than the {} reserved tokens",
            Vocabulary::N_RESERVED
        )));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for seq in corpus {
        for tok in seq {
            let tok = tok.as_ref();
            if !RESERVED_TOKENS.contains(&tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - Vocabulary::N_RESERVED);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t.to_owned()))
}
