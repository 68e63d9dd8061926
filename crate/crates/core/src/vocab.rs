use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word-level vocabulary with a frequency threshold. Ids 0..4 are reserved
/// for PAD, BOS, EOS and UNK; kept words follow in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    min_count: usize,
}

impl Vocabulary {
    /// Keeps every token that occurs at least `min_count` times.
    pub fn build<'a, I, S>(captions: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        if min_count == 0 {
            return Err(Error::Contract("min_count must be at least 1".into()));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut n_captions = 0;
        for caption in captions {
            n_captions += 1;
            for tok in caption {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        if n_captions == 0 {
            return Err(Error::Contract(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let kept = counts
            .into_iter()
            .filter(|(tok, c)| *c >= min_count && !RESERVED.contains(tok))
            .map(|(tok, _)| tok.to_string());
        Self::from_tokens(kept, min_count)
    }

    /// Rebuilds a vocabulary from its non-reserved tokens in id order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>, min_count: usize) -> Result<Self> {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = HashMap::new();
        for (i, r) in RESERVED.iter().enumerate() {
            token_to_id.insert(r.to_string(), i);
        }
        for tok in tokens {
            if token_to_id.contains_key(&tok) {
                return Err(Error::Contract(format!(
                    "duplicate vocabulary token `{tok}`"
                )));
            }
            token_to_id.insert(tok.clone(), id_to_token.len());
            id_to_token.push(tok);
        }
        Ok(Self {
            token_to_id,
            id_to_token,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.id_to_token
            .get(id)
            .map_or(RESERVED[UNK], String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.id_to_token[RESERVED.len()..]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// `BOS tokens... EOS`.
    pub fn encode_caption<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(BOS);
        ids.extend(tokens.iter().map(|t| self.id(t.as_ref())));
        ids.push(EOS);
        ids
    }

    /// Maps ids back to words, dropping BOS/PAD and stopping at EOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .copied()
            .take_while(|&i| i != EOS)
            .filter(|&i| i != BOS && i != PAD)
            .map(|i| self.token(i).to_string())
            .collect()
    }
}
