//! Word-level vocabulary with a reserved id block.

use super::{CorpusError, LabeledSentence};
use std::collections::BTreeMap;
use std::path::Path;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token ↔ id bijection. Ids 0..4 are reserved and stable across save/load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from corpora plus any extra text (e.g. the
    /// evaluation prefixes), sorted for determinism.
    pub fn build(corpora: &[&[LabeledSentence]], extra_text: &[String]) -> Self {
        let mut words: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for corpus in corpora {
            for s in *corpus {
                words.extend(s.text.split_whitespace().map(str::to_string));
            }
        }
        for text in extra_text {
            words.extend(text.split_whitespace().map(str::to_string));
        }
        let mut id_to_token: Vec<String> =
            RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(words);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Unknown words map to [`UNK_ID`].
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id_of(w).unwrap_or(UNK_ID))
            .collect()
    }

    /// Reserved tokens are dropped; `decode(encode(t)) == t` for
    /// in-vocabulary text.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id >= RESERVED_TOKENS.len())
            .filter_map(|&id| self.token_of(id))
            .collect();
        words.join(" ")
    }

    /// `[BOS, words…, EOS]`, the shape every training sentence takes.
    pub fn encode_for_lm(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS_ID];
        ids.extend(self.encode(text));
        ids.push(EOS_ID);
        ids
    }

    /// One non-reserved token per line; line number = id − reserved block.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let body: Vec<&str> = self.id_to_token[RESERVED_TOKENS.len()..]
            .iter()
            .map(String::as_str)
            .collect();
        std::fs::write(path, body.join("\n") + "\n").map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut id_to_token: Vec<String> =
            RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(text.lines().filter(|l| !l.is_empty()).map(str::to_string));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }

    /// Content digest, used to pin classifiers to the vocabulary they were
    /// trained with.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.id_to_token {
            h.update(t.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}
