//! Word-level vocabulary with fixed special tokens.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::text::{ANIMAL1_TOKEN, ANIMAL2_TOKEN};
use super::CorpusError;
use crate::hashing::fnv1a64_hex;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const ANIMAL1: usize = 4;
pub const ANIMAL2: usize = 5;

const SPECIALS: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<unk>", ANIMAL1_TOKEN, ANIMAL2_TOKEN];

/// Token-to-id map. Ids 0..=5 are the fixed specials; corpus tokens at or
/// above the frequency threshold follow in descending-frequency order
/// (ties alphabetically), everything else encodes to `UNK`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    min_frequency: usize,
    #[serde(skip)]
    ids: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a, I>(paragraph_tokens: I, min_frequency: usize) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut any = false;
        for tokens in paragraph_tokens {
            any = true;
            for token in tokens {
                *counts.entry(token.as_str()).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(token, count)| *count >= min_frequency && !SPECIALS.contains(token))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| (*s).to_owned()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t.to_owned()));
        Ok(Self::from_token_list(tokens, min_frequency))
    }

    fn from_token_list(tokens: Vec<String>, min_frequency: usize) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            min_frequency,
            ids,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token_of(&self, id: usize) -> Result<&str, CorpusError> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(CorpusError::UnknownTokenId(id))
    }

    /// Encode preprocessed tokens; out-of-vocabulary tokens become `UNK`.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_of(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>, CorpusError> {
        ids.iter()
            .map(|&id| self.token_of(id).map(str::to_owned))
            .collect()
    }

    /// Stable fingerprint of the token list; checkpoints embed it so a
    /// model cannot silently decode with the wrong vocabulary.
    pub fn content_hash(&self) -> String {
        fnv1a64_hex(self.tokens.join("\n").as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let body = serde_json::to_string_pretty(self).map_err(|e| CorpusError::Serde(e.to_string()))?;
        std::fs::write(path, body).map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let body = std::fs::read_to_string(path).map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let raw: Vocabulary = serde_json::from_str(&body).map_err(|e| CorpusError::Serde(e.to_string()))?;
        Ok(Self::from_token_list(raw.tokens, raw.min_frequency))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::text::preprocess;

    fn corpus(texts: &[&str]) -> Vec<Vec<String>> {
        texts.iter().map(|t| preprocess(t).unwrap()).collect()
    }

    #[test]
    fn specials_are_fixed() {
        let docs = corpus(&["animal 1 is gray ."]);
        let v = Vocabulary::build(docs.iter().map(Vec::as_slice), 1).unwrap();
        assert_eq!(v.token_of(PAD).unwrap(), "<pad>");
        assert_eq!(v.token_of(BOS).unwrap(), "<bos>");
        assert_eq!(v.token_of(EOS).unwrap(), "<eos>");
        assert_eq!(v.token_of(UNK).unwrap(), "<unk>");
        assert_eq!(v.token_of(ANIMAL1).unwrap(), "animal1");
        assert_eq!(v.token_of(ANIMAL2).unwrap(), "animal2");
        assert_eq!(v.id_of("animal1"), ANIMAL1);
    }

    #[test]
    fn min_frequency_one_keeps_every_token() {
        let docs = corpus(&["a b b c", "c d"]);
        let v = Vocabulary::build(docs.iter().map(Vec::as_slice), 1).unwrap();
        for t in ["a", "b", "c", "d"] {
            assert_ne!(v.id_of(t), UNK, "{t}");
        }
        // b and c both occur twice; frequency order then alphabetical.
        assert_eq!(v.id_of("b"), 6);
        assert_eq!(v.id_of("c"), 7);
        assert_eq!(v.id_of("a"), 8);
        assert_eq!(v.id_of("d"), 9);
    }

    #[test]
    fn rare_tokens_unk_at_encode_time() {
        let docs = corpus(&["common common rare"]);
        let v = Vocabulary::build(docs.iter().map(Vec::as_slice), 2).unwrap();
        let ids = v.encode(&docs[0]);
        assert_eq!(ids, vec![v.id_of("common"), v.id_of("common"), UNK]);
    }

    #[test]
    fn stable_across_runs() {
        let docs = corpus(&["the quick brown fox", "the lazy dog", "the end ."]);
        let a = Vocabulary::build(docs.iter().map(Vec::as_slice), 1).unwrap();
        let b = Vocabulary::build(docs.iter().map(Vec::as_slice), 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn encode_decode_round_trip() {
        let docs = corpus(&["animal 1 has a red body ."]);
        let v = Vocabulary::build(docs.iter().map(Vec::as_slice), 1).unwrap();
        let ids = v.encode(&docs[0]);
        let decoded = v.decode(&ids).unwrap();
        assert_eq!(decoded, docs[0]);
        assert_eq!(v.encode(&decoded), ids);
        assert!(v.decode(&[v.len()]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let docs = corpus(&["one two three"]);
        let v = Vocabulary::build(docs.iter().map(Vec::as_slice), 1).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
        assert_eq!(loaded.id_of("two"), v.id_of("two"));
    }
}
