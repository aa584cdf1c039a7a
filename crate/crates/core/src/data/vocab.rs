use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const BOS: u32 = 3;
pub const NUM_RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "</s>", "<unk>", "<s>"];

/// Token/id bijection with four reserved ids ahead of the corpus tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Vocabulary holding the reserved ids followed by `tokens` in order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED_TOKENS.iter().map(|s| s.to_string()).chain(tokens.into_iter().map(Into::into)) {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary token {t:?}")));
            }
            if vocab.index.insert(t.clone(), vocab.tokens.len() as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
            vocab.tokens.push(t);
        }
        Ok(vocab)
    }

    /// Builds a vocabulary from tokenized sentences. Tokens seen at least
    /// `min_count` times get ids in descending frequency order (ties broken
    /// lexicographically) starting right after the reserved ids.
    pub fn build<'a, I>(sentences: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for sentence in sentences {
            for tok in sentence {
                any = true;
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count.max(1) && !RESERVED_TOKENS.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Ids of `tokens`, without an end marker.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Ids of `tokens` followed by one EOS.
    pub fn encode_with_eos<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        let mut ids = self.encode(tokens);
        ids.push(EOS);
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED_TOKENS[UNK as usize]).to_string())
            .collect()
    }

    /// The non-reserved tokens in id order.
    pub fn corpus_tokens(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    /// One token per line; line `i` (0-based) holds id `i + 4`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in self.corpus_tokens() {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
