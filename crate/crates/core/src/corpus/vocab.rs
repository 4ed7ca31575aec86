use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::corpus::ProductRecord;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_RESERVED: usize = 4;

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<PAD>", "<UNK>", "<BOS>", "<EOS>"];

/// Bidirectional token/id map. Ids 0..4 are reserved for PAD, UNK, BOS, EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    min_frequency: usize,
}

impl Vocabulary {
    /// Vocabulary holding only the reserved tokens.
    pub fn reserved_only() -> Self {
        Self::from_tokens(Vec::<String>::new(), 1)
    }

    /// Builds from non-reserved tokens in id order (first token gets id 4).
    pub fn from_tokens<I, S>(tokens: I, min_frequency: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = HashMap::new();
        for t in tokens {
            let t = t.into();
            if token_to_id.contains_key(&t) || RESERVED_TOKENS.contains(&t.as_str()) {
                continue;
            }
            token_to_id.insert(t.clone(), id_to_token.len());
            id_to_token.push(t);
        }
        Vocabulary {
            token_to_id,
            id_to_token,
            min_frequency,
        }
    }

    /// Keeps tokens seen at least `min_frequency` times across long titles,
    /// short titles and attribute tags, most frequent first (ties broken
    /// lexicographically), capped so the total size including the reserved
    /// ids is at most `max_size`.
    pub fn build(records: &[ProductRecord], min_frequency: usize, max_size: usize) -> Result<Self> {
        if min_frequency < 1 {
            return Err(Error::invalid("min_frequency must be >= 1"));
        }
        if max_size < NUM_RESERVED + 1 {
            return Err(Error::invalid(format!(
                "max_size must be >= {}",
                NUM_RESERVED + 1
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in records {
            let short = r.short_title.iter().flatten();
            for t in r.long_title.iter().chain(short).chain(&r.attr_tags) {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_frequency && !RESERVED_TOKENS.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        kept.truncate(max_size - NUM_RESERVED);
        Ok(Self::from_tokens(
            kept.into_iter().map(|(t, _)| t.to_string()),
            min_frequency,
        ))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token[NUM_RESERVED..]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.token(id).map(str::to_string).ok_or_else(|| {
                    Error::data(format!(
                        "corrupt input: id {id} out of range for vocabulary of {}",
                        self.len()
                    ))
                })
            })
            .collect()
    }

    /// One token per line; line `n` (0-based) holds id `n + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for t in self.tokens() {
            writeln!(w, "{t}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(Error::data(format!(
                    "{}: line {}: invalid token {line:?}",
                    path.display(),
                    n + 1
                )));
            }
            tokens.push(line.to_string());
        }
        let count = tokens.len();
        let vocab = Self::from_tokens(tokens, 1);
        if vocab.len() != count + NUM_RESERVED {
            return Err(Error::data(format!(
                "{}: duplicate or reserved tokens",
                path.display()
            )));
        }
        Ok(vocab)
    }
}

pub fn encode_ids<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Vec<usize> {
    vocab.encode(tokens)
}

pub fn decode_ids(ids: &[usize], vocab: &Vocabulary) -> Result<Vec<String>> {
    vocab.decode(ids)
}
