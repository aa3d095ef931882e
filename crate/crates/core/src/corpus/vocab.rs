use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::has_alphabetic;
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token to id mapping. Id 0 is padding, id 1 the low-frequency placeholder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::Format("vocabulary must start with <pad>, <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Build a vocabulary from training token streams.
///
/// Tokens without an alphabetic character are dropped. Tokens occurring in
/// fewer than `min_doc_freq` documents fall back to `<unk>`. The remaining
/// tokens are ranked by total count (ties lexicographic) and the `max_size`
/// most frequent are kept, in addition to `<pad>` and `<unk>`.
pub fn build_vocab<'a, I>(train_docs: I, max_size: usize, min_doc_freq: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a [String]>,
{
    if max_size < 2 {
        return Err(Error::Config(format!(
            "vocabulary max_size must be >= 2, got {max_size}"
        )));
    }
    let mut count: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut n_docs = 0usize;
    for doc in train_docs {
        n_docs += 1;
        let mut seen = HashSet::new();
        for tok in doc {
            if !has_alphabetic(tok) || tok == PAD_TOKEN || tok == UNK_TOKEN {
                continue;
            }
            let entry = count.entry(tok.as_str()).or_default();
            entry.0 += 1;
            if seen.insert(tok.as_str()) {
                entry.1 += 1;
            }
        }
    }
    if n_docs == 0 {
        return Err(Error::EmptyCorpus);
    }

    let mut ranked: Vec<(&str, usize)> = count
        .into_iter()
        .filter(|(_, (_, df))| *df >= min_doc_freq)
        .map(|(t, (total, _))| (t, total))
        .collect();
    // BTreeMap iteration is already lexicographic, so a stable sort keeps ties in order.
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    ranked.truncate(max_size);

    let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
    Vocabulary::from_tokens(tokens)
}
