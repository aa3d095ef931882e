//! Corpus ingestion, vocabulary construction, embeddings and the synthetic
//! planted-trigger generator.

mod caml;
mod embeddings;
mod synthetic;
mod vocab;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use caml::{ingest_caml_format, read_split, write_caml_format, write_split, IngestOptions};
pub use embeddings::{load_embeddings, random_embeddings};
pub use synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec, TriggerRecord};
pub use vocab::{build_vocab, Vocabulary, PAD_ID, PAD_TOKEN, UNK_ID, UNK_TOKEN};

/// Default truncation length applied to every split.
pub const DEFAULT_MAX_LEN: usize = 2500;

/// Whitespace tokenization as applied to corpus files: lowercase, keep
/// tokens with an alphabetic character, truncate to `max_len`.
pub fn tokenize(text: &str, max_len: usize) -> Vec<String> {
    text.split_whitespace()
        .map(str::to_lowercase)
        .filter(|t| has_alphabetic(t))
        .take(max_len)
        .collect()
}

/// A document as read from disk: lowercased, filtered and truncated tokens
/// plus gold label ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub labels: BTreeSet<usize>,
}

/// A document mapped through a [`Vocabulary`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub token_ids: Vec<u32>,
    pub gold_labels: BTreeSet<usize>,
    pub raw_tokens: Vec<String>,
}

impl Document {
    pub fn encode(raw: &RawDocument, vocab: &Vocabulary) -> Self {
        Document {
            doc_id: raw.doc_id.clone(),
            token_ids: raw.tokens.iter().map(|t| vocab.id(t)).collect(),
            gold_labels: raw.labels.clone(),
            raw_tokens: raw.tokens.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Gold labels as a dense indicator vector of length `num_labels`.
    pub fn gold_vector(&self, num_labels: usize) -> Vec<bool> {
        let mut y = vec![false; num_labels];
        for &c in &self.gold_labels {
            if c < num_labels {
                y[c] = true;
            }
        }
        y
    }
}

pub fn encode_all(docs: &[RawDocument], vocab: &Vocabulary) -> Vec<Document> {
    docs.iter().map(|d| Document::encode(d, vocab)).collect()
}

/// Label id to code mapping with descriptions and training frequencies.
///
/// Codes that never occur in the training split keep a frequency of zero and
/// are reported by [`LabelSpace::is_unseen`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    codes: Vec<String>,
    descriptions: Vec<String>,
    train_frequency: Vec<usize>,
    index: HashMap<String, usize>,
}

impl LabelSpace {
    pub fn new(codes: Vec<String>, descriptions: Vec<String>, train_frequency: Vec<usize>) -> Self {
        assert_eq!(codes.len(), descriptions.len());
        assert_eq!(codes.len(), train_frequency.len());
        let index = codes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        LabelSpace {
            codes,
            descriptions,
            train_frequency,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code(&self, id: usize) -> &str {
        &self.codes[id]
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn description(&self, id: usize) -> &str {
        &self.descriptions[id]
    }

    pub fn id(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn train_frequency(&self, id: usize) -> usize {
        self.train_frequency[id]
    }

    pub fn frequencies(&self) -> &[usize] {
        &self.train_frequency
    }

    pub fn is_unseen(&self, id: usize) -> bool {
        self.train_frequency[id] == 0
    }

    pub fn unseen_mask(&self) -> Vec<bool> {
        self.train_frequency.iter().map(|&f| f == 0).collect()
    }

    pub fn set_description(&mut self, id: usize, description: String) {
        self.descriptions[id] = description;
    }

    /// Label ids ordered by training frequency, most frequent first; ties by id.
    pub fn by_frequency(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.len()).collect();
        ids.sort_by(|&a, &b| self.train_frequency[b].cmp(&self.train_frequency[a]).then(a.cmp(&b)));
        ids
    }

    /// SHA-256 over the ordered code list.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for code in &self.codes {
            hasher.update(code.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    /// Tab-separated `code<TAB>train_frequency<TAB>description` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                self.codes[i], self.train_frequency[i], self.descriptions[i]
            ));
        }
        out
    }

    pub fn from_tsv(text: &str, path: &std::path::Path) -> crate::Result<Self> {
        let mut codes = Vec::new();
        let mut descriptions = Vec::new();
        let mut freq = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut cols = line.splitn(3, '\t');
            let code = cols.next().unwrap_or_default();
            let f = cols
                .next()
                .and_then(|f| f.parse::<usize>().ok())
                .ok_or_else(|| crate::Error::malformed(path, i + 1, "expected code, frequency, description"))?;
            codes.push(code.to_string());
            freq.push(f);
            descriptions.push(cols.next().unwrap_or_default().to_string());
        }
        Ok(LabelSpace::new(codes, descriptions, freq))
    }
}

/// Train, dev and test splits sharing one label space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<RawDocument>,
    pub dev: Vec<RawDocument>,
    pub test: Vec<RawDocument>,
    pub labels: LabelSpace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, dev or test)")),
        }
    }
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[RawDocument] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

pub(crate) fn has_alphabetic(token: &str) -> bool {
    token.chars().any(char::is_alphabetic)
}
