//! Append-only annotation log: one JSON record per line.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use multiblade::exemplar::ExemplarClass;
use serde::{Deserialize, Serialize};

/// `accept`, `reject` or `relabel-to:<code>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Verdict {
    Accept,
    Reject,
    RelabelTo(String),
}

impl TryFrom<String> for Verdict {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        match s.as_str() {
            "accept" => Ok(Verdict::Accept),
            "reject" => Ok(Verdict::Reject),
            other => match other.strip_prefix("relabel-to:") {
                Some(code) if !code.trim().is_empty() => Ok(Verdict::RelabelTo(code.trim().to_string())),
                _ => Err(format!(
                    "verdict must be accept, reject or relabel-to:<code>, got {other:?}"
                )),
            },
        }
    }
}

impl From<Verdict> for String {
    fn from(v: Verdict) -> String {
        match v {
            Verdict::Accept => "accept".into(),
            Verdict::Reject => "reject".into(),
            Verdict::RelabelTo(code) => format!("relabel-to:{code}"),
        }
    }
}

/// What the annotator was shown: the nearest class and the four
/// normalized probabilities in TP, FN, FP, TN order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarContext {
    pub i_star: ExemplarClass,
    pub probs: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationInput {
    pub doc_id: String,
    pub code: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub annotator: Option<String>,
    #[serde(default)]
    pub context: Option<ExemplarContext>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub doc_id: String,
    pub code: String,
    pub verdict: Verdict,
    pub annotator: String,
    pub context: Option<ExemplarContext>,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
    pub model_hash: String,
}

#[derive(Debug)]
pub struct AnnotationStore {
    path: Option<PathBuf>,
    records: Mutex<Vec<Annotation>>,
}

impl AnnotationStore {
    /// Keep annotations in memory only.
    pub fn in_memory() -> Self {
        AnnotationStore {
            path: None,
            records: Mutex::new(Vec::new()),
        }
    }

    /// Open or create the log at `path`, reading back existing records.
    pub fn open(path: PathBuf) -> std::io::Result<Self> {
        let mut records = Vec::new();
        if path.is_file() {
            for (i, line) in fs::read_to_string(&path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: Annotation = serde_json::from_str(line).map_err(|e| {
                    std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("{}:{}: {e}", path.display(), i + 1),
                    )
                })?;
                records.push(rec);
            }
        }
        Ok(AnnotationStore {
            path: Some(path),
            records: Mutex::new(records),
        })
    }

    /// Stamp and persist one annotation. Writes are serialized.
    pub fn append(&self, input: AnnotationInput, annotator: String, model_hash: &str) -> std::io::Result<Annotation> {
        let mut records = self.records.lock().unwrap_or_else(|p| p.into_inner());
        let timestamp_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        let rec = Annotation {
            id: records.len() as u64,
            doc_id: input.doc_id,
            code: input.code,
            verdict: input.verdict,
            annotator,
            context: input.context,
            timestamp_ms,
            model_hash: model_hash.to_string(),
        };
        if let Some(path) = &self.path {
            let mut line = serde_json::to_string(&rec)?;
            line.push('\n');
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        records.push(rec.clone());
        Ok(rec)
    }

    /// Records of one document, or all of them, in write order.
    pub fn query(&self, doc: Option<&str>) -> Vec<Annotation> {
        let records = self.records.lock().unwrap_or_else(|p| p.into_inner());
        records
            .iter()
            .filter(|r| doc.is_none_or(|d| r.doc_id == d))
            .cloned()
            .collect()
    }
}
