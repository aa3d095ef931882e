use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use multiblade::artifacts::Artifacts;
use multiblade::exemplar::AbsentPolicy;
use multiblade::model::BiasOffset;
use serde::{Deserialize, Serialize};

use crate::annotations::AnnotationStore;
use crate::error::ApiError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Annotation log; in memory when absent.
    pub annotations: Option<PathBuf>,
    /// Static bearer token required on every request when set.
    pub token: Option<String>,
    /// Default threshold for the ExADR+t decision.
    pub tau: f64,
    pub absent: AbsentPolicy,
    /// Labels returned by `/predict` when the request gives no `top_k`.
    pub top_k: Option<usize>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            annotations: None,
            token: None,
            tau: 0.0,
            absent: AbsentPolicy::Exclude,
            top_k: None,
        }
    }
}

/// A document the service can audit.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredDoc {
    pub tokens: Vec<String>,
    /// Gold label ids when the document came from a corpus.
    pub gold: Option<BTreeSet<usize>>,
}

/// Slider state of one session: a global offset and per-label overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionOffset {
    pub value: f64,
    #[serde(default)]
    pub per_label: BTreeMap<String, f64>,
}

pub struct AppState {
    pub artifacts: Option<Arc<Artifacts>>,
    pub config: ServiceConfig,
    pub annotations: AnnotationStore,
    docs: RwLock<HashMap<String, Arc<StoredDoc>>>,
    sessions: RwLock<HashMap<String, SessionOffset>>,
}

impl AppState {
    pub fn new(artifacts: Option<Artifacts>, config: ServiceConfig) -> std::io::Result<Self> {
        let annotations = match &config.annotations {
            Some(p) => AnnotationStore::open(p.clone())?,
            None => AnnotationStore::in_memory(),
        };
        Ok(AppState {
            artifacts: artifacts.map(Arc::new),
            config,
            annotations,
            docs: RwLock::new(HashMap::new()),
            sessions: RwLock::new(HashMap::new()),
        })
    }

    pub fn artifacts(&self) -> Result<&Arc<Artifacts>, ApiError> {
        self.artifacts.as_ref().ok_or(ApiError::Unavailable)
    }

    pub fn model_hash(&self) -> Option<String> {
        self.artifacts.as_ref().map(|a| a.model_hash.clone())
    }

    pub fn insert_doc(&self, doc_id: String, doc: StoredDoc) {
        self.docs
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(doc_id, Arc::new(doc));
    }

    pub fn doc(&self, doc_id: &str) -> Result<Arc<StoredDoc>, ApiError> {
        self.docs
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(doc_id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown document {doc_id:?}")))
    }

    pub fn session(&self, key: &str) -> SessionOffset {
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(key)
            .cloned()
            .unwrap_or_default()
    }

    pub fn set_session(&self, key: &str, offset: SessionOffset) {
        self.sessions
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(key.to_string(), offset);
    }

    /// The session's offset in label-id order.
    pub fn bias(&self, key: &str) -> Result<BiasOffset, ApiError> {
        let s = self.session(key);
        if s.per_label.is_empty() {
            return Ok(BiasOffset::global(s.value));
        }
        let a = self.artifacts()?;
        let mut per_label = vec![s.value; a.labels.len()];
        for (code, v) in &s.per_label {
            per_label[a.label_id(code)?] = *v;
        }
        Ok(BiasOffset {
            global: s.value,
            per_label: Some(per_label),
        })
    }
}
