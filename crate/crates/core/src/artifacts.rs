//! A trained model together with its vocabulary, label space and optional
//! exemplar database, loaded with cross-checked hashes. Single-document
//! analysis and the ranked prediction file live here so the command line
//! and the HTTP service share them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::corpus::{Document, LabelSpace, Vocabulary};
use crate::error::{Error, Result};
use crate::exemplar::{AbsentPolicy, ExemplarDatabase};
use crate::model::{forward_eval, infer, BiasOffset, ForwardTrace, Inference, MaskMode, ModelParams};
use crate::netops::sigmoid;
use crate::pipeline::{score_documents, RunLayout};
use crate::report::{audit_payload, token_views, AuditPayload, AuditRequest, TokenView};

#[derive(Clone, Debug)]
pub struct ArtifactPaths {
    pub vocab: PathBuf,
    pub labels: PathBuf,
    pub checkpoint: PathBuf,
    pub database: Option<PathBuf>,
}

impl ArtifactPaths {
    /// The fine-tuned model of a run directory, with its database if asked.
    pub fn from_layout(layout: &RunLayout, with_database: bool) -> Self {
        ArtifactPaths {
            vocab: layout.vocab(),
            labels: layout.labels(),
            checkpoint: layout.checkpoint(),
            database: with_database.then(|| layout.database()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Artifacts {
    pub vocab: Vocabulary,
    pub labels: LabelSpace,
    pub params: ModelParams,
    /// SHA-256 of the checkpoint file.
    pub model_hash: String,
    pub database: Option<ExemplarDatabase>,
}

/// Forward pass and decisions for one document.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub token_ids: Vec<u32>,
    pub trace: ForwardTrace,
    pub inference: Inference,
}

/// A document as seen by an audit: id, surface tokens and gold labels if known.
#[derive(Clone, Copy, Debug)]
pub struct DocRef<'a> {
    pub doc_id: &'a str,
    pub tokens: &'a [String],
    pub gold: Option<&'a BTreeSet<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelPrediction {
    pub code: String,
    pub description: String,
    /// Document score before the offset.
    pub logit: f64,
    /// Sigmoid of logit plus offset.
    pub probability: f64,
    pub predicted: bool,
}

impl Artifacts {
    /// Load and cross-check: the checkpoint must name this vocabulary and
    /// label space, the database this checkpoint and vocabulary.
    pub fn load(paths: &ArtifactPaths) -> Result<Self> {
        let vocab = Vocabulary::load(&paths.vocab)?;
        let labels = LabelSpace::from_tsv(&fs::read_to_string(&paths.labels)?, &paths.labels)?;
        let (ckpt, model_hash) = Checkpoint::load(&paths.checkpoint)?;
        ckpt.verify(&vocab.hash(), &labels.hash())?;
        let database = paths.database.as_deref().map(ExemplarDatabase::load).transpose()?;
        Artifacts::from_parts(vocab, labels, ckpt.params, model_hash, database)
    }

    pub fn from_parts(
        vocab: Vocabulary,
        labels: LabelSpace,
        params: ModelParams,
        model_hash: String,
        database: Option<ExemplarDatabase>,
    ) -> Result<Self> {
        if params.num_labels() != labels.len() || params.vocab_len() != vocab.len() {
            return Err(Error::Shape(format!(
                "model has {} labels and {} tokens; label space {}, vocabulary {}",
                params.num_labels(),
                params.vocab_len(),
                labels.len(),
                vocab.len()
            )));
        }
        if let Some(db) = &database {
            db.verify(&model_hash, &vocab.hash())?;
            if db.header.num_labels != labels.len() {
                return Err(Error::Shape(format!(
                    "database has {} labels, label space {}",
                    db.header.num_labels,
                    labels.len()
                )));
            }
        }
        Ok(Artifacts {
            vocab,
            labels,
            params,
            model_hash,
            database,
        })
    }

    pub fn database(&self) -> Result<&ExemplarDatabase> {
        self.database.as_ref().ok_or(Error::NoDatabase)
    }

    pub fn label_id(&self, code: &str) -> Result<usize> {
        self.labels
            .id(code)
            .ok_or_else(|| Error::UnknownLabel(code.to_string()))
    }

    pub fn analyze(&self, tokens: &[String], offset: &BiasOffset) -> Result<Analysis> {
        let token_ids: Vec<u32> = tokens.iter().map(|t| self.vocab.id(t)).collect();
        let trace = forward_eval(&self.params, &token_ids)?;
        let inference = infer(&trace, &self.params, offset);
        Ok(Analysis {
            token_ids,
            trace,
            inference,
        })
    }

    /// Highlight rule of the loaded model: combined for fine-tuned models.
    pub fn mask_mode(&self) -> MaskMode {
        if self.params.is_finetuned() {
            MaskMode::Combined
        } else {
            MaskMode::MinmaxOnly
        }
    }

    pub fn token_views(&self, tokens: &[String], label: usize) -> Result<Vec<TokenView>> {
        let a = self.analyze(tokens, &BiasOffset::default())?;
        token_views(&a.trace, &self.params, tokens, label, self.mask_mode())
    }

    /// Full audit payload of `label` under `offset`.
    pub fn audit(
        &self,
        doc: DocRef<'_>,
        label: usize,
        offset: &BiasOffset,
        tau: f64,
        policy: AbsentPolicy,
    ) -> Result<AuditPayload> {
        let db = self.database()?;
        if label >= self.labels.len() {
            return Err(Error::OutOfRange {
                index: label,
                len: self.labels.len(),
            });
        }
        let a = self.analyze(doc.tokens, offset)?;
        let request = AuditRequest {
            doc_id: doc.doc_id,
            tokens: doc.tokens,
            gold: doc.gold.map(|g| g.contains(&label)),
            label,
            offset: offset.for_label(label),
            tau,
            policy,
            model_hash: &self.model_hash,
        };
        audit_payload(&self.params, db, &self.labels, &a.trace, &a.inference, &request)
    }

    /// Ranked predictions of every document, in input order.
    pub fn predict_documents(&self, docs: &[Document], offset: &BiasOffset) -> Result<Vec<Vec<LabelPrediction>>> {
        let inferences = score_documents(&self.params, docs, offset)?;
        Ok(inferences
            .iter()
            .map(|inf| rank_labels(&self.labels, inf, offset, None))
            .collect())
    }
}

/// Stable id for free text: `txt-` and the first 16 hex digits of its SHA-256.
pub fn text_doc_id(text: &str) -> String {
    format!("txt-{}", &sha256_hex(text.as_bytes())[..16])
}

/// Labels by descending logit, ties to the lower label id.
pub fn rank_labels(
    labels: &LabelSpace,
    inference: &Inference,
    offset: &BiasOffset,
    top_k: Option<usize>,
) -> Vec<LabelPrediction> {
    let s = &inference.scores;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    order.truncate(top_k.unwrap_or(usize::MAX));
    order
        .into_iter()
        .map(|c| LabelPrediction {
            code: labels.code(c).to_string(),
            description: labels.description(c).to_string(),
            logit: s[c],
            probability: sigmoid(s[c] + offset.for_label(c)),
            predicted: inference.predicted[c],
        })
        .collect()
}

pub const PREDICTIONS_HEADER: &str = "doc_id\trank\tcode\tlogit\tprobability\tpredicted";

/// Tab-separated ranked predictions. Floats use the shortest representation
/// that parses back to the same value.
pub fn predictions_tsv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a [LabelPrediction])>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{PREDICTIONS_HEADER}");
    for (doc, preds) in rows {
        for (rank, p) in preds.iter().enumerate() {
            let _ = writeln!(
                out,
                "{doc}\t{}\t{}\t{}\t{}\t{}",
                rank + 1,
                p.code,
                p.logit,
                p.probability,
                u8::from(p.predicted)
            );
        }
    }
    out
}

/// Scores and decisions of one document, indexed by label id.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub doc_id: String,
    pub scores: Vec<f64>,
    pub predicted: Vec<bool>,
}

/// Parse a prediction file back into dense rows. Every document must list
/// every label.
pub fn read_predictions(text: &str, labels: &LabelSpace, path: &Path) -> Result<Vec<PredictionRow>> {
    let c = labels.len();
    let mut rows: Vec<PredictionRow> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut filled: Vec<Vec<bool>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.is_empty() || (i == 0 && line == PREDICTIONS_HEADER) {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(Error::malformed(
                path,
                line_no,
                format!("expected 6 columns, found {}", cols.len()),
            ));
        }
        let label = labels
            .id(cols[2])
            .ok_or_else(|| Error::UnknownLabel(cols[2].to_string()))?;
        let logit: f64 = cols[3]
            .parse()
            .map_err(|_| Error::malformed(path, line_no, format!("bad logit {:?}", cols[3])))?;
        let predicted = match cols[5] {
            "1" => true,
            "0" => false,
            other => return Err(Error::malformed(path, line_no, format!("bad predicted flag {other:?}"))),
        };
        let r = *index.entry(cols[0].to_string()).or_insert_with(|| {
            rows.push(PredictionRow {
                doc_id: cols[0].to_string(),
                scores: vec![0.0; c],
                predicted: vec![false; c],
            });
            filled.push(vec![false; c]);
            rows.len() - 1
        });
        if filled[r][label] {
            return Err(Error::malformed(
                path,
                line_no,
                format!("label {} listed twice for {}", cols[2], cols[0]),
            ));
        }
        filled[r][label] = true;
        rows[r].scores[label] = logit;
        rows[r].predicted[label] = predicted;
    }
    for (row, f) in rows.iter().zip(&filled) {
        let n = f.iter().filter(|&&x| x).count();
        if n != c {
            return Err(Error::Format(format!(
                "{}: document {} lists {n} of {c} labels; evaluation needs complete rankings",
                path.display(),
                row.doc_id
            )));
        }
    }
    Ok(rows)
}
