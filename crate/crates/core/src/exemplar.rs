//! Exemplar vectors, the training-set exemplar database, exact
//! class-conditional nearest-neighbor retrieval and the audit decision rules.
//!
//! Database file layout (little-endian):
//!
//! ```text
//! magic "MBLADEDB" | u32 version | u64 header length | JSON header
//! record block: count records of stride 32 + 8 * dim bytes
//!   u32 doc string index | u32 token index | u32 label
//!   u8 flags (bit 0 predicted, bit 1 gold) | 3 zero bytes
//!   f64 database score | u32 snippet string index | u32 snippet focus
//!   dim x f64 key
//! string table: u32 count, then u32 byte length + UTF-8 bytes per string
//! ```

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{frame, push_f64s, read_f64s, unframe};
use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::model::{forward_eval, infer, BiasOffset, ForwardTrace, Inference, ModelParams};
use crate::netops::sigmoid;

pub const DB_MAGIC: &[u8; 8] = b"MBLADEDB";
pub const DB_VERSION: u32 = 1;
const META_BYTES: usize = 32;

/// Tokens shown on each side of the key token in a snippet.
pub const SNIPPET_CONTEXT: usize = 8;

/// Exemplar key of token `n`: for every bank in order, each filter's mean
/// pre-ReLU activation over the windows covering `n`, followed by the
/// document max-pool vector.
pub fn token_vector(trace: &ForwardTrace, n: usize) -> Result<Vec<f64>> {
    let len = trace.len();
    if n >= len {
        return Err(Error::OutOfRange { index: n, len });
    }
    let mut v = Vec::with_capacity(2 * trace.pooled.len());
    for map in &trace.maps {
        let positions = map.row_len();
        let width = len + 1 - positions;
        let lo = (n + 1).saturating_sub(width);
        let hi = n.min(positions - 1);
        let count = (hi - lo + 1) as f64;
        for m in 0..map.rows() {
            let row = map.row(m);
            v.push(row[lo..=hi].iter().sum::<f64>() / count);
        }
    }
    v.extend_from_slice(&trace.pooled);
    Ok(v)
}

/// Space-joined token window around `n` and the position of `n` within it.
pub fn snippet(tokens: &[String], n: usize) -> (String, usize) {
    if tokens.is_empty() {
        return (String::new(), 0);
    }
    let n = n.min(tokens.len() - 1);
    let lo = n.saturating_sub(SNIPPET_CONTEXT);
    let hi = (n + SNIPPET_CONTEXT + 1).min(tokens.len());
    (tokens[lo..hi].join(" "), n - lo)
}

/// Retrieval class of a stored exemplar relative to a label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ExemplarClass {
    Tp,
    Fn,
    Fp,
    Tn,
}

impl ExemplarClass {
    pub const ALL: [ExemplarClass; 4] = [
        ExemplarClass::Tp,
        ExemplarClass::Fn,
        ExemplarClass::Fp,
        ExemplarClass::Tn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExemplarClass::Tp => "TP",
            ExemplarClass::Fn => "FN",
            ExemplarClass::Fp => "FP",
            ExemplarClass::Tn => "TN",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub doc_id: String,
    pub token_index: usize,
    pub label: usize,
    pub predicted: bool,
    pub gold: bool,
    /// `o'_c + s^{c+-}_max` on the training document.
    pub database_score: f64,
    pub snippet: String,
    /// Word index of the key token inside `snippet`.
    pub snippet_focus: usize,
}

impl RecordMeta {
    /// Class of this record for its own label.
    pub fn own_class(&self) -> ExemplarClass {
        match (self.predicted, self.gold) {
            (true, true) => ExemplarClass::Tp,
            (false, true) => ExemplarClass::Fn,
            _ => ExemplarClass::Fp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseHeader {
    pub dim: usize,
    pub num_labels: usize,
    pub model_hash: String,
    pub vocab_hash: String,
    pub count: usize,
}

/// Immutable exemplar store with per-label indexes.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarDatabase {
    pub header: DatabaseHeader,
    records: Vec<RecordMeta>,
    keys: Vec<f64>,
    /// Record indices per label.
    by_label: Vec<Vec<usize>>,
    /// Dense document index per record.
    doc_of: Vec<usize>,
    /// Sorted dense document indices associated with each label.
    docs_of_label: Vec<Vec<usize>>,
}

impl ExemplarDatabase {
    pub fn new(header: DatabaseHeader, records: Vec<RecordMeta>, keys: Vec<f64>) -> Result<Self> {
        if keys.len() != records.len() * header.dim || header.count != records.len() {
            return Err(Error::Shape(format!(
                "{} records with {} key values at dim {} (header count {})",
                records.len(),
                keys.len(),
                header.dim,
                header.count
            )));
        }
        let mut by_label = vec![Vec::new(); header.num_labels];
        let mut doc_ids: HashMap<&str, usize> = HashMap::new();
        let mut doc_of = Vec::with_capacity(records.len());
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if r.label >= header.num_labels {
                return Err(Error::OutOfRange {
                    index: r.label,
                    len: header.num_labels,
                });
            }
            if !(r.predicted || r.gold) {
                return Err(Error::Format(format!("record {i} is neither predicted nor gold")));
            }
            let next = doc_ids.len();
            let d = *doc_ids.entry(r.doc_id.as_str()).or_insert(next);
            if !seen.insert((d, r.label)) {
                return Err(Error::Format(format!(
                    "duplicate record for {} / label {}",
                    r.doc_id, r.label
                )));
            }
            doc_of.push(d);
            by_label[r.label].push(i);
        }
        let docs_of_label = by_label
            .iter()
            .map(|idx| {
                let mut d: Vec<usize> = idx.iter().map(|&i| doc_of[i]).collect();
                d.sort_unstable();
                d
            })
            .collect();
        Ok(ExemplarDatabase {
            header,
            records,
            keys,
            by_label,
            doc_of,
            docs_of_label,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn records(&self) -> &[RecordMeta] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &RecordMeta {
        &self.records[i]
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.header.dim..(i + 1) * self.header.dim]
    }

    /// Class of record `i` as a candidate for `label`, if it is one.
    pub fn class_for(&self, i: usize, label: usize) -> Option<ExemplarClass> {
        let r = &self.records[i];
        if r.label == label {
            Some(r.own_class())
        } else if self.docs_of_label[label].binary_search(&self.doc_of[i]).is_err() {
            Some(ExemplarClass::Tn)
        } else {
            None
        }
    }

    /// Fail unless built from this model and vocabulary.
    pub fn verify(&self, model_hash: &str, vocab_hash: &str) -> Result<()> {
        if self.header.model_hash != model_hash {
            return Err(Error::HashMismatch {
                what: "model",
                expected: self.header.model_hash.clone(),
                found: model_hash.to_string(),
            });
        }
        if self.header.vocab_hash != vocab_hash {
            return Err(Error::HashMismatch {
                what: "vocabulary",
                expected: self.header.vocab_hash.clone(),
                found: vocab_hash.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut strings: Vec<&str> = Vec::new();
        let mut index: HashMap<&str, u32> = HashMap::new();
        let mut body = Vec::with_capacity(self.records.len() * (META_BYTES + 8 * self.dim()));
        for (i, r) in self.records.iter().enumerate() {
            let d = intern(&r.doc_id, &mut index, &mut strings);
            let s = intern(&r.snippet, &mut index, &mut strings);
            body.extend_from_slice(&d.to_le_bytes());
            body.extend_from_slice(&(r.token_index as u32).to_le_bytes());
            body.extend_from_slice(&(r.label as u32).to_le_bytes());
            body.push(u8::from(r.predicted) | (u8::from(r.gold) << 1));
            body.extend_from_slice(&[0; 3]);
            body.extend_from_slice(&r.database_score.to_le_bytes());
            body.extend_from_slice(&s.to_le_bytes());
            body.extend_from_slice(&(r.snippet_focus as u32).to_le_bytes());
            push_f64s(&mut body, self.key(i));
        }
        body.extend_from_slice(&(strings.len() as u32).to_le_bytes());
        for s in strings {
            body.extend_from_slice(&(s.len() as u32).to_le_bytes());
            body.extend_from_slice(s.as_bytes());
        }
        Ok(frame(DB_MAGIC, DB_VERSION, &header, &body))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, body) = unframe(bytes, DB_MAGIC, DB_VERSION, "exemplar database")?;
        let header: DatabaseHeader = serde_json::from_slice(header)?;
        let stride = META_BYTES + 8 * header.dim;
        let block = header
            .count
            .checked_mul(stride)
            .filter(|&b| b <= body.len())
            .ok_or_else(|| Error::Format("truncated record block".into()))?;
        let (block, mut table) = body.split_at(block);
        let mut take = |n: usize| -> Result<&[u8]> {
            if table.len() < n {
                return Err(Error::Format("truncated string table".into()));
            }
            let (a, b) = table.split_at(n);
            table = b;
            Ok(a)
        };
        let n_strings = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let mut strings = Vec::with_capacity(n_strings);
        for _ in 0..n_strings {
            let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let s = std::str::from_utf8(take(len)?).map_err(|e| Error::Format(e.to_string()))?;
            strings.push(s.to_string());
        }
        if !take(0)?.is_empty() || !table.is_empty() {
            return Err(Error::Format("trailing bytes after string table".into()));
        }
        let u32_at = |b: &[u8], at: usize| u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes")) as usize;
        let string = |i: usize| {
            strings
                .get(i)
                .cloned()
                .ok_or_else(|| Error::Format(format!("string index {i} out of range")))
        };
        let mut records = Vec::with_capacity(header.count);
        let mut keys = vec![0.0; header.count * header.dim];
        for (i, rec) in block.chunks_exact(stride).enumerate() {
            let flags = rec[12];
            records.push(RecordMeta {
                doc_id: string(u32_at(rec, 0))?,
                token_index: u32_at(rec, 4),
                label: u32_at(rec, 8),
                predicted: flags & 1 != 0,
                gold: flags & 2 != 0,
                database_score: f64::from_le_bytes(rec[16..24].try_into().expect("8 bytes")),
                snippet: string(u32_at(rec, 24))?,
                snippet_focus: u32_at(rec, 28),
            });
            read_f64s(&rec[META_BYTES..], &mut keys[i * header.dim..(i + 1) * header.dim]);
        }
        ExemplarDatabase::new(header, records, keys)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ExemplarDatabase::from_bytes(&fs::read(path)?)
    }
}

fn intern<'a>(s: &'a str, index: &mut HashMap<&'a str, u32>, strings: &mut Vec<&'a str>) -> u32 {
    *index.entry(s).or_insert_with(|| {
        strings.push(s);
        strings.len() as u32 - 1
    })
}

/// Hashes of the artifacts a database is built against.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ArtifactHashes {
    pub model: String,
    pub vocab: String,
}

/// Records of one document: every label predicted or gold, keyed at the
/// label's max-contribution token.
fn document_records(params: &ModelParams, doc: &Document) -> Result<Vec<(RecordMeta, Vec<f64>)>> {
    let trace = forward_eval(params, &doc.token_ids)?;
    let inference = infer(&trace, params, &BiasOffset::default());
    let gold = doc.gold_vector(params.num_labels());
    let mut out = Vec::new();
    for c in 0..params.num_labels() {
        if !(inference.predicted[c] || gold[c]) {
            continue;
        }
        let n = inference.argmax_token[c];
        let (snippet, snippet_focus) = snippet(&doc.raw_tokens, n);
        out.push((
            RecordMeta {
                doc_id: doc.doc_id.clone(),
                token_index: n,
                label: c,
                predicted: inference.predicted[c],
                gold: gold[c],
                database_score: inference.scores[c],
                snippet,
                snippet_focus,
            },
            token_vector(&trace, n)?,
        ));
    }
    Ok(out)
}

/// Build the exemplar database over `docs` with a fine-tuned model.
pub fn build_database(params: &ModelParams, docs: &[Document], hashes: &ArtifactHashes) -> Result<ExemplarDatabase> {
    if !params.is_finetuned() {
        return Err(Error::MissingUntiedLayer);
    }
    let per_doc: Vec<Vec<(RecordMeta, Vec<f64>)>> = docs
        .par_iter()
        .map(|d| document_records(params, d))
        .collect::<Result<_>>()?;
    let dim = params.architecture().exemplar_dim();
    let mut records = Vec::new();
    let mut keys = Vec::new();
    for (meta, key) in per_doc.into_iter().flatten() {
        records.push(meta);
        keys.extend(key);
    }
    let header = DatabaseHeader {
        dim,
        num_labels: params.num_labels(),
        model_hash: hashes.model.clone(),
        vocab_hash: hashes.vocab.clone(),
        count: records.len(),
    };
    ExemplarDatabase::new(header, records, keys)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub record: usize,
    pub distance: f64,
}

/// Candidate ordering: squared distance, then document id, then label.
fn better(db: &ExemplarDatabase, a: (f64, usize), b: (f64, usize)) -> bool {
    let (ra, rb) = (db.record(a.1), db.record(b.1));
    a.0.total_cmp(&b.0)
        .then_with(|| ra.doc_id.cmp(&rb.doc_id))
        .then_with(|| ra.label.cmp(&rb.label))
        == Ordering::Less
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

type Best = [Option<(f64, usize)>; 4];

fn merge(db: &ExemplarDatabase, mut a: Best, b: Best) -> Best {
    for (x, y) in a.iter_mut().zip(b) {
        if let Some(y) = y {
            if x.is_none_or(|x| better(db, y, x)) {
                *x = Some(y);
            }
        }
    }
    a
}

const SCAN_CHUNK: usize = 256;

/// Nearest record of each class (TP, FN, FP, TN) for `label`.
pub fn retrieve(query: &[f64], label: usize, db: &ExemplarDatabase) -> Result<[Option<Neighbor>; 4]> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    if query.len() != db.dim() {
        return Err(Error::Shape(format!(
            "query has dim {}, database {}",
            query.len(),
            db.dim()
        )));
    }
    if label >= db.header.num_labels {
        return Err(Error::OutOfRange {
            index: label,
            len: db.header.num_labels,
        });
    }
    let best = (0..db.len())
        .collect::<Vec<_>>()
        .par_chunks(SCAN_CHUNK)
        .map(|chunk| {
            let mut best: Best = [None; 4];
            for &i in chunk {
                if let Some(class) = db.class_for(i, label) {
                    let cand = (squared_distance(query, db.key(i)), i);
                    let slot = &mut best[class.index()];
                    if slot.is_none_or(|s| better(db, cand, s)) {
                        *slot = Some(cand);
                    }
                }
            }
            best
        })
        .reduce(|| [None; 4], |a, b| merge(db, a, b));
    Ok(best.map(|b| {
        b.map(|(d2, record)| Neighbor {
            record,
            distance: d2.sqrt(),
        })
    }))
}

/// Treatment of classes with no candidate record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbsentPolicy {
    /// Leave absent classes out of the softmax.
    #[default]
    Exclude,
    /// Give absent classes a fixed distance of [`ABSENT_DISTANCE`].
    LargeDistance,
}

pub const ABSENT_DISTANCE: f64 = 1e9;

/// Softmax over negative distances; absent classes get probability 0 under
/// [`AbsentPolicy::Exclude`].
pub fn softmax_distances(distances: [Option<f64>; 4], policy: AbsentPolicy) -> [f64; 4] {
    let d: [Option<f64>; 4] = match policy {
        AbsentPolicy::Exclude => distances,
        AbsentPolicy::LargeDistance => distances.map(|d| Some(d.unwrap_or(ABSENT_DISTANCE))),
    };
    let min = d.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let weights = d.map(|d| d.map_or(0.0, |d| (-(d - min)).exp()));
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return [0.0; 4];
    }
    weights.map(|w| w / total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decisions {
    pub query: bool,
    pub exa: bool,
    pub exadr: bool,
    pub only_db: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    pub label: usize,
    /// Query token the exemplar key was taken at.
    pub token_index: usize,
    /// `o'_c + s^{c+-}_max` of the query.
    pub query_score: f64,
    /// Nearest record per class in TP, FN, FP, TN order.
    pub neighbors: [Option<Neighbor>; 4],
    pub probs: [f64; 4],
    pub i_star: ExemplarClass,
    /// Query score plus the weighted database score of the nearest exemplar.
    pub exa_score: f64,
    pub decisions: Decisions,
}

impl AuditResult {
    pub fn neighbor(&self, class: ExemplarClass) -> Option<Neighbor> {
        self.neighbors[class.index()]
    }

    pub fn prob(&self, class: ExemplarClass) -> f64 {
        self.probs[class.index()]
    }

    /// Threshold rule: nearest is TP and its probability exceeds `tau`.
    pub fn exadr_t(&self, tau: f64) -> bool {
        self.decisions.exadr && self.prob(ExemplarClass::Tp) > tau
    }

    /// Database score of the overall nearest exemplar.
    pub fn nearest_score(&self, db: &ExemplarDatabase) -> f64 {
        let n = self.neighbor(self.i_star).expect("nearest class present");
        db.record(n.record).database_score
    }
}

/// Nearest class; ties go to the earlier class in TP, FN, FP, TN order.
pub fn nearest_class(neighbors: &[Option<Neighbor>; 4]) -> Option<ExemplarClass> {
    let mut best: Option<(ExemplarClass, f64)> = None;
    for class in ExemplarClass::ALL {
        if let Some(n) = neighbors[class.index()] {
            if best.is_none_or(|(_, d)| n.distance < d) {
                best = Some((class, n.distance));
            }
        }
    }
    best.map(|(c, _)| c)
}

/// Augmented logit `query + database_score(i*) * p(i*)` and its decision.
pub fn exa_score(query_score: f64, nearest_database_score: f64, nearest_prob: f64) -> (f64, bool) {
    let logit = query_score + nearest_database_score * nearest_prob;
    (logit, sigmoid(logit) > 0.5)
}

/// ExA, ExADR and onlyDB decisions; all false for a negative query.
pub fn decision_rules(
    query_positive: bool,
    i_star: ExemplarClass,
    exa_positive: bool,
    nearest_database_score: f64,
) -> Decisions {
    Decisions {
        query: query_positive,
        exa: query_positive && exa_positive,
        exadr: query_positive && i_star == ExemplarClass::Tp,
        only_db: query_positive && sigmoid(nearest_database_score) > 0.5,
    }
}

/// Retrieval, normalization and decision rules for one (query, label).
pub fn audit_vector(
    db: &ExemplarDatabase,
    query: &[f64],
    label: usize,
    token_index: usize,
    query_score: f64,
    query_positive: bool,
    policy: AbsentPolicy,
) -> Result<AuditResult> {
    let neighbors = retrieve(query, label, db)?;
    let probs = softmax_distances(neighbors.map(|n| n.map(|n| n.distance)), policy);
    let i_star = nearest_class(&neighbors).ok_or(Error::NoExemplars(label))?;
    let nearest = db
        .record(neighbors[i_star.index()].expect("present").record)
        .database_score;
    let (exa_logit, exa_positive) = exa_score(query_score, nearest, probs[i_star.index()]);
    Ok(AuditResult {
        label,
        token_index,
        query_score,
        neighbors,
        probs,
        i_star,
        exa_score: exa_logit,
        decisions: decision_rules(query_positive, i_star, exa_positive, nearest),
    })
}

/// Audit label `label` of an evaluated document: the query key is taken at
/// the label's max-contribution token.
pub fn audit_label(
    db: &ExemplarDatabase,
    trace: &ForwardTrace,
    inference: &Inference,
    label: usize,
    policy: AbsentPolicy,
) -> Result<AuditResult> {
    if label >= inference.scores.len() {
        return Err(Error::OutOfRange {
            index: label,
            len: inference.scores.len(),
        });
    }
    let n = inference.argmax_token[label];
    let query = token_vector(trace, n)?;
    audit_vector(
        db,
        &query,
        label,
        n,
        inference.scores[label],
        inference.predicted[label],
        policy,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn meta(doc: &str, label: usize, predicted: bool, gold: bool, score: f64) -> RecordMeta {
        RecordMeta {
            doc_id: doc.into(),
            token_index: 0,
            label,
            predicted,
            gold,
            database_score: score,
            snippet: format!("{doc} snippet"),
            snippet_focus: 1,
        }
    }

    fn db(records: Vec<RecordMeta>, keys: Vec<f64>, dim: usize, labels: usize) -> ExemplarDatabase {
        let header = DatabaseHeader {
            dim,
            num_labels: labels,
            model_hash: "m".into(),
            vocab_hash: "v".into(),
            count: records.len(),
        };
        ExemplarDatabase::new(header, records, keys).unwrap()
    }

    fn trace_with_map(map: Vec<f64>, positions: usize, width: usize) -> ForwardTrace {
        let n = positions + width - 1;
        ForwardTrace {
            token_ids: vec![2; n],
            real_len: n,
            input: Tensor::zeros(&[n, 1]),
            maps: vec![Tensor::from_vec(&[1, positions], map).unwrap()],
            pools: Vec::new(),
            pooled: vec![0.5],
            dropout_mask: None,
            features: vec![0.5],
            spans: vec![(0, width)],
            logits: Vec::new(),
            untied_logits: None,
        }
    }

    #[test]
    fn covering_window_average() {
        let t = trace_with_map(vec![1.0, 2.0, 3.0, 4.0, 5.0], 5, 3);
        assert_eq!(token_vector(&t, 2).unwrap(), vec![2.0, 0.5]);
        assert_eq!(token_vector(&t, 0).unwrap(), vec![1.0, 0.5]);
        assert_eq!(token_vector(&t, 6).unwrap(), vec![5.0, 0.5]);
        assert_eq!(token_vector(&t, 5).unwrap(), vec![4.5, 0.5]);
        assert!(token_vector(&t, 7).is_err());
        let t = trace_with_map(vec![-1.0, 2.0, 3.0], 3, 1);
        assert_eq!(token_vector(&t, 0).unwrap(), vec![-1.0, 0.5]);
    }

    #[test]
    fn snippet_brackets_key_token() {
        let toks: Vec<String> = (0..30).map(|i| format!("t{i}")).collect();
        let (s, focus) = snippet(&toks, 10);
        assert!(s.starts_with("t2 "));
        assert!(s.ends_with("t18"));
        assert_eq!(s.split(' ').nth(focus), Some("t10"));
        assert_eq!(snippet(&toks, 1).1, 1);
    }

    #[test]
    fn single_tp_at_zero_distance() {
        let d = db(vec![meta("a", 0, true, true, 2.0)], vec![1.0, 2.0], 2, 1);
        let r = audit_vector(&d, &[1.0, 2.0], 0, 0, 0.5, true, AbsentPolicy::Exclude).unwrap();
        assert_eq!(r.i_star, ExemplarClass::Tp);
        assert_eq!(r.probs, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(r.neighbor(ExemplarClass::Tp).unwrap().distance, 0.0);
        assert!(r.neighbor(ExemplarClass::Tn).is_none());
    }

    #[test]
    fn equal_distance_quad() {
        // Label 0: TP from a, FN from b, FP from c; d only holds label 1.
        let d = db(
            vec![
                meta("a", 0, true, true, 1.0),
                meta("b", 0, false, true, -1.0),
                meta("c", 0, true, false, 1.0),
                meta("d", 1, true, true, 1.0),
            ],
            vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0],
            2,
            2,
        );
        let r = audit_vector(&d, &[0.0, 0.0], 0, 0, 1.0, true, AbsentPolicy::Exclude).unwrap();
        assert_eq!(r.probs, [0.25; 4]);
        assert_eq!(r.i_star, ExemplarClass::Tp);
        let r = audit_vector(&d, &[0.0, 0.0], 0, 0, 1.0, true, AbsentPolicy::LargeDistance).unwrap();
        assert_eq!(r.probs, [0.25; 4]);
    }

    #[test]
    fn tn_excludes_documents_associated_with_label() {
        // Doc a has labels 0 and 1; its label-1 record is not a TN for label 0.
        let d = db(
            vec![
                meta("a", 0, true, true, 1.0),
                meta("a", 1, true, false, 1.0),
                meta("b", 1, false, true, 1.0),
            ],
            vec![5.0, 0.0, 1.0],
            1,
            2,
        );
        let r = retrieve(&[0.0], 0, &d).unwrap();
        assert_eq!(r[3].unwrap().record, 2);
        assert_eq!(d.class_for(1, 0), None);
        assert_eq!(d.class_for(0, 1), None);
        assert_eq!(d.class_for(2, 0), Some(ExemplarClass::Tn));
    }

    #[test]
    fn exa_hand_arithmetic() {
        let (logit, positive) = exa_score(0.1, -10.0, 0.9);
        assert!((logit - (0.1 - 9.0)).abs() < 1e-12);
        assert!(!positive);
        assert_eq!(exa_score(0.3, 0.0, 0.7), (0.3, true));
        let mut last = f64::NEG_INFINITY;
        for p in [0.25, 0.5, 0.75, 1.0] {
            let (l, _) = exa_score(-1.0, 2.0, p);
            assert!(l > last);
            last = l;
        }
    }

    #[test]
    fn negatives_stay_negative() {
        let d = decision_rules(false, ExemplarClass::Tp, true, 5.0);
        assert_eq!(
            d,
            Decisions {
                query: false,
                exa: false,
                exadr: false,
                only_db: false
            }
        );
        let d = decision_rules(true, ExemplarClass::Fp, true, 5.0);
        assert!(!d.exadr && d.only_db && d.exa);
    }

    #[test]
    fn file_round_trip() {
        let d = db(
            vec![
                meta("a", 0, true, true, 1.25),
                meta("b", 1, false, true, -0.5),
                meta("a", 1, true, false, 3.0),
            ],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            2,
            2,
        );
        let bytes = d.to_bytes().unwrap();
        let back = ExemplarDatabase::from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(ExemplarDatabase::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        assert!(back.verify("m", "v").is_ok());
        assert!(back.verify("x", "v").is_err());
    }

    #[test]
    fn storage_restriction_enforced() {
        let header = DatabaseHeader {
            dim: 1,
            num_labels: 1,
            model_hash: String::new(),
            vocab_hash: String::new(),
            count: 1,
        };
        assert!(ExemplarDatabase::new(header.clone(), vec![meta("a", 0, false, false, 0.0)], vec![0.0]).is_err());
        let two = DatabaseHeader { count: 2, ..header };
        assert!(ExemplarDatabase::new(
            two,
            vec![meta("a", 0, true, true, 0.0), meta("a", 0, true, false, 0.0)],
            vec![0.0, 1.0]
        )
        .is_err());
    }

    #[test]
    fn empty_database_is_an_error() {
        let d = db(Vec::new(), Vec::new(), 2, 1);
        assert!(matches!(retrieve(&[0.0, 0.0], 0, &d), Err(Error::EmptyDatabase)));
    }
}
