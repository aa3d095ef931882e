//! Scoring whole splits, exemplar-rule evaluation, and the end-to-end run
//! from a corpus to checkpoints, database and metric report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{
    build_vocab, encode_all, load_embeddings, random_embeddings, Corpus, Document, LabelSpace, Split, TriggerRecord,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::exemplar::{audit_label, build_database, AbsentPolicy, ArtifactHashes, AuditResult, ExemplarDatabase};
use crate::metrics::{report, EvalRun, MacroOptions, MetricReport};
use crate::model::{forward_eval, infer, Architecture, BiasOffset, FilterSpec, Inference, ModelParams};
use crate::train::{self, EpochRecord, OptimizerConfig, TrainConfig};

/// Eval-mode inference for every document, in input order.
pub fn score_documents(params: &ModelParams, docs: &[Document], offset: &BiasOffset) -> Result<Vec<Inference>> {
    docs.par_iter()
        .map(|doc| {
            let trace = forward_eval(params, &doc.token_ids)?;
            Ok(infer(&trace, params, offset))
        })
        .collect()
}

fn gold_matrix(docs: &[Document], c: usize) -> Vec<Vec<bool>> {
    docs.iter().map(|d| d.gold_vector(c)).collect()
}

/// Model scores and decisions for a split, with unseen labels forced negative.
pub fn eval_run(params: &ModelParams, docs: &[Document], labels: &LabelSpace, offset: &BiasOffset) -> Result<EvalRun> {
    let inferences = score_documents(params, docs, offset)?;
    let (scores, predicted) = inferences.into_iter().map(|i| (i.scores, i.predicted)).unzip();
    EvalRun::new(scores, predicted, gold_matrix(docs, labels.len()), labels.unseen_mask())
}

/// Inference plus an audit of every query-positive label.
#[derive(Clone, Debug)]
pub struct DocAudit {
    pub inference: Inference,
    pub audits: Vec<AuditResult>,
}

pub fn audit_documents(
    params: &ModelParams,
    db: &ExemplarDatabase,
    docs: &[Document],
    labels: &LabelSpace,
    policy: AbsentPolicy,
) -> Result<Vec<DocAudit>> {
    docs.par_iter()
        .map(|doc| {
            let trace = forward_eval(params, &doc.token_ids)?;
            let mut inference = infer(&trace, params, &BiasOffset::default());
            for (c, p) in inference.predicted.iter_mut().enumerate() {
                *p &= !labels.is_unseen(c);
            }
            let audits = (0..labels.len())
                .filter(|&c| inference.predicted[c])
                .map(|c| audit_label(db, &trace, &inference, c, policy))
                .collect::<Result<_>>()?;
            Ok(DocAudit { inference, audits })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Cutoffs for P@z.
    pub precision_at: Vec<usize>,
    /// Thresholds for the ExADR+t rule.
    pub taus: Vec<f64>,
    pub macro_options: MacroOptions,
    pub absent: AbsentPolicy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            precision_at: vec![1, 5, 8, 15],
            taus: vec![0.0, 0.2, 0.4, 0.6],
            macro_options: MacroOptions::default(),
            absent: AbsentPolicy::Exclude,
        }
    }
}

/// One row of the variant comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub metrics: MetricReport,
}

/// Metrics for the fine-tuned model and each exemplar decision rule.
///
/// Rules only ever remove positives; `+ExA` and `+onlyDB` also replace the
/// scores of query-positive labels for the ranking metrics.
pub fn evaluate_variants(
    audited: &[DocAudit],
    docs: &[Document],
    labels: &LabelSpace,
    db: &ExemplarDatabase,
    config: &EvalConfig,
) -> Result<Vec<VariantReport>> {
    let c = labels.len();
    let gold = gold_matrix(docs, c);
    let unseen = labels.unseen_mask();
    let base_scores: Vec<Vec<f64>> = audited.iter().map(|a| a.inference.scores.clone()).collect();
    let base_pred: Vec<Vec<bool>> = audited.iter().map(|a| a.inference.predicted.clone()).collect();

    let variant = |name: String, scores: Vec<Vec<f64>>, predicted: Vec<Vec<bool>>| -> Result<VariantReport> {
        let run = EvalRun::new(scores, predicted, gold.clone(), unseen.clone())?;
        Ok(VariantReport {
            name,
            metrics: report(&run, &config.precision_at, config.macro_options)?,
        })
    };
    let rule = |f: &dyn Fn(&AuditResult) -> bool| -> Vec<Vec<bool>> {
        audited
            .iter()
            .map(|a| {
                let mut row = vec![false; c];
                for au in &a.audits {
                    row[au.label] = f(au);
                }
                row
            })
            .collect()
    };
    let rescored = |f: &dyn Fn(&AuditResult) -> f64| -> Vec<Vec<f64>> {
        audited
            .iter()
            .map(|a| {
                let mut row = a.inference.scores.clone();
                for au in &a.audits {
                    row[au.label] = f(au);
                }
                row
            })
            .collect()
    };

    let mut out = vec![variant("model".into(), base_scores.clone(), base_pred)?];
    out.push(variant(
        "+ExA".into(),
        rescored(&|a| a.exa_score),
        rule(&|a| a.decisions.exa),
    )?);
    out.push(variant(
        "+onlyDB".into(),
        rescored(&|a| a.nearest_score(db)),
        rule(&|a| a.decisions.only_db),
    )?);
    out.push(variant(
        "+ExADR".into(),
        base_scores.clone(),
        rule(&|a| a.decisions.exadr),
    )?);
    for &tau in &config.taus {
        out.push(variant(
            format!("+ExADR+t{tau}"),
            base_scores.clone(),
            rule(&|a| a.exadr_t(tau)),
        )?);
    }
    Ok(out)
}

/// Tab-separated table of variant metrics at three decimals.
pub fn variants_table(variants: &[VariantReport]) -> String {
    let mut out = String::new();
    if let Some(first) = variants.first() {
        let _ = writeln!(out, "variant\t{}", first.metrics.header().join("\t"));
    }
    for v in variants {
        let _ = writeln!(out, "{}\t{}", v.name, v.metrics.row().join("\t"));
    }
    out
}

/// True-positive (doc, label) pairs whose max-contribution token falls inside
/// a planted trigger of that label, as `(hits, total)`.
pub fn trigger_localization(
    inferences: &[Inference],
    docs: &[Document],
    trigger_map: &[TriggerRecord],
    split: Split,
    trigger_len: impl Fn(usize) -> usize,
) -> (usize, usize) {
    let mut spans: std::collections::HashMap<(&str, usize), Vec<usize>> = std::collections::HashMap::new();
    for r in trigger_map.iter().filter(|r| r.split == split) {
        spans.entry((r.doc_id.as_str(), r.label)).or_default().push(r.start);
    }
    let (mut hits, mut total) = (0, 0);
    for (inf, doc) in inferences.iter().zip(docs) {
        for &c in &doc.gold_labels {
            if c >= inf.predicted.len() || !inf.predicted[c] {
                continue;
            }
            total += 1;
            let n = inf.argmax_token[c];
            let len = trigger_len(c);
            if spans
                .get(&(doc.doc_id.as_str(), c))
                .is_some_and(|starts| starts.iter().any(|&s| n >= s && n < s + len))
            {
                hits += 1;
            }
        }
    }
    (hits, total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    /// Regular tokens kept, besides padding and unknown.
    pub max_size: usize,
    pub min_doc_freq: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            max_size: 50_000,
            min_doc_freq: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Word2vec text file; random embeddings when absent.
    pub embeddings: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::top50(),
            embeddings: None,
            seed: 1,
        }
    }
}

/// Every setting of an end-to-end run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub vocab: VocabConfig,
    pub model: ModelConfig,
    pub base: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            vocab: VocabConfig::default(),
            model: ModelConfig::default(),
            base: TrainConfig::base(),
            finetune: TrainConfig::finetune(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Small model and short schedules sized for the synthetic corpus.
    pub fn synthetic() -> Self {
        let architecture = Architecture {
            embedding_dim: 32,
            filters: [1, 2, 3]
                .into_iter()
                .map(|width| FilterSpec { width, count: 16 })
                .collect(),
        };
        PipelineConfig {
            vocab: VocabConfig {
                max_size: 50_000,
                min_doc_freq: 1,
            },
            model: ModelConfig {
                architecture,
                embeddings: None,
                seed: 1,
            },
            base: TrainConfig {
                optimizer: OptimizerConfig::adam(3e-3),
                max_epochs: 30,
                dropout: 0.2,
                selection_z: 1,
                patience: Some(5),
                ..TrainConfig::base()
            },
            finetune: TrainConfig {
                optimizer: OptimizerConfig::adam(1e-3),
                max_epochs: 20,
                dropout: 0.2,
                selection_z: 1,
                patience: Some(5),
                ..TrainConfig::finetune()
            },
            eval: EvalConfig {
                precision_at: vec![1, 3, 5],
                ..EvalConfig::default()
            },
        }
    }
}

/// Paths of an output directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub dir: PathBuf,
}

impl RunLayout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunLayout { dir: dir.into() }
    }

    pub fn vocab(&self) -> PathBuf {
        self.dir.join("vocab.txt")
    }
    pub fn labels(&self) -> PathBuf {
        self.dir.join("labels.tsv")
    }
    pub fn base_checkpoint(&self) -> PathBuf {
        self.dir.join("base.ckpt")
    }
    pub fn base_log(&self) -> PathBuf {
        self.dir.join("base_log.tsv")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
    pub fn finetune_log(&self) -> PathBuf {
        self.dir.join("finetune_log.tsv")
    }
    pub fn database(&self) -> PathBuf {
        self.dir.join("exemplars.db")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.tsv")
    }
    pub fn metrics_json(&self) -> PathBuf {
        self.dir.join("metrics.json")
    }
}

/// Encoded splits and their artifacts.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub labels: LabelSpace,
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
}

pub fn prepare(corpus: &Corpus, config: &VocabConfig) -> Result<Prepared> {
    let vocab = build_vocab(
        corpus.train.iter().map(|d| d.tokens.as_slice()),
        config.max_size,
        config.min_doc_freq,
    )?;
    Ok(Prepared {
        train: encode_all(&corpus.train, &vocab),
        dev: encode_all(&corpus.dev, &vocab),
        test: encode_all(&corpus.test, &vocab),
        labels: corpus.labels.clone(),
        vocab,
    })
}

/// Freshly initialized model for a prepared corpus.
pub fn initial_model(prepared: &Prepared, config: &ModelConfig) -> Result<ModelParams> {
    let dim = config.architecture.embedding_dim;
    let embedding = match &config.embeddings {
        Some(path) => load_embeddings(path, &prepared.vocab, config.seed)?,
        None => random_embeddings(prepared.vocab.len(), dim, config.seed),
    };
    ModelParams::init(&config.architecture, embedding, prepared.labels.len(), config.seed)
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub base_log: Vec<EpochRecord>,
    pub finetune_log: Vec<EpochRecord>,
    pub base: ModelParams,
    pub finetuned: ModelParams,
    pub model_hash: String,
    pub database: ExemplarDatabase,
    pub test_audits: Vec<DocAudit>,
    pub variants: Vec<VariantReport>,
    /// Base-model metrics on the test split.
    pub base_metrics: MetricReport,
}

/// Train, fine-tune, build the exemplar database and evaluate on the test
/// split, writing every artifact into `out`.
pub fn run_pipeline(
    corpus: &Corpus,
    config: &PipelineConfig,
    out: &Path,
    mut progress: impl FnMut(&str),
) -> Result<PipelineOutcome> {
    if corpus.test.is_empty() {
        return Err(Error::MissingSplit(PathBuf::from("test")));
    }
    fs::create_dir_all(out)?;
    let layout = RunLayout::new(out);
    let prepared = prepare(corpus, &config.vocab)?;
    prepared.vocab.save(&layout.vocab())?;
    fs::write(layout.labels(), prepared.labels.to_tsv())?;
    let vocab_hash = prepared.vocab.hash();
    let labels_hash = prepared.labels.hash();

    let params = initial_model(&prepared, &config.model)?;
    let base = train::train(
        params,
        &prepared.train,
        &prepared.dev,
        &prepared.labels,
        &config.base,
        |r| {
            progress(&format!(
                "base epoch {} loss {:.4} dev P@{} {:.4}",
                r.epoch, r.train_loss, config.base.selection_z, r.dev_metric
            ))
        },
    )?;
    fs::write(layout.base_log(), base.log_tsv(config.base.selection_z))?;
    Checkpoint::new(base.params.clone(), vocab_hash.clone(), labels_hash.clone()).save(&layout.base_checkpoint())?;

    let start = train::init_finetune(base.params.clone());
    let tuned = train::train(
        start,
        &prepared.train,
        &prepared.dev,
        &prepared.labels,
        &config.finetune,
        |r| {
            progress(&format!(
                "finetune epoch {} loss {:.4} dev P@{} {:.4}",
                r.epoch, r.train_loss, config.finetune.selection_z, r.dev_metric
            ))
        },
    )?;
    fs::write(layout.finetune_log(), tuned.log_tsv(config.finetune.selection_z))?;
    let model_hash =
        Checkpoint::new(tuned.params.clone(), vocab_hash.clone(), labels_hash).save(&layout.checkpoint())?;

    progress("building exemplar database");
    let database = build_database(
        &tuned.params,
        &prepared.train,
        &ArtifactHashes {
            model: model_hash.clone(),
            vocab: vocab_hash,
        },
    )?;
    database.save(&layout.database())?;

    progress("evaluating");
    let base_run = eval_run(&base.params, &prepared.test, &prepared.labels, &BiasOffset::default())?;
    let base_metrics = report(&base_run, &config.eval.precision_at, config.eval.macro_options)?;
    let test_audits = audit_documents(
        &tuned.params,
        &database,
        &prepared.test,
        &prepared.labels,
        config.eval.absent,
    )?;
    let mut variants = evaluate_variants(&test_audits, &prepared.test, &prepared.labels, &database, &config.eval)?;
    variants.insert(
        0,
        VariantReport {
            name: "base".into(),
            metrics: base_metrics.clone(),
        },
    );
    fs::write(layout.metrics(), variants_table(&variants))?;
    fs::write(layout.metrics_json(), serde_json::to_string_pretty(&variants)?)?;

    Ok(PipelineOutcome {
        base_log: base.log,
        finetune_log: tuned.log,
        base: base.params,
        finetuned: tuned.params,
        model_hash,
        database,
        test_audits,
        variants,
        base_metrics,
    })
}
