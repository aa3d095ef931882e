//! Base training and min/max fine-tuning with dev-set model selection.

mod optim;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, LabelSpace};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};
use crate::metrics::precision_at_z;
use crate::model::{backward, forward, BiasOffset, ForwardOptions, Gradients, ModelParams};
use crate::netops::Mode;
use crate::pipeline::score_documents;

pub use optim::{Optimizer, OptimizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Base,
    Finetune,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Restrict the loss to the most frequent training labels for the first
/// `epochs` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Warmup {
    pub top_n: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub optimizer: OptimizerConfig,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Dev selection metric is P@z.
    pub selection_z: usize,
    #[serde(default)]
    pub warmup: Option<Warmup>,
    /// Stop after this many epochs without dev improvement.
    #[serde(default)]
    pub patience: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub loss: LossConfig,
}

impl TrainConfig {
    /// Adadelta, dropout 0.5, P@5 selection.
    pub fn base() -> Self {
        TrainConfig {
            phase: Phase::Base,
            optimizer: OptimizerConfig::adadelta(),
            dropout: 0.5,
            batch_size: 16,
            max_epochs: 200,
            selection_z: 5,
            warmup: None,
            patience: Some(10),
            seed: 1,
            precision: Precision::F64,
            loss: LossConfig::base(),
        }
    }

    /// Adam at 1e-4, dropout 0.6, top-1000 warmup for 30 epochs, P@8 selection.
    pub fn base_full_set() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::adam(1e-4),
            dropout: 0.6,
            selection_z: 8,
            warmup: Some(Warmup {
                top_n: 1000,
                epochs: 30,
            }),
            ..TrainConfig::base()
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            phase: Phase::Finetune,
            loss: LossConfig::finetune(),
            ..TrainConfig::base()
        }
    }

    /// Fine-tuning on the full label set restricts token losses to the 1000
    /// labels with the highest untied logits.
    pub fn finetune_full_set() -> Self {
        TrainConfig {
            phase: Phase::Finetune,
            warmup: None,
            loss: LossConfig {
                restrict_top_k: Some(1000),
                ..LossConfig::finetune()
            },
            ..TrainConfig::base_full_set()
        }
    }

    pub fn validate(&self, num_labels: usize) -> Result<()> {
        self.loss.validate()?;
        if self.precision != Precision::F64 {
            return Err(Error::Config("only 64-bit precision is supported".into()));
        }
        match self.phase {
            Phase::Base if self.loss.is_finetune() => {
                return Err(Error::Config("base phase takes the bce loss only".into()))
            }
            Phase::Finetune if !self.loss.is_finetune() => {
                return Err(Error::Config("finetune phase needs the min/max losses".into()))
            }
            _ => {}
        }
        if self.selection_z == 0 || self.selection_z > num_labels {
            return Err(Error::Config(format!(
                "selection_z = {} must lie in 1..={num_labels}",
                self.selection_z
            )));
        }
        if let Some(w) = self.warmup {
            if w.top_n == 0 || w.top_n > num_labels {
                return Err(Error::Config(format!(
                    "warmup top_n = {} must lie in 1..={num_labels}",
                    w.top_n
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be >= 1 when set".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub log: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// Tab-separated per-epoch log.
    pub fn log_tsv(&self, z: usize) -> String {
        let mut out = format!("epoch\ttrain_loss\tdev_p@{z}\timproved\n");
        for r in &self.log {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{}",
                r.epoch, r.train_loss, r.dev_metric, r.improved
            );
        }
        out
    }
}

/// Copy the tied output layer into a fresh untied layer.
pub fn init_finetune(mut params: ModelParams) -> ModelParams {
    params.init_finetune();
    params
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Dropout stream for one document in one epoch.
fn doc_seed(seed: u64, epoch: usize, doc: usize) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(epoch as u64)) ^ doc as u64)
}

/// Labels the loss is evaluated on for one batch.
#[derive(Clone, Debug)]
pub enum LabelScope {
    All,
    /// Fixed subset, sorted.
    Subset(Vec<usize>),
    /// Top `k` by untied logit per document, plus gold if requested.
    TopK {
        k: usize,
        include_gold: bool,
    },
}

/// Per-document settings shared by a batch.
#[derive(Clone, Debug)]
pub struct StepContext<'a> {
    pub loss: &'a LossConfig,
    pub scope: LabelScope,
    pub dropout: f64,
    pub pad_to: usize,
}

/// Loss and gradient of one document. `dropout_seed` drives the mask.
pub fn document_gradient(
    params: &ModelParams,
    doc: &Document,
    ctx: &StepContext<'_>,
    dropout_seed: u64,
) -> Result<(f64, Gradients)> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let trace = forward(
        params,
        &doc.token_ids,
        Mode::Train(&mut rng),
        ForwardOptions {
            dropout: ctx.dropout,
            pad_to: ctx.pad_to,
        },
    )?;
    let gold = doc.gold_vector(params.num_labels());
    let restricted;
    let labels = match &ctx.scope {
        LabelScope::All => None,
        LabelScope::Subset(s) => Some(s.as_slice()),
        LabelScope::TopK { k, include_gold } => {
            let logits = trace.untied_logits.as_ref().ok_or(Error::MissingUntiedLayer)?;
            restricted = losses::restrict_labels(logits, &gold, *k, *include_gold);
            Some(restricted.as_slice())
        }
    };
    let out = losses::evaluate(&trace, params, &gold, ctx.loss, labels)?;
    let mut grads = Gradients::zeros_like(params);
    backward(&trace, params, &out.upstream, &mut grads)?;
    Ok((out.value, grads))
}

/// Mean loss and gradient over a batch, reduced in document order.
pub fn batch_gradient(
    params: &ModelParams,
    docs: &[&Document],
    ctx: &StepContext<'_>,
    seeds: &[u64],
) -> Result<(f64, Gradients)> {
    let per_doc: Vec<(f64, Gradients)> = docs
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(doc, &seed)| document_gradient(params, doc, ctx, seed))
        .collect::<Result<_>>()?;
    let mut total = Gradients::zeros_like(params);
    let mut loss = 0.0;
    for (l, g) in &per_doc {
        loss += l;
        total.add(g);
    }
    let scale = 1.0 / docs.len().max(1) as f64;
    total.scale(scale);
    Ok((loss * scale, total))
}

/// Dev P@z under the phase's inference rule: `o_c` for base models and
/// `o'_c + s_max` once fine-tuned.
pub fn dev_metric(params: &ModelParams, dev: &[Document], z: usize) -> Result<f64> {
    let inferences = score_documents(params, dev, &BiasOffset::default())?;
    let scores: Vec<Vec<f64>> = inferences.into_iter().map(|i| i.scores).collect();
    let gold: Vec<Vec<bool>> = dev.iter().map(|d| d.gold_vector(params.num_labels())).collect();
    precision_at_z(&scores, &gold, z, false)
}

fn norms_summary(params: &ModelParams) -> String {
    params
        .norms()
        .iter()
        .map(|(name, n)| format!("{name}={n:.4e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Train from `params` and return the best dev checkpoint. `on_epoch` sees
/// every epoch record as it is produced.
pub fn train(
    params: ModelParams,
    train_docs: &[Document],
    dev_docs: &[Document],
    labels: &LabelSpace,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate(labels.len())?;
    if params.num_labels() != labels.len() {
        return Err(Error::Shape(format!(
            "model has {} labels, label space {}",
            params.num_labels(),
            labels.len()
        )));
    }
    if train_docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if dev_docs.is_empty() {
        return Err(Error::MissingSplit("dev".into()));
    }
    match config.phase {
        Phase::Base if params.is_finetuned() => {
            return Err(Error::Config(
                "base training expects a model without the untied layer".into(),
            ))
        }
        Phase::Finetune if !params.is_finetuned() => return Err(Error::MissingUntiedLayer),
        _ => {}
    }

    let warmup_labels: Option<Vec<usize>> = config.warmup.map(|w| {
        let mut top: Vec<usize> = labels.by_frequency().into_iter().take(w.top_n).collect();
        top.sort_unstable();
        top
    });
    let mut params = params;
    let mut optimizer = Optimizer::new(config.optimizer.clone(), &params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_docs.len()).collect();

    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut log = Vec::new();
    let mut stale = 0usize;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let scope = match (&config.warmup, &warmup_labels) {
            (Some(w), Some(top)) if epoch <= w.epochs => LabelScope::Subset(top.clone()),
            _ => match config.loss.restrict_top_k {
                Some(k) => LabelScope::TopK {
                    k,
                    include_gold: config.loss.restrict_include_gold,
                },
                None => LabelScope::All,
            },
        };
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let docs: Vec<&Document> = chunk.iter().map(|&i| &train_docs[i]).collect();
            let seeds: Vec<u64> = chunk.iter().map(|&i| doc_seed(config.seed, epoch, i)).collect();
            let ctx = StepContext {
                loss: &config.loss,
                scope: scope.clone(),
                dropout: config.dropout,
                pad_to: docs.iter().map(|d| d.len()).max().unwrap_or(0),
            };
            let (loss, grads) = batch_gradient(&params, &docs, &ctx, &seeds)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} at epoch {epoch}, batch {}; parameter norms: {}",
                    b + 1,
                    norms_summary(&params)
                )));
            }
            optimizer.step(&mut params, &grads)?;
            epoch_loss += loss * docs.len() as f64;
        }
        let metric = dev_metric(&params, dev_docs, config.selection_z)?;
        let improved = best.as_ref().is_none_or(|(_, m, _)| metric > *m);
        if improved {
            best = Some((epoch, metric, params.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train_docs.len() as f64,
            dev_metric: metric,
            improved,
        };
        on_epoch(&record);
        log.push(record);
        if config.patience.is_some_and(|p| stale >= p) {
            break;
        }
    }
    let (best_epoch, best_metric, params) = match best {
        Some(b) => b,
        None => (0, dev_metric(&params, dev_docs, config.selection_z)?, params),
    };
    Ok(TrainOutcome {
        params,
        best_epoch,
        best_metric,
        log,
    })
}

pub fn train_base(
    params: ModelParams,
    train_docs: &[Document],
    dev_docs: &[Document],
    labels: &LabelSpace,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if config.phase != Phase::Base {
        return Err(Error::Config("train_base needs phase = base".into()));
    }
    train(params, train_docs, dev_docs, labels, config, |_| {})
}

pub fn train_finetune(
    params: ModelParams,
    train_docs: &[Document],
    dev_docs: &[Document],
    labels: &LabelSpace,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if config.phase != Phase::Finetune {
        return Err(Error::Config("train_finetune needs phase = finetune".into()));
    }
    train(params, train_docs, dev_docs, labels, config, |_| {})
}
