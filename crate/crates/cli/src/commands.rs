use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, ensure, Context, Result};
use multiblade::artifacts::{
    predictions_tsv, read_predictions, text_doc_id, ArtifactPaths, Artifacts, DocRef, LabelPrediction,
};
use multiblade::checkpoint::Checkpoint;
use multiblade::corpus::{
    encode_all, generate_synthetic, ingest_caml_format, tokenize, write_caml_format, Corpus, Document, IngestOptions,
    LabelSpace, RawDocument, Vocabulary,
};
use multiblade::exemplar::{build_database, ArtifactHashes};
use multiblade::metrics::{report, EvalRun};
use multiblade::model::BiasOffset;
use multiblade::pipeline::{
    audit_documents, evaluate_variants, initial_model, prepare, variants_table, EvalConfig, RunLayout, VariantReport,
};
use multiblade::report::render_text;
use multiblade::train::{self, EpochRecord};
use multiblade_service::{AppState, PredictResponse, StoredDoc};

use crate::config::CliConfig;
use crate::{AuditArgs, AuditFormat, EvalArgs, PredictArgs, Rule, ServeArgs, Source, TableFormat};

fn ingest(cfg: &CliConfig) -> Result<Corpus> {
    let dir = &cfg.data.dir;
    ingest_caml_format(
        dir,
        IngestOptions {
            max_len: cfg.data.max_len,
        },
    )
    .with_context(|| format!("reading corpus from {}", dir.display()))
}

/// The corpus must use the label order the model was trained with.
fn check_labels(corpus: &Corpus, labels: &LabelSpace) -> Result<()> {
    ensure!(
        corpus.labels.hash() == labels.hash(),
        "label space of the corpus ({} labels, hash {}) does not match the run ({} labels, hash {})",
        corpus.labels.len(),
        corpus.labels.hash(),
        labels.len(),
        labels.hash()
    );
    Ok(())
}

fn load_labels(path: &Path) -> Result<LabelSpace> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(LabelSpace::from_tsv(&text, path)?)
}

fn load_artifacts(layout: &RunLayout, with_database: bool) -> Result<Artifacts> {
    Artifacts::load(&ArtifactPaths::from_layout(layout, with_database))
        .with_context(|| format!("loading model from {}", layout.dir.display()))
}

fn epoch_line(phase: &str, z: usize) -> impl FnMut(&EpochRecord) + '_ {
    move |r| {
        eprintln!(
            "{phase} epoch {:>3}  loss {:.5}  dev P@{z} {:.4}{}",
            r.epoch,
            r.train_loss,
            r.dev_metric,
            if r.improved { "  *" } else { "" }
        )
    }
}

pub fn synth(cfg: &CliConfig, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut spec = cfg.synth.clone();
    if let Some(s) = seed {
        spec.seed = s;
    }
    let out = out.unwrap_or_else(|| cfg.data.dir.clone());
    let s = generate_synthetic(&spec)?;
    write_caml_format(&out, &s.corpus)?;
    fs::write(out.join("trigger_map.tsv"), s.trigger_map_tsv())?;
    eprintln!(
        "wrote {} train, {} dev, {} test documents with {} labels to {}",
        s.corpus.train.len(),
        s.corpus.dev.len(),
        s.corpus.test.len(),
        s.corpus.labels.len(),
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &mut CliConfig, epochs: Option<usize>, seed: Option<u64>) -> Result<()> {
    if let Some(e) = epochs {
        cfg.base.max_epochs = e;
    }
    if let Some(s) = seed {
        cfg.base.seed = s;
        cfg.model.seed = s;
    }
    let corpus = ingest(cfg)?;
    let layout = RunLayout::new(&cfg.run_dir);
    fs::create_dir_all(&layout.dir)?;
    fs::write(layout.dir.join("config.toml"), cfg.to_toml()?)?;
    let prepared = prepare(&corpus, &cfg.vocab)?;
    prepared.vocab.save(&layout.vocab())?;
    fs::write(layout.labels(), prepared.labels.to_tsv())?;
    eprintln!(
        "{} train / {} dev documents, vocabulary {}, {} labels",
        prepared.train.len(),
        prepared.dev.len(),
        prepared.vocab.len(),
        prepared.labels.len()
    );
    let params = initial_model(&prepared, &cfg.model)?;
    let z = cfg.base.selection_z;
    let out = train::train(
        params,
        &prepared.train,
        &prepared.dev,
        &prepared.labels,
        &cfg.base,
        epoch_line("base", z),
    )?;
    fs::write(layout.base_log(), out.log_tsv(z))?;
    let hash =
        Checkpoint::new(out.params, prepared.vocab.hash(), prepared.labels.hash()).save(&layout.base_checkpoint())?;
    println!(
        "base model {} (epoch {}, dev P@{z} {:.4}) sha256 {hash}",
        layout.base_checkpoint().display(),
        out.best_epoch,
        out.best_metric
    );
    Ok(())
}

pub fn finetune(cfg: &mut CliConfig, epochs: Option<usize>, seed: Option<u64>) -> Result<()> {
    if let Some(e) = epochs {
        cfg.finetune.max_epochs = e;
    }
    if let Some(s) = seed {
        cfg.finetune.seed = s;
    }
    let layout = RunLayout::new(&cfg.run_dir);
    let vocab = Vocabulary::load(&layout.vocab())?;
    let labels = load_labels(&layout.labels())?;
    let (ckpt, _) = Checkpoint::load(&layout.base_checkpoint())
        .with_context(|| format!("loading {}", layout.base_checkpoint().display()))?;
    ckpt.verify(&vocab.hash(), &labels.hash())?;
    let corpus = ingest(cfg)?;
    check_labels(&corpus, &labels)?;
    let train_docs = encode_all(&corpus.train, &vocab);
    let dev_docs = encode_all(&corpus.dev, &vocab);
    let z = cfg.finetune.selection_z;
    let start = train::init_finetune(ckpt.params);
    let out = train::train(
        start,
        &train_docs,
        &dev_docs,
        &labels,
        &cfg.finetune,
        epoch_line("finetune", z),
    )?;
    fs::write(layout.finetune_log(), out.log_tsv(z))?;
    let hash = Checkpoint::new(out.params, vocab.hash(), labels.hash()).save(&layout.checkpoint())?;
    println!(
        "fine-tuned model {} (epoch {}, dev P@{z} {:.4}) sha256 {hash}",
        layout.checkpoint().display(),
        out.best_epoch,
        out.best_metric
    );
    Ok(())
}

pub fn build_db(cfg: &CliConfig) -> Result<()> {
    let layout = RunLayout::new(&cfg.run_dir);
    let a = load_artifacts(&layout, false)?;
    let corpus = ingest(cfg)?;
    check_labels(&corpus, &a.labels)?;
    let docs = encode_all(&corpus.train, &a.vocab);
    let db = build_database(
        &a.params,
        &docs,
        &ArtifactHashes {
            model: a.model_hash.clone(),
            vocab: a.vocab.hash(),
        },
    )?;
    db.save(&layout.database())?;
    println!(
        "exemplar database {}: {} records of dimension {}",
        layout.database().display(),
        db.len(),
        db.dim()
    );
    Ok(())
}

/// Documents named by a source, with gold labels for corpus splits.
struct Input {
    docs: Vec<RawDocument>,
    has_gold: bool,
}

fn read_input(cfg: &CliConfig, source: &Source, labels: &LabelSpace) -> Result<Input> {
    let max_len = cfg.data.max_len;
    let doc = |doc_id: String, text: &str| RawDocument {
        doc_id,
        tokens: tokenize(text, max_len),
        labels: BTreeSet::new(),
    };
    if let Some(split) = source.split {
        let corpus = ingest(cfg)?;
        check_labels(&corpus, labels)?;
        return Ok(Input {
            docs: corpus.split(split).to_vec(),
            has_gold: true,
        });
    }
    let docs = if let Some(text) = &source.text {
        vec![doc(text_doc_id(text), text)]
    } else {
        let path = source.input.as_ref().expect("clap requires one source");
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| match l.split_once('\t') {
                Some((id, body)) => doc(id.to_string(), body),
                None => doc(text_doc_id(l), l),
            })
            .collect()
    };
    if let Some(d) = docs.iter().find(|d| d.tokens.is_empty()) {
        bail!("document {} has no usable tokens", d.doc_id);
    }
    Ok(Input { docs, has_gold: false })
}

fn write_or_print(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn finite(name: &str, v: f64) -> Result<f64> {
    ensure!(v.is_finite(), "{name} must be finite, got {v}");
    Ok(v)
}

pub fn predict(cfg: &CliConfig, args: PredictArgs) -> Result<()> {
    let layout = RunLayout::new(&cfg.run_dir);
    let a = load_artifacts(&layout, false)?;
    let offset = BiasOffset::global(finite("offset", args.offset)?);
    let input = read_input(cfg, &args.source, &a.labels)?;
    let docs = encode_all(&input.docs, &a.vocab);
    let ranked: Vec<Vec<LabelPrediction>> = a
        .predict_documents(&docs, &offset)?
        .into_iter()
        .map(|mut r| {
            r.truncate(args.top_k.unwrap_or(usize::MAX));
            r
        })
        .collect();
    let text = match args.format {
        TableFormat::Tsv => predictions_tsv(docs.iter().zip(&ranked).map(|(d, r)| (d.doc_id.as_str(), r.as_slice()))),
        TableFormat::Json => {
            let mut out = String::new();
            for (d, labels) in docs.iter().zip(ranked) {
                let resp = PredictResponse {
                    model_hash: a.model_hash.clone(),
                    doc_id: d.doc_id.clone(),
                    offset: offset.global,
                    labels,
                };
                writeln!(out, "{}", serde_json::to_string(&resp)?)?;
            }
            out
        }
    };
    write_or_print(args.output.as_deref(), &text)
}

pub fn audit(cfg: &CliConfig, args: AuditArgs) -> Result<()> {
    let layout = RunLayout::new(&cfg.run_dir);
    let a = load_artifacts(&layout, true)?;
    let offset = BiasOffset::global(finite("offset", args.offset)?);
    let tau = finite("tau", args.tau.unwrap_or(cfg.serve.tau))?;
    let input = read_input(cfg, &args.source, &a.labels)?;
    let wanted: Vec<usize> = args
        .labels
        .iter()
        .map(|c| a.label_id(c))
        .collect::<multiblade::Result<_>>()?;
    let mut docs: Vec<&RawDocument> = input.docs.iter().collect();
    if !args.docs.is_empty() {
        for id in &args.docs {
            ensure!(docs.iter().any(|d| &d.doc_id == id), "unknown document {id:?}");
        }
        docs.retain(|d| args.docs.contains(&d.doc_id));
    }
    let mut out = String::new();
    for d in docs {
        let analysis = a.analyze(&d.tokens, &offset)?;
        let labels: Vec<usize> = if wanted.is_empty() {
            (0..a.labels.len())
                .filter(|&c| analysis.inference.predicted[c])
                .collect()
        } else {
            wanted.clone()
        };
        let doc_ref = DocRef {
            doc_id: &d.doc_id,
            tokens: &d.tokens,
            gold: input.has_gold.then_some(&d.labels),
        };
        for c in labels {
            if !analysis.inference.predicted[c] && !args.force {
                writeln!(
                    out,
                    "{}\t{}\tnot predicted (use --force to audit)",
                    d.doc_id,
                    a.labels.code(c)
                )?;
                continue;
            }
            let p = a.audit(doc_ref, c, &offset, tau, cfg.eval.absent)?;
            match args.format {
                AuditFormat::Text => writeln!(out, "{}", render_text(&p))?,
                AuditFormat::Json => writeln!(out, "{}", serde_json::to_string(&p)?)?,
            }
        }
    }
    print!("{out}");
    Ok(())
}

/// The `+ExADR+t` row as precision/recall pairs per threshold.
fn threshold_grid(model: &VariantReport, rows: &[(f64, &VariantReport)]) -> String {
    let pr = |v: &VariantReport| format!("{:.3}/{:.3}", v.metrics.f1.micro.precision, v.metrics.f1.micro.recall);
    let mut out = String::from("rule\tmodel");
    for (tau, _) in rows {
        let _ = write!(out, "\t{tau}");
    }
    let _ = write!(out, "\n+ExADR+t\t{}", pr(model));
    for (_, v) in rows {
        let _ = write!(out, "\t{}", pr(v));
    }
    out.push('\n');
    out
}

fn predictions_report(
    cfg: &CliConfig,
    labels: &LabelSpace,
    split: &[RawDocument],
    path: &Path,
) -> Result<VariantReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = read_predictions(&text, labels, path)?;
    let by_id: HashMap<&str, usize> = rows.iter().enumerate().map(|(i, r)| (r.doc_id.as_str(), i)).collect();
    ensure!(
        rows.len() == split.len(),
        "{} lists {} documents, the split has {}",
        path.display(),
        rows.len(),
        split.len()
    );
    let c = labels.len();
    let mut scores = Vec::with_capacity(split.len());
    let mut predicted = Vec::with_capacity(split.len());
    let mut gold = Vec::with_capacity(split.len());
    for d in split {
        let i = *by_id
            .get(d.doc_id.as_str())
            .ok_or_else(|| anyhow!("{} has no predictions for {}", path.display(), d.doc_id))?;
        scores.push(rows[i].scores.clone());
        predicted.push(rows[i].predicted.clone());
        gold.push((0..c).map(|l| d.labels.contains(&l)).collect());
    }
    let run = EvalRun::new(scores, predicted, gold, labels.unseen_mask())?;
    Ok(VariantReport {
        name: "model".into(),
        metrics: report(&run, &cfg.eval.precision_at, cfg.eval.macro_options)?,
    })
}

pub fn eval(cfg: &CliConfig, args: EvalArgs) -> Result<()> {
    let layout = RunLayout::new(&cfg.run_dir);
    let taus = if args.taus.is_empty() {
        cfg.eval.taus.clone()
    } else {
        args.taus.clone()
    };
    for &t in &taus {
        finite("tau", t)?;
    }
    let corpus = ingest(cfg)?;
    let split = corpus.split(args.split);
    ensure!(!split.is_empty(), "split {} is empty", args.split.name());

    if let Some(path) = &args.predictions {
        ensure!(
            args.rules.iter().all(|&r| r == Rule::Model),
            "a prediction file can only be scored with --rules model"
        );
        let labels = load_labels(&layout.labels())?;
        check_labels(&corpus, &labels)?;
        let row = predictions_report(cfg, &labels, split, path)?;
        return write_or_print(args.output.as_deref(), &variants_table(&[row]));
    }

    let needs_db = args.rules.iter().any(|&r| r != Rule::Model);
    let a = load_artifacts(&layout, needs_db)?;
    check_labels(&corpus, &a.labels)?;
    let docs: Vec<Document> = encode_all(split, &a.vocab);
    let eval_cfg = EvalConfig {
        taus: taus.clone(),
        ..cfg.eval.clone()
    };
    let variants = match &a.database {
        Some(db) => {
            let audited = audit_documents(&a.params, db, &docs, &a.labels, cfg.eval.absent)?;
            evaluate_variants(&audited, &docs, &a.labels, db, &eval_cfg)?
        }
        None => {
            let run = multiblade::pipeline::eval_run(&a.params, &docs, &a.labels, &BiasOffset::default())?;
            vec![VariantReport {
                name: "model".into(),
                metrics: report(&run, &cfg.eval.precision_at, cfg.eval.macro_options)?,
            }]
        }
    };
    let find = |name: &str| variants.iter().find(|v| v.name == name).expect("variant present");
    let tau_rows =
        || -> Vec<(f64, &VariantReport)> { taus.iter().map(|&t| (t, find(&format!("+ExADR+t{t}")))).collect() };

    let text = if args.rules == [Rule::ExadrT] {
        threshold_grid(find("model"), &tau_rows())
    } else {
        let mut rows = Vec::new();
        for rule in &args.rules {
            match rule {
                Rule::Model => rows.push(find("model").clone()),
                Rule::Exa => rows.push(find("+ExA").clone()),
                Rule::Onlydb => rows.push(find("+onlyDB").clone()),
                Rule::Exadr => rows.push(find("+ExADR").clone()),
                Rule::ExadrT => rows.extend(tau_rows().into_iter().map(|(_, v)| v.clone())),
            }
        }
        variants_table(&rows)
    };
    write_or_print(args.output.as_deref(), &text)
}

pub fn serve(cfg: &mut CliConfig, args: ServeArgs) -> Result<()> {
    if let Some(h) = args.host {
        cfg.serve.host = h;
    }
    if let Some(p) = args.port {
        cfg.serve.port = p;
    }
    if args.annotations.is_some() {
        cfg.serve.annotations = args.annotations;
    }
    let layout = RunLayout::new(&cfg.run_dir);
    let with_db = layout.database().is_file();
    let a = load_artifacts(&layout, with_db)?;
    if !with_db {
        eprintln!(
            "no exemplar database in {}; audits will return 409",
            layout.dir.display()
        );
    }
    let preload = match args.split {
        Some(split) => {
            let corpus = ingest(cfg)?;
            check_labels(&corpus, &a.labels)?;
            corpus.split(split).to_vec()
        }
        None => Vec::new(),
    };
    let state = AppState::new(Some(a), cfg.serve.clone())?;
    for d in preload {
        state.insert_doc(
            d.doc_id,
            StoredDoc {
                tokens: d.tokens,
                gold: Some(d.labels),
            },
        );
    }
    let addr: SocketAddr = format!("{}:{}", cfg.serve.host, cfg.serve.port)
        .parse()
        .with_context(|| format!("bad listen address {}:{}", cfg.serve.host, cfg.serve.port))?;
    eprintln!("listening on http://{addr}");
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(multiblade_service::serve(Arc::new(state), addr))?;
    Ok(())
}
