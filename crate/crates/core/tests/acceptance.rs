//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs under `cargo test` as a plain binary.

mod common;

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{random_doc, random_model, tiny_arch};
use multiblade::corpus::{
    generate_synthetic, ingest_caml_format, IngestOptions, Split, SyntheticCorpus, SyntheticSpec,
};
use multiblade::exemplar::{
    retrieve, softmax_distances, token_vector, AbsentPolicy, DatabaseHeader, ExemplarDatabase, RecordMeta,
};
use multiblade::losses::{evaluate, LossConfig};
use multiblade::metrics::{auc, micro_macro_f1, precision_at_z, MacroOptions};
use multiblade::model::{
    backward, forward, forward_eval, label_scores, Architecture, FilterSpec, ForwardOptions, Gradients, ModelParams,
};
use multiblade::netops::{check_gradients, Mode};
use multiblade::pipeline::{
    prepare, run_pipeline, trigger_localization, PipelineConfig, PipelineOutcome, RunLayout, VariantReport,
};
use multiblade::train::init_finetune;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn fail<T>(msg: impl Into<String>) -> Result<T, String> {
    Err(msg.into())
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let t = start.elapsed();
    if t > limit {
        return fail(format!(
            "{what} took {:.2}s, limit {:.0}s",
            t.as_secs_f64(),
            limit.as_secs_f64()
        ));
    }
    Ok(())
}

// ---- decomposition

/// Winning window `(start, width)` of every filter, by brute force.
fn oracle_windows(p: &ModelParams, ids: &[u32]) -> Vec<(usize, usize, f64)> {
    let d = p.dim();
    let n = ids.len().max(p.max_width());
    let mut x = vec![vec![0.0; d]; n];
    for (i, &id) in ids.iter().enumerate() {
        x[i] = p.embedding.row(id as usize).to_vec();
    }
    let mut out = Vec::new();
    for bank in &p.banks {
        let k = bank.width;
        for m in 0..bank.count() {
            let w = bank.weight.row(m);
            let mut best = (0usize, f64::NEG_INFINITY);
            for pos in 0..=(n - k) {
                let mut h = bank.bias.data()[m];
                for kk in 0..k {
                    for dd in 0..d {
                        h += w[kk * d + dd] * x[pos + kk][dd];
                    }
                }
                if h > best.1 {
                    best = (pos, h);
                }
            }
            out.push((best.0, k, best.1.max(0.0)));
        }
    }
    out
}

fn decomposition() -> Check {
    let start = Instant::now();
    let arch = Architecture {
        embedding_dim: 8,
        filters: vec![FilterSpec { width: 1, count: 4 }, FilterSpec { width: 3, count: 4 }],
    };
    let models = 25;
    let mut worst = 0.0f64;
    for seed in 0..models {
        let p = random_model(&arch, 40, 5, seed, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let ids = random_doc(30, 40, 0, &mut rng);
        let trace = forward_eval(&p, &ids).map_err(|e| e.to_string())?;
        let windows = oracle_windows(&p, &ids);
        let c_count = p.num_labels();
        for c in 0..c_count {
            for (row, sign) in [(c, true), (c_count + c, false)] {
                for (m, &(s0, k, g)) in windows.iter().enumerate() {
                    // isolate filter m in this row
                    let mut q = p.clone();
                    let keep = q.tied.weight.get2(row, m);
                    q.tied.weight.row_mut(row).fill(0.0);
                    q.tied.weight.row_mut(row)[m] = keep;
                    let s = label_scores(&trace, &q, c, true).map_err(|e| e.to_string())?;
                    let (scores, bias) = if sign {
                        (&s.on, q.tied.bias.data()[row])
                    } else {
                        (&s.off, q.tied.bias.data()[row])
                    };
                    let total: f64 = scores.iter().map(|v| v - bias).sum();
                    let expected = k as f64 * keep * g;
                    worst = worst.max((total - expected).abs());
                    for (n, v) in scores.iter().enumerate() {
                        let inside = n >= s0 && n < s0 + k;
                        if !inside && v - bias != 0.0 {
                            return fail(format!(
                                "seed {seed} row {row} filter {m}: token {n} outside the window"
                            ));
                        }
                    }
                }
            }
        }
    }
    if worst > 1e-9 {
        return fail(format!("max |sum - K W g| = {worst:e}"));
    }
    within(start, Duration::from_secs(5), "decomposition")?;
    Ok(format!(
        "{models} models, max |sum_n s - K W g| = {worst:.1e} ({:.2}s)",
        start.elapsed().as_secs_f64()
    ))
}

// ---- gradients

fn loss_value(params: &ModelParams, ids: &[u32], gold: &[bool], cfg: &LossConfig, seed: Option<u64>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
    let (mode, rate) = match seed {
        Some(_) => (Mode::Train(&mut rng), 0.3),
        None => (Mode::Eval, 0.0),
    };
    let mut pinned = params.clone();
    pinned.embedding.row_mut(0).fill(0.0);
    let trace = forward(
        &pinned,
        ids,
        mode,
        ForwardOptions {
            dropout: rate,
            pad_to: 0,
        },
    )
    .unwrap();
    evaluate(&trace, &pinned, gold, cfg, None).unwrap().value
}

fn loss_grad(params: &ModelParams, ids: &[u32], gold: &[bool], cfg: &LossConfig, seed: Option<u64>) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
    let (mode, rate) = match seed {
        Some(_) => (Mode::Train(&mut rng), 0.3),
        None => (Mode::Eval, 0.0),
    };
    let trace = forward(
        params,
        ids,
        mode,
        ForwardOptions {
            dropout: rate,
            pad_to: 0,
        },
    )
    .unwrap();
    let out = evaluate(&trace, params, gold, cfg, None).unwrap();
    let mut grads = Gradients::zeros_like(params);
    backward(&trace, params, &out.upstream, &mut grads).unwrap();
    grads.to_dense(params)
}

fn gradients() -> Check {
    let start = Instant::now();
    let only = |bce, min, max, combined| LossConfig {
        bce,
        min,
        max,
        combined,
        ..LossConfig::base()
    };
    let losses = [
        ("bce", only(true, false, false, false)),
        ("min", only(false, true, false, false)),
        ("max", only(false, false, true, false)),
        ("combined", only(false, false, false, true)),
    ];
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let ids = random_doc(10, 7, (seed % 3) as usize, &mut rng);
        let gold: Vec<bool> = (0..3).map(|_| rng.gen_bool(0.5)).collect();
        let dropout = (seed % 2 == 1).then_some(seed);
        for (name, cfg) in &losses {
            let mut p = random_model(&tiny_arch(), 7, 3, 40 + seed, true);
            let g = loss_grad(&p, &ids, &gold, cfg, dropout);
            let r = check_gradients(&mut p, &g, 1e-5, |q| loss_value(q, &ids, &gold, cfg, dropout));
            checked += r.checked;
            if r.max_rel_error >= 1e-4 {
                return fail(format!(
                    "{name} seed {seed}: rel err {:e} at {:?}",
                    r.max_rel_error, r.worst
                ));
            }
            worst = worst.max(r.max_rel_error);
        }
    }
    within(start, Duration::from_secs(60), "gradient suite")?;
    Ok(format!(
        "4 losses x 8 instances, {checked} entries, max rel err {worst:.1e} ({:.2}s)",
        start.elapsed().as_secs_f64()
    ))
}

// ---- nearest neighbours

const NN_LABELS: usize = 5;
const NN_DIM: usize = 6;

/// Coarse-grid keys so that distance ties occur; label 4 has TP records only.
fn nn_database(seed: u64) -> ExemplarDatabase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut records, mut keys, mut used) = (Vec::new(), Vec::new(), HashSet::new());
    while records.len() < 200 {
        let doc = rng.gen_range(0..70);
        let label = rng.gen_range(0..NN_LABELS);
        if !used.insert((doc, label)) {
            continue;
        }
        let (predicted, gold) = match (label, rng.gen_range(0..3)) {
            (4, _) | (_, 0) => (true, true),
            (_, 1) => (false, true),
            _ => (true, false),
        };
        records.push(RecordMeta {
            doc_id: format!("d{doc:03}"),
            token_index: 0,
            label,
            predicted,
            gold,
            database_score: rng.gen_range(-3.0..3.0),
            snippet: String::new(),
            snippet_focus: 0,
        });
        keys.extend((0..NN_DIM).map(|_| rng.gen_range(0..3) as f64));
    }
    let header = DatabaseHeader {
        dim: NN_DIM,
        num_labels: NN_LABELS,
        model_hash: "m".into(),
        vocab_hash: "v".into(),
        count: records.len(),
    };
    ExemplarDatabase::new(header, records, keys).unwrap()
}

fn nn_scan(db: &ExemplarDatabase, q: &[f64], label: usize) -> [Option<(usize, f64)>; 4] {
    let with_label: BTreeSet<&str> = db
        .records()
        .iter()
        .filter(|r| r.label == label)
        .map(|r| r.doc_id.as_str())
        .collect();
    let mut best: [Option<(usize, f64)>; 4] = [None; 4];
    for (i, r) in db.records().iter().enumerate() {
        let class = match (r.label == label, r.predicted, r.gold) {
            (true, true, true) => 0,
            (true, false, true) => 1,
            (true, true, false) => 2,
            (false, _, _) if !with_label.contains(r.doc_id.as_str()) => 3,
            _ => continue,
        };
        let d2: f64 = db.key(i).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
        let better = best[class].is_none_or(|(j, dj)| {
            let rj = db.record(j);
            d2 < dj || (d2 == dj && (r.doc_id.as_str(), r.label) < (rj.doc_id.as_str(), rj.label))
        });
        if better {
            best[class] = Some((i, d2));
        }
    }
    best
}

fn nn_oracle() -> Check {
    let start = Instant::now();
    let (mut absent, mut compared) = (0, 0);
    for seed in 0..3 {
        let db = nn_database(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(90 + seed);
        for qi in 0..50 {
            let q: Vec<f64> = (0..NN_DIM).map(|_| rng.gen_range(0..3) as f64).collect();
            for label in 0..NN_LABELS {
                let got = retrieve(&q, label, &db).map_err(|e| e.to_string())?;
                let want = nn_scan(&db, &q, label);
                for k in 0..4 {
                    match (got[k], want[k]) {
                        (None, None) => absent += 1,
                        (Some(n), Some((i, d2))) if n.record == i && (n.distance - d2.sqrt()).abs() <= 1e-9 => {
                            compared += 1
                        }
                        other => return fail(format!("db {seed} query {qi} label {label} class {k}: {other:?}")),
                    }
                }
            }
        }
    }
    if absent == 0 {
        return fail("no absent-class case was exercised");
    }
    within(start, Duration::from_secs(10), "nearest-neighbour oracle")?;
    Ok(format!(
        "3 databases x 50 queries x 5 labels: {compared} matches, {absent} absent classes ({:.2}s)",
        start.elapsed().as_secs_f64()
    ))
}

// ---- softmax

fn softmax(run: &PipelineOutcome) -> Check {
    let mut audits = 0;
    for a in run.test_audits.iter().flat_map(|d| &d.audits) {
        let s: f64 = a.probs.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return fail(format!("audit of label {} sums to {s}", a.label));
        }
        audits += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for policy in [AbsentPolicy::Exclude, AbsentPolicy::LargeDistance] {
        for _ in 0..1000 {
            let d: [Option<f64>; 4] = std::array::from_fn(|_| rng.gen_bool(0.8).then(|| rng.gen_range(0.0..40.0)));
            if d.iter().all(Option::is_none) && policy == AbsentPolicy::Exclude {
                continue;
            }
            let s: f64 = softmax_distances(d, policy).iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return fail(format!("{d:?} sums to {s}"));
            }
        }
    }
    for d in [0.0, 1.0, 3.25, 1e6] {
        let p = softmax_distances([Some(d); 4], AbsentPolicy::Exclude);
        if p != [0.25; 4] {
            return fail(format!("equal distances {d}: {p:?}"));
        }
    }
    Ok(format!(
        "{audits} pipeline audits and 2000 random quads sum to 1; equal quads give 0.25"
    ))
}

// ---- exemplar dimensionality

fn exemplar_dims() -> Check {
    let mut parts = Vec::new();
    for (name, arch, want) in [
        ("top-50", Architecture::top50(), 6200),
        ("full-set", Architecture::full_set(), 12400),
    ] {
        if arch.exemplar_dim() != want {
            return fail(format!("{name}: exemplar_dim {} != {want}", arch.exemplar_dim()));
        }
        let p = ModelParams::zeros(&arch, 6, 3);
        let trace = forward_eval(&p, &[2, 3, 4, 5, 1, 2, 3]).map_err(|e| e.to_string())?;
        let v = token_vector(&trace, 2).map_err(|e| e.to_string())?;
        if v.len() != want {
            return fail(format!("{name}: key length {} != {want}", v.len()));
        }
        parts.push(format!("{name} {}", v.len()));
    }
    Ok(parts.join(", "))
}

// ---- decision rules

fn decision_rules(run: &PipelineOutcome) -> Check {
    let taus = [0.0, 0.2, 0.4, 0.6];
    let mut positives = 0;
    for doc in &run.test_audits {
        for a in &doc.audits {
            if a.decisions.exadr && !doc.inference.predicted[a.label] {
                return fail(format!("ExADR admits label {} that the model rejects", a.label));
            }
            if a.decisions.exadr {
                positives += 1;
            }
            let admitted: Vec<bool> = taus.iter().map(|&t| a.exadr_t(t)).collect();
            if admitted.windows(2).any(|w| w[1] && !w[0]) || (admitted[0] && !a.decisions.exadr) {
                return fail(format!("thresholded admissions not nested: {admitted:?}"));
            }
        }
    }
    let row = |name: String| -> Result<&VariantReport, String> {
        run.variants
            .iter()
            .find(|v| v.name == name)
            .ok_or(format!("missing row {name}"))
    };
    let mut trend = Vec::new();
    let mut last_recall = f64::INFINITY;
    for t in taus {
        let m = &row(format!("+ExADR+t{t}"))?.metrics.f1.micro;
        if m.recall > last_recall {
            return fail(format!("recall rises at tau {t}: {} > {last_recall}", m.recall));
        }
        last_recall = m.recall;
        trend.push(format!("{t}: {:.3}/{:.3}", m.precision, m.recall));
    }
    Ok(format!(
        "{positives} ExADR positives, all query-positive; P/R by tau {}",
        trend.join(", ")
    ))
}

// ---- end to end

struct Runs {
    synth: SyntheticCorpus,
    config: PipelineConfig,
    a: PipelineOutcome,
    dir_a: tempfile::TempDir,
    dir_b: tempfile::TempDir,
    seconds: f64,
}

fn run_twice() -> Result<Runs, String> {
    let synth = generate_synthetic(&SyntheticSpec::default()).map_err(|e| e.to_string())?;
    let config = PipelineConfig::synthetic();
    let dir_a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir_b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let a = run_pipeline(&synth.corpus, &config, dir_a.path(), |_| {}).map_err(|e| e.to_string())?;
    let seconds = start.elapsed().as_secs_f64();
    run_pipeline(&synth.corpus, &config, dir_b.path(), |_| {}).map_err(|e| e.to_string())?;
    Ok(Runs {
        synth,
        config,
        a,
        dir_a,
        dir_b,
        seconds,
    })
}

fn end_to_end(r: &Runs) -> Check {
    let spec = SyntheticSpec::default();
    let c = &r.synth.corpus;
    if (c.labels.len(), c.train.len(), c.dev.len(), c.test.len()) != (10, 1000, 200, 200) || spec.trigger_len != 2 {
        return fail("synthetic corpus does not have the required shape");
    }
    let model =
        r.a.variants
            .iter()
            .find(|v| v.name == "model")
            .ok_or("missing model row")?;
    let p1 = model
        .metrics
        .precision_at
        .iter()
        .find(|(z, _)| *z == 1)
        .map(|p| p.1)
        .ok_or("no P@1")?;
    let f1 = model.metrics.f1.micro.f1;
    let prepared = prepare(c, &r.config.vocab).map_err(|e| e.to_string())?;
    let inferences: Vec<_> = r.a.test_audits.iter().map(|d| d.inference.clone()).collect();
    let (hits, total) = trigger_localization(&inferences, &prepared.test, &r.synth.trigger_map, Split::Test, |l| {
        r.synth.trigger_len(l)
    });
    let loc = hits as f64 / total.max(1) as f64;
    let detail = format!(
        "P@1 {p1:.3}, micro-F1 {f1:.3}, localization {loc:.3} ({hits}/{total}), one run {:.1}s",
        r.seconds
    );
    if p1 < 0.90 || f1 < 0.85 || loc < 0.80 || total == 0 || r.seconds > 600.0 {
        return fail(detail);
    }
    Ok(detail)
}

fn finetune_identity(r: &Runs) -> Check {
    let prepared = prepare(&r.synth.corpus, &r.config.vocab).map_err(|e| e.to_string())?;
    let tuned = init_finetune(r.a.base.clone());
    let mut worst = 0.0f64;
    for d in &prepared.dev {
        let t = forward_eval(&tuned, &d.token_ids).map_err(|e| e.to_string())?;
        let o2 = t.untied_logits.as_ref().ok_or("no untied layer after init")?;
        for (a, b) in o2.iter().zip(&t.logits) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst != 0.0 {
        return fail(format!("max |o' - o| = {worst:e}"));
    }
    Ok(format!("max |o' - o| = 0 over {} dev documents", prepared.dev.len()))
}

fn determinism(r: &Runs) -> Check {
    let (a, b) = (RunLayout::new(r.dir_a.path()), RunLayout::new(r.dir_b.path()));
    let files = [
        (a.base_checkpoint(), b.base_checkpoint()),
        (a.checkpoint(), b.checkpoint()),
        (a.database(), b.database()),
        (a.metrics(), b.metrics()),
        (a.metrics_json(), b.metrics_json()),
        (a.base_log(), b.base_log()),
        (a.finetune_log(), b.finetune_log()),
    ];
    let mut bytes = 0;
    for (x, y) in &files {
        let (bx, by) = (
            fs::read(x).map_err(|e| e.to_string())?,
            fs::read(y).map_err(|e| e.to_string())?,
        );
        if bx != by {
            return fail(format!(
                "{} differs between runs",
                x.file_name().unwrap().to_string_lossy()
            ));
        }
        bytes += bx.len();
    }
    Ok(format!(
        "{} artifacts, {bytes} bytes, identical across two runs",
        files.len()
    ))
}

// ---- metric oracles

fn top_z_oracle(s: &[f64], l: usize, z: usize) -> bool {
    (0..s.len()).filter(|&m| s[m] > s[l] || (s[m] == s[l] && m < l)).count() < z
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    (p, r, if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
}

fn pairwise(s: &[f64], y: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                pairs += 1.0;
                wins += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn metric_oracles() -> Check {
    let mut worst = 0.0f64;
    let mut note = |a: f64, b: f64| worst = worst.max((a - b).abs());
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = (rng.gen_range(2..15), rng.gen_range(2..10));
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..c).map(|_| rng.gen_range(0..5) as f64 * 0.25).collect())
            .collect();
        let gold: Vec<Vec<bool>> = (0..n).map(|_| (0..c).map(|_| rng.gen_bool(0.35)).collect()).collect();
        let pred: Vec<Vec<bool>> = (0..n).map(|_| (0..c).map(|_| rng.gen_bool(0.4)).collect()).collect();

        for z in 1..=c {
            let want = (0..n)
                .map(|d| (0..c).filter(|&l| gold[d][l] && top_z_oracle(&scores[d], l, z)).count() as f64 / z as f64)
                .sum::<f64>()
                / n as f64;
            note(
                precision_at_z(&scores, &gold, z, false).map_err(|e| e.to_string())?,
                want,
            );
        }

        let count = |l: Option<usize>, p: bool, g: bool| {
            (0..n)
                .flat_map(|d| (0..c).map(move |m| (d, m)))
                .filter(|&(d, m)| l.is_none_or(|l| l == m) && pred[d][m] == p && gold[d][m] == g)
                .count()
        };
        let rep = micro_macro_f1(&pred, &gold, MacroOptions::default()).map_err(|e| e.to_string())?;
        let micro = prf(
            count(None, true, true),
            count(None, true, false),
            count(None, false, true),
        );
        note(rep.micro.f1, micro.2);
        note(rep.micro.precision, micro.0);
        note(rep.micro.recall, micro.1);
        let per: Vec<_> = (0..c)
            .map(|l| {
                prf(
                    count(Some(l), true, true),
                    count(Some(l), true, false),
                    count(Some(l), false, true),
                )
            })
            .collect();
        note(rep.macro_.f1, per.iter().map(|x| x.2).sum::<f64>() / c as f64);

        let flat_s: Vec<f64> = scores.iter().flatten().copied().collect();
        let flat_y: Vec<bool> = gold.iter().flatten().copied().collect();
        if let (Ok(got), Some(want)) = (auc(&scores, &gold), pairwise(&flat_s, &flat_y)) {
            note(got.micro, want);
            let per_label: Vec<f64> = (0..c)
                .filter_map(|l| {
                    let s: Vec<f64> = scores.iter().map(|r| r[l]).collect();
                    let y: Vec<bool> = gold.iter().map(|r| r[l]).collect();
                    pairwise(&s, &y)
                })
                .collect();
            match got.macro_ {
                Some(m) => note(m, per_label.iter().sum::<f64>() / per_label.len() as f64),
                None if per_label.is_empty() => {}
                None => return fail(format!("seed {seed}: macro AUC missing")),
            }
        }
    }
    if worst > 1e-12 {
        return fail(format!("max deviation {worst:e}"));
    }
    Ok(format!(
        "100 instances: P@z, micro/macro F1, micro/macro AUC, max deviation {worst:.1e}"
    ))
}

// ---- optional at-scale run

fn mimic() -> Option<Check> {
    let dir = std::env::var_os("MULTIBLADE_MIMIC_DIR")?;
    let run = || -> Check {
        let corpus = ingest_caml_format(Path::new(&dir), IngestOptions::default()).map_err(|e| e.to_string())?;
        let out = tempfile::tempdir().map_err(|e| e.to_string())?;
        let r = run_pipeline(&corpus, &PipelineConfig::default(), out.path(), |m| eprintln!("{m}"))
            .map_err(|e| e.to_string())?;
        let model = r
            .variants
            .iter()
            .find(|v| v.name == "model")
            .ok_or("missing model row")?;
        let p5 = model
            .metrics
            .precision_at
            .iter()
            .find(|(z, _)| *z == 5)
            .map(|p| p.1)
            .ok_or("no P@5")?;
        let detail = format!("test P@5 {p5:.3}, target 0.654 +/- 0.015");
        if (p5 - 0.654).abs() > 0.015 {
            return fail(detail);
        }
        Ok(detail)
    };
    Some(run())
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        fail(format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |name: &str, result: Option<Check>| {
        let line = match result {
            None => format!("SKIP {name}: set MULTIBLADE_MIMIC_DIR to a top-50 corpus directory to run"),
            Some(Ok(d)) => format!("PASS {name}: {d}"),
            Some(Err(d)) => {
                failed += 1;
                format!("FAIL {name}: {d}")
            }
        };
        println!("{line}");
    };

    report("decomposition exactness", Some(guarded(decomposition)));
    report("gradient suite", Some(guarded(gradients)));
    report("nearest-neighbour oracle", Some(guarded(nn_oracle)));
    report("exemplar dimensionality", Some(guarded(exemplar_dims)));
    report("metric oracles", Some(guarded(metric_oracles)));

    let runs = catch_unwind(run_twice).unwrap_or_else(|_| fail("panicked"));
    let shared = |f: fn(&Runs) -> Check| -> Check {
        match &runs {
            Ok(r) => guarded(|| f(r)),
            Err(e) => fail(format!("synthetic pipeline failed: {e}")),
        }
    };
    report("softmax distances", Some(shared(|r| softmax(&r.a))));
    report("decision-rule structure", Some(shared(|r| decision_rules(&r.a))));
    report("synthetic end-to-end", Some(shared(end_to_end)));
    report("fine-tune initialization identity", Some(shared(finetune_identity)));
    report("determinism", Some(shared(determinism)));
    report("top-50 at-scale reproduction", mimic().map(|r| guarded(|| r)));

    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
