mod common;

use common::{random_doc, random_model, tiny_arch};
use multiblade::model::{
    forward_eval, infer, label_scores, Architecture, BiasOffset, FilterSpec, ForwardTrace, ModelParams,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Direct transcription of the forward equations with plain loops.
fn oracle_logits(p: &ModelParams, ids: &[u32]) -> (Vec<f64>, Vec<(usize, usize)>) {
    let d = p.dim();
    let n = ids.len().max(p.max_width());
    let mut x = vec![vec![0.0; d]; n];
    for (i, &id) in ids.iter().enumerate() {
        x[i] = p.embedding.row(id as usize).to_vec();
    }
    let mut g = Vec::new();
    let mut windows = Vec::new();
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
            g.push(best.1.max(0.0));
            windows.push((best.0, k));
        }
    }
    let c_count = p.num_labels();
    let logits = (0..c_count)
        .map(|c| {
            let on = p.tied.weight.row(c);
            let off = p.tied.weight.row(c_count + c);
            let mut o = p.tied.bias.data()[c] - p.tied.bias.data()[c_count + c];
            for j in 0..g.len() {
                o += (on[j] - off[j]) * g[j];
            }
            o
        })
        .collect();
    (logits, windows)
}

fn acceptance_arch() -> Architecture {
    Architecture {
        embedding_dim: 8,
        filters: vec![FilterSpec { width: 1, count: 4 }, FilterSpec { width: 3, count: 4 }],
    }
}

#[test]
fn forward_matches_equation_oracle() {
    for seed in 0..20 {
        let p = random_model(&tiny_arch(), 12, 3, seed, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let ids = random_doc(9, 12, seed as usize % 3, &mut rng);
        let trace = forward_eval(&p, &ids).unwrap();
        let (logits, _) = oracle_logits(&p, &ids);
        for (a, b) in trace.logits.iter().zip(&logits) {
            assert!((a - b).abs() <= 1e-10, "seed {seed}: {a} vs {b}");
        }
    }
}

/// Keep only filter `m` in row `c` of the tied "on" block.
fn single_filter(p: &ModelParams, c: usize, m: usize) -> ModelParams {
    let mut q = p.clone();
    let row = q.tied.weight.row_mut(c);
    let keep = row[m];
    row.fill(0.0);
    row[m] = keep;
    q
}

fn check_attribution(p: &ModelParams, trace: &ForwardTrace, windows: &[(usize, usize)]) {
    let m_total = p.total_filters();
    for c in 0..p.num_labels() {
        let b = p.tied.bias.data()[c];
        let s = label_scores(trace, p, c, true).unwrap();
        let expected: f64 = (0..m_total)
            .map(|m| windows[m].1 as f64 * p.tied.weight.get2(c, m) * trace.features[m])
            .sum();
        let total: f64 = s.on.iter().map(|v| v - b).sum();
        assert!((total - expected).abs() <= 1e-9, "conservation: {total} vs {expected}");
        for (m, &(start, width)) in windows.iter().enumerate() {
            let q = single_filter(p, c, m);
            let sm = label_scores(trace, &q, c, true).unwrap();
            let wg = p.tied.weight.get2(c, m) * trace.features[m];
            let per_filter: f64 = sm.on.iter().map(|v| v - b).sum();
            assert!((per_filter - width as f64 * wg).abs() <= 1e-9);
            for (n, v) in sm.on.iter().enumerate() {
                let inside = n >= start && n < start + width;
                let want = if inside { wg } else { 0.0 };
                assert!((v - b - want).abs() <= 1e-12, "filter {m} token {n}");
            }
        }
    }
}

#[test]
fn per_filter_attribution_is_exact() {
    for seed in 0..20 {
        let p = random_model(&acceptance_arch(), 40, 5, seed, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = random_doc(30, 40, 0, &mut rng);
        let trace = forward_eval(&p, &ids).unwrap();
        let (_, windows) = oracle_logits(&p, &ids);
        check_attribution(&p, &trace, &windows);
    }
}

#[test]
fn swapping_on_and_off_rows_negates_scores() {
    for seed in 0..10 {
        let p = random_model(&tiny_arch(), 12, 3, seed, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = random_doc(10, 12, 2, &mut rng);
        let trace = forward_eval(&p, &ids).unwrap();
        let c_count = p.num_labels();
        let mut q = p.clone();
        for c in 0..c_count {
            let on = p.tied.weight.row(c).to_vec();
            let off = p.tied.weight.row(c_count + c).to_vec();
            q.tied.weight.row_mut(c).copy_from_slice(&off);
            q.tied.weight.row_mut(c_count + c).copy_from_slice(&on);
            q.tied.bias.data_mut().swap(c, c_count + c);
        }
        for c in 0..c_count {
            let a = label_scores(&trace, &p, c, true).unwrap().combined();
            let b = label_scores(&trace, &q, c, true).unwrap().combined();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(*x, -*y);
            }
        }
    }
}

#[test]
fn finetune_init_reproduces_base_logits() {
    for seed in 0..10 {
        let mut p = random_model(&tiny_arch(), 12, 4, seed, false);
        p.init_finetune();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = random_doc(11, 12, 1, &mut rng);
        let trace = forward_eval(&p, &ids).unwrap();
        assert_eq!(trace.untied_logits.as_ref().unwrap(), &trace.logits);
        let inf = infer(&trace, &p, &BiasOffset::default());
        for c in 0..4 {
            assert_eq!(inf.scores[c], trace.logits[c] + inf.s_max[c]);
        }
    }
}

#[test]
fn pad_tail_order_does_not_move_the_maximum() {
    let p = random_model(&tiny_arch(), 12, 3, 3, true);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ids = random_doc(12, 12, 4, &mut rng);
    let mut reversed_tail = ids.clone();
    reversed_tail[8..].reverse();
    let a = infer(&forward_eval(&p, &ids).unwrap(), &p, &BiasOffset::default());
    let b = infer(&forward_eval(&p, &reversed_tail).unwrap(), &p, &BiasOffset::default());
    assert_eq!(a.s_max, b.s_max);
}

proptest! {
    #[test]
    fn predictions_grow_with_offset(seed in 0u64..500, lo in -5.0f64..5.0, delta in 0.0f64..5.0, untied in any::<bool>()) {
        let p = random_model(&tiny_arch(), 12, 6, seed, untied);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = random_doc(10, 12, 0, &mut rng);
        let trace = forward_eval(&p, &ids).unwrap();
        let a = infer(&trace, &p, &BiasOffset::global(lo));
        let b = infer(&trace, &p, &BiasOffset::global(lo + delta));
        for c in 0..6 {
            prop_assert!(!a.predicted[c] || b.predicted[c]);
        }
    }

    #[test]
    fn decomposition_sums_to_logit_contributions(seed in 0u64..500, len in 3usize..25) {
        let p = random_model(&tiny_arch(), 12, 3, seed, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let ids = random_doc(len, 12, 0, &mut rng);
        let trace = forward_eval(&p, &ids).unwrap();
        let n = trace.len() as f64;
        for c in 0..3 {
            let s = label_scores(&trace, &p, c, true).unwrap();
            let on_total: f64 = s.on.iter().sum();
            let expected: f64 = trace.spans.iter().enumerate()
                .map(|(m, &(_, k))| k as f64 * p.tied.weight.get2(c, m) * trace.features[m])
                .sum::<f64>() + n * p.tied.bias.data()[c];
            prop_assert!((on_total - expected).abs() <= 1e-9);
        }
    }
}
