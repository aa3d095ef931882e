mod common;

use common::{random_doc, random_model, tiny_arch};
use multiblade::losses::{evaluate, LossConfig};
use multiblade::model::{backward, forward, ForwardOptions, Gradients, ModelParams, OutputGrad};
use multiblade::netops::{check_gradients, Mode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

fn term(bce: bool, min: bool, max: bool, combined: bool) -> LossConfig {
    LossConfig {
        bce,
        min,
        max,
        combined,
        ..LossConfig::base()
    }
}

fn loss_terms() -> Vec<(&'static str, LossConfig)> {
    vec![
        ("bce", term(true, false, false, false)),
        ("min", term(false, true, false, false)),
        ("max", term(false, false, true, false)),
        ("combined", term(false, false, false, true)),
        ("min+max+combined", LossConfig::finetune()),
    ]
}

fn run_loss(params: &ModelParams, ids: &[u32], gold: &[bool], cfg: &LossConfig, dropout_seed: Option<u64>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed.unwrap_or(0));
    let (mode, rate) = match dropout_seed {
        Some(_) => (Mode::Train(&mut rng), 0.3),
        None => (Mode::Eval, 0.0),
    };
    // The padding row is pinned to zero, so probing it must not move the loss.
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

fn analytic(
    params: &ModelParams,
    ids: &[u32],
    gold: &[bool],
    cfg: &LossConfig,
    dropout_seed: Option<u64>,
) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed.unwrap_or(0));
    let (mode, rate) = match dropout_seed {
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

#[test]
fn every_loss_passes_finite_differences_on_seeded_instances() {
    let arch = tiny_arch();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let ids = random_doc(10, 7, (seed % 3) as usize, &mut rng);
        let gold: Vec<bool> = (0..2).map(|_| rng.gen_bool(0.5)).collect();
        let dropout_seed = (seed % 2 == 1).then_some(seed);
        for (name, cfg) in loss_terms() {
            let mut params = random_model(&arch, 7, 2, seed, true);
            let grads = analytic(&params, &ids, &gold, &cfg, dropout_seed);
            let report = check_gradients(&mut params, &grads, STEP, |p| {
                run_loss(p, &ids, &gold, &cfg, dropout_seed)
            });
            assert!(
                report.max_rel_error < TOLERANCE,
                "seed {seed} loss {name}: rel err {} at {:?}",
                report.max_rel_error,
                report.worst
            );
        }
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let arch = tiny_arch();
    let params = random_model(&arch, 7, 2, 3, true);
    let trace = forward(&params, &[1, 2, 3, 4, 5, 6], Mode::Eval, ForwardOptions::default()).unwrap();
    let mut grads = Gradients::zeros_like(&params);
    let upstream = OutputGrad {
        logits: vec![0.0; 2],
        untied_logits: vec![0.0; 2],
        tokens: vec![],
    };
    backward(&trace, &params, &upstream, &mut grads).unwrap();
    assert_eq!(grads, Gradients::zeros_like(&params));
}

#[test]
fn padding_row_never_receives_gradient() {
    let arch = tiny_arch();
    let params = random_model(&arch, 7, 2, 4, true);
    let ids = [3, 0, 2, 0, 0, 5, 0, 0];
    let grads = analytic(&params, &ids, &[true, false], &LossConfig::finetune(), None);
    assert!(grads.embedding.row(0).iter().all(|&x| x == 0.0));
    assert!(grads.embedding.row(3).iter().any(|&x| x != 0.0));
}
