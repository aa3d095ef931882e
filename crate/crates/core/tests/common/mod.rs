#![allow(dead_code)]

use multiblade::model::{Architecture, FilterSpec, ModelParams};
use multiblade::netops::Parameterized;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random model with every tensor (biases included) drawn uniformly, padding
/// embedding row zero, untied layer perturbed away from the tied one.
pub fn random_model(arch: &Architecture, vocab: usize, labels: usize, seed: u64, untied: bool) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::zeros(arch, vocab, labels);
    if untied {
        p.init_finetune();
    }
    for t in 0..p.tensor_count() {
        for x in p.tensor_mut(t).data_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
    }
    p.embedding.row_mut(0).fill(0.0);
    p
}

pub fn tiny_arch() -> Architecture {
    Architecture {
        embedding_dim: 4,
        filters: vec![FilterSpec { width: 2, count: 3 }, FilterSpec { width: 3, count: 3 }],
    }
}

pub fn random_doc(len: usize, vocab: usize, pad_tail: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..len - pad_tail).map(|_| rng.gen_range(1..vocab as u32)).collect();
    ids.resize(len, 0);
    ids
}
