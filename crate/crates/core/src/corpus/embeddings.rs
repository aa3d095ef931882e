use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Uniform initialization in `[-0.25/D, 0.25/D]` with a zero padding row.
pub fn random_embeddings(vocab_len: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 0.25 / dim as f64;
    let mut table = Tensor::zeros(&[vocab_len, dim]);
    for (i, x) in table.data_mut().iter_mut().enumerate() {
        let v = rng.gen_range(-bound..=bound);
        if i / dim != PAD_ID as usize {
            *x = v;
        }
    }
    table
}

/// Load plain-text word vectors (`token v1 v2 ...` per line, optional
/// `count dim` header). Vocabulary tokens missing from the file keep a
/// seeded uniform initialization; the padding row is zero.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary, seed: u64) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    let mut dim: Option<usize> = None;
    let mut rows: Vec<(u32, Vec<f64>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            continue;
        }
        let values: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::malformed(path, i + 1, format!("bad number: {e}")))?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::malformed(
                    path,
                    i + 1,
                    format!("dimension mismatch: expected {d}, found {}", values.len()),
                ))
            }
            _ => {}
        }
        if vocab.contains(fields[0]) {
            rows.push((vocab.id(fields[0]), values));
        }
    }
    let dim = dim
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Format(format!("{}: no vectors", path.display())))?;
    let mut table = random_embeddings(vocab.len(), dim, seed);
    for (id, values) in rows {
        if id != PAD_ID {
            table.row_mut(id as usize).copy_from_slice(&values);
        }
    }
    Ok(table)
}
