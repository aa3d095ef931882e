//! Numeric kernels with hand-derived gradients for the fixed CNN
//! architecture, plus a central finite-difference gradient checker.
//!
//! Activations are stored token-major: a document of `N` tokens with
//! `D`-dimensional embeddings is an `[N, D]` tensor, so the window of `K`
//! tokens starting at position `p` is the contiguous slice
//! `[p*D, (p+K)*D)`. Filter weights use the same `k*D + d` layout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `M` filters of width `K` over `D`-dimensional inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    pub width: usize,
    /// `[M, K*D]`
    pub weight: Tensor,
    /// `[M]`
    pub bias: Tensor,
}

impl FilterBank {
    pub fn zeros(width: usize, count: usize, dim: usize) -> Self {
        assert!(width >= 1 && count >= 1);
        FilterBank {
            width,
            weight: Tensor::zeros(&[count, width * dim]),
            bias: Tensor::zeros(&[count]),
        }
    }

    pub fn count(&self) -> usize {
        self.bias.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.row_len() / self.width
    }
}

/// Argmax bookkeeping from the ReLU + max-pool over one feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolRecord {
    /// Winning start position per filter.
    pub argmax: Vec<usize>,
    /// Pooled value per filter, `>= 0`.
    pub pooled: Vec<f64>,
}

/// Valid 1-D convolution. `input` is `[N, D]`; the result is `[M, N-K+1]`.
pub fn conv1d_forward(input: &Tensor, bank: &FilterBank) -> Result<Tensor> {
    let n = input.rows();
    let d = input.row_len();
    let k = bank.width;
    if bank.weight.row_len() != k * d {
        return Err(Error::Shape(format!(
            "filter expects {} inputs per window, document has {}",
            bank.weight.row_len(),
            k * d
        )));
    }
    if n < k {
        return Err(Error::DocumentTooShort { tokens: n, width: k });
    }
    let positions = n - k + 1;
    let m_count = bank.count();
    let x = input.data();
    let mut out = Tensor::zeros(&[m_count, positions]);
    let out_data = out.data_mut();
    for m in 0..m_count {
        let w = bank.weight.row(m);
        let b = bank.bias.data()[m];
        let row = &mut out_data[m * positions..(m + 1) * positions];
        for (p, slot) in row.iter_mut().enumerate() {
            let window = &x[p * d..(p + k) * d];
            let mut acc = b;
            for (wi, xi) in w.iter().zip(window) {
                acc += wi * xi;
            }
            *slot = acc;
        }
    }
    Ok(out)
}

/// Accumulate gradients of a convolution given `d_map` (`[M, N-K+1]`).
///
/// Filter gradients are added into `grad`; input gradients into `d_input`
/// when provided. Zero entries of `d_map` are skipped.
pub fn conv1d_backward(
    input: &Tensor,
    bank: &FilterBank,
    d_map: &Tensor,
    grad: &mut FilterBank,
    mut d_input: Option<&mut Tensor>,
) {
    let d = input.row_len();
    let k = bank.width;
    let positions = d_map.row_len();
    let x = input.data();
    for m in 0..bank.count() {
        for p in 0..positions {
            let dh = d_map.get2(m, p);
            if dh == 0.0 {
                continue;
            }
            let window = &x[p * d..(p + k) * d];
            grad.bias.data_mut()[m] += dh;
            for (gw, xi) in grad.weight.row_mut(m).iter_mut().zip(window) {
                *gw += dh * xi;
            }
            if let Some(dx) = d_input.as_deref_mut() {
                let w = bank.weight.row(m);
                for (dxi, wi) in dx.data_mut()[p * d..(p + k) * d].iter_mut().zip(w) {
                    *dxi += dh * wi;
                }
            }
        }
    }
}

/// Convolution backward when the only upstream gradient comes through the
/// max-pool: each filter receives `d_pooled[m]` at its winning position if its
/// pooled value is positive. Equivalent to [`relu_maxpool_backward`] followed
/// by [`conv1d_backward`] without materializing the dense gradient map.
pub fn conv1d_pool_backward(
    input: &Tensor,
    bank: &FilterBank,
    record: &PoolRecord,
    d_pooled: &[f64],
    grad: &mut FilterBank,
    d_input: &mut Tensor,
) {
    let d = input.row_len();
    let k = bank.width;
    let x = input.data();
    for m in 0..bank.count() {
        let dh = d_pooled[m];
        if record.pooled[m] <= 0.0 || dh == 0.0 {
            continue;
        }
        let p = record.argmax[m];
        let window = &x[p * d..(p + k) * d];
        grad.bias.data_mut()[m] += dh;
        for (gw, xi) in grad.weight.row_mut(m).iter_mut().zip(window) {
            *gw += dh * xi;
        }
        let w = bank.weight.row(m);
        for (dxi, wi) in d_input.data_mut()[p * d..(p + k) * d].iter_mut().zip(w) {
            *dxi += dh * wi;
        }
    }
}

/// ReLU followed by a max over positions, per filter. Ties and the
/// all-non-positive case resolve to the first position.
pub fn relu_maxpool(feature_map: &Tensor) -> PoolRecord {
    let m_count = feature_map.rows();
    let mut argmax = Vec::with_capacity(m_count);
    let mut pooled = Vec::with_capacity(m_count);
    for m in 0..m_count {
        let row = feature_map.row(m);
        let mut best = 0usize;
        let mut best_val = row.first().map_or(0.0, |v| v.max(0.0));
        for (p, &v) in row.iter().enumerate().skip(1) {
            let r = v.max(0.0);
            if r > best_val {
                best = p;
                best_val = r;
            }
        }
        argmax.push(best);
        pooled.push(best_val);
    }
    PoolRecord { argmax, pooled }
}

/// Route pooled-value gradients back to the winning positions. Filters whose
/// pooled value is zero receive no gradient (ReLU subgradient 0).
pub fn relu_maxpool_backward(record: &PoolRecord, d_pooled: &[f64], positions: usize) -> Tensor {
    let m_count = record.pooled.len();
    let mut d_map = Tensor::zeros(&[m_count, positions]);
    for m in 0..m_count {
        if record.pooled[m] > 0.0 {
            d_map.data_mut()[m * positions + record.argmax[m]] = d_pooled[m];
        }
    }
    d_map
}

/// `W x + b` for `W` of shape `[R, M]`.
pub fn affine(x: &[f64], weight: &Tensor, bias: &Tensor) -> Result<Vec<f64>> {
    if weight.shape().len() != 2 || weight.row_len() != x.len() || bias.len() != weight.rows() {
        return Err(Error::Shape(format!(
            "affine: weight {:?}, bias {:?}, input {}",
            weight.shape(),
            bias.shape(),
            x.len()
        )));
    }
    Ok((0..weight.rows())
        .map(|r| {
            let mut acc = bias.data()[r];
            for (w, xi) in weight.row(r).iter().zip(x) {
                acc += w * xi;
            }
            acc
        })
        .collect())
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Inverted dropout. In train mode returns the per-entry multipliers
/// (`0` or `1/(1-rate)`) alongside the output; eval mode is the identity.
pub fn dropout(x: &[f64], rate: f64, mode: Mode<'_>) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    match mode {
        Mode::Eval => Ok((x.to_vec(), None)),
        Mode::Train(rng) => {
            let scale = 1.0 / (1.0 - rate);
            let mask: Vec<f64> = x
                .iter()
                .map(|_| {
                    if rate > 0.0 && rng.gen::<f64>() < rate {
                        0.0
                    } else {
                        scale
                    }
                })
                .collect();
            let out = x.iter().zip(&mask).map(|(v, m)| v * m).collect();
            Ok((out, Some(mask)))
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy on a logit, `-y ln σ(z) - (1-y) ln(1-σ(z))`, and its
/// derivative with respect to `z`.
pub fn bce_with_logit(z: f64, y: bool) -> (f64, f64) {
    let target = if y { 1.0 } else { 0.0 };
    // -ln σ(z) = softplus(-z), -ln(1-σ(z)) = softplus(z)
    let loss = if y { softplus(-z) } else { softplus(z) };
    (loss, sigmoid(z) - target)
}

/// Parameter containers the gradient checker can walk.
pub trait Parameterized {
    fn tensor_count(&self) -> usize;
    fn tensor_name(&self, i: usize) -> String;
    fn tensor(&self, i: usize) -> &Tensor;
    fn tensor_mut(&mut self, i: usize) -> &mut Tensor;
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that gradients which
/// are both essentially zero compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare `analytic` against central differences of `loss` for every
/// entry of every tensor of `params` (restored after each probe).
pub fn check_gradients<P, F>(params: &mut P, analytic: &P, step: f64, mut loss: F) -> GradCheckReport
where
    P: Parameterized,
    F: FnMut(&P) -> f64,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for t in 0..params.tensor_count() {
        for i in 0..params.tensor(t).len() {
            let orig = params.tensor(t).data()[i];
            params.tensor_mut(t).data_mut()[i] = orig + step;
            let up = loss(params);
            params.tensor_mut(t).data_mut()[i] = orig - step;
            let down = loss(params);
            params.tensor_mut(t).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.tensor(t).data()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.tensor_name(t), i, a, numeric));
            }
        }
    }
    report
}
