//! The decomposable multi-label CNN.
//!
//! The output layer has `2C` rows in block layout: row `c` holds the "on"
//! weights of label `c` and row `C + c` its "off" weights, so
//! `o_c = (W_c - W_{C+c}) . g + b_c - b_{C+c}`. Each label's document logit
//! splits exactly over tokens through the max-pool winners: a token receives
//! `W_{c,m} g_m` from every winning window of filter `m` that covers it, plus
//! the label bias.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PAD_ID;
use crate::error::{Error, Result};
use crate::netops::{self, FilterBank, Mode, Parameterized, PoolRecord};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub width: usize,
    pub count: usize,
}

/// Embedding width and filter banks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub embedding_dim: usize,
    pub filters: Vec<FilterSpec>,
}

impl Architecture {
    fn with_counts(dim: usize, counts: [usize; 4]) -> Self {
        Architecture {
            embedding_dim: dim,
            filters: [1, 3, 4, 5]
                .into_iter()
                .zip(counts)
                .map(|(width, count)| FilterSpec { width, count })
                .collect(),
        }
    }

    /// Widths {1,3,4,5} with {100,1000,1000,1000} filters over 100-d embeddings.
    pub fn top50() -> Self {
        Self::with_counts(100, [100, 1000, 1000, 1000])
    }

    /// Widths {1,3,4,5} with {200,2000,2000,2000} filters over 100-d embeddings.
    pub fn full_set() -> Self {
        Self::with_counts(100, [200, 2000, 2000, 2000])
    }

    pub fn total_filters(&self) -> usize {
        self.filters.iter().map(|f| f.count).sum()
    }

    pub fn max_width(&self) -> usize {
        self.filters.iter().map(|f| f.width).max().unwrap_or(1)
    }

    /// Per-token filter averages for every bank, then the max-pool vector.
    pub fn exemplar_dim(&self) -> usize {
        2 * self.total_filters()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.filters.is_empty() {
            return Err(Error::Config(
                "architecture needs a positive embedding_dim and at least one filter bank".into(),
            ));
        }
        if self.filters.iter().any(|f| f.width == 0 || f.count == 0) {
            return Err(Error::Config("filter widths and counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// A `[2C, M]` output layer with bias `[2C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl OutputLayer {
    pub fn zeros(num_labels: usize, features: usize) -> Self {
        OutputLayer {
            weight: Tensor::zeros(&[2 * num_labels, features]),
            bias: Tensor::zeros(&[2 * num_labels]),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.bias.len() / 2
    }

    /// `o_c` for every label.
    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        let c_count = self.num_labels();
        let full = netops::affine(features, &self.weight, &self.bias).expect("output layer shape");
        (0..c_count).map(|c| full[c] - full[c_count + c]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `[V, D]`; row 0 (padding) is always zero.
    pub embedding: Tensor,
    pub banks: Vec<FilterBank>,
    pub tied: OutputLayer,
    /// Present after fine-tune initialization.
    pub untied: Option<OutputLayer>,
}

impl ModelParams {
    pub fn zeros(arch: &Architecture, vocab_len: usize, num_labels: usize) -> Self {
        let dim = arch.embedding_dim;
        ModelParams {
            embedding: Tensor::zeros(&[vocab_len, dim]),
            banks: arch
                .filters
                .iter()
                .map(|f| FilterBank::zeros(f.width, f.count, dim))
                .collect(),
            tied: OutputLayer::zeros(num_labels, arch.total_filters()),
            untied: None,
        }
    }

    /// Random initialization around a given embedding table: filter and
    /// output weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(arch: &Architecture, embedding: Tensor, num_labels: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if embedding.shape().len() != 2 || embedding.row_len() != arch.embedding_dim {
            return Err(Error::Shape(format!(
                "embedding table {:?} does not match embedding_dim {}",
                embedding.shape(),
                arch.embedding_dim
            )));
        }
        let mut params = ModelParams::zeros(arch, embedding.rows(), num_labels);
        params.embedding = embedding;
        params.embedding.row_mut(PAD_ID as usize).fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for bank in &mut params.banks {
            let bound = 1.0 / (bank.weight.row_len() as f64).sqrt();
            bank.weight
                .data_mut()
                .iter_mut()
                .for_each(|w| *w = rng.gen_range(-bound..bound));
        }
        let bound = 1.0 / (arch.total_filters() as f64).sqrt();
        params
            .tied
            .weight
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(-bound..bound));
        Ok(params)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            embedding_dim: self.dim(),
            filters: self
                .banks
                .iter()
                .map(|b| FilterSpec {
                    width: b.width,
                    count: b.count(),
                })
                .collect(),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.tied.num_labels()
    }

    pub fn dim(&self) -> usize {
        self.embedding.row_len()
    }

    pub fn vocab_len(&self) -> usize {
        self.embedding.rows()
    }

    pub fn total_filters(&self) -> usize {
        self.banks.iter().map(FilterBank::count).sum()
    }

    pub fn max_width(&self) -> usize {
        self.banks.iter().map(|b| b.width).max().unwrap_or(1)
    }

    pub fn is_finetuned(&self) -> bool {
        self.untied.is_some()
    }

    /// Copy the tied output layer into a fresh untied layer.
    pub fn init_finetune(&mut self) {
        self.untied = Some(self.tied.clone());
    }

    fn output(&self, use_tied: bool) -> Result<&OutputLayer> {
        if use_tied {
            Ok(&self.tied)
        } else {
            self.untied.as_ref().ok_or(Error::MissingUntiedLayer)
        }
    }

    pub fn is_finite(&self) -> bool {
        (0..self.tensor_count()).all(|i| self.tensor(i).is_finite())
    }

    /// L2 norm of each parameter tensor, for diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        (0..self.tensor_count())
            .map(|i| (self.tensor_name(i), self.tensor(i).norm()))
            .collect()
    }
}

impl Parameterized for ModelParams {
    fn tensor_count(&self) -> usize {
        1 + 2 * self.banks.len() + 2 + if self.untied.is_some() { 2 } else { 0 }
    }

    fn tensor_name(&self, i: usize) -> String {
        let nb = self.banks.len();
        match i {
            0 => "embedding".into(),
            i if i <= 2 * nb => {
                let b = (i - 1) / 2;
                let part = if (i - 1) % 2 == 0 { "weight" } else { "bias" };
                format!("filters[{}].{}", self.banks[b].width, part)
            }
            i if i == 2 * nb + 1 => "tied.weight".into(),
            i if i == 2 * nb + 2 => "tied.bias".into(),
            i if i == 2 * nb + 3 => "untied.weight".into(),
            _ => "untied.bias".into(),
        }
    }

    fn tensor(&self, i: usize) -> &Tensor {
        let nb = self.banks.len();
        match i {
            0 => &self.embedding,
            i if i <= 2 * nb => {
                let b = &self.banks[(i - 1) / 2];
                if (i - 1) % 2 == 0 {
                    &b.weight
                } else {
                    &b.bias
                }
            }
            i if i == 2 * nb + 1 => &self.tied.weight,
            i if i == 2 * nb + 2 => &self.tied.bias,
            i if i == 2 * nb + 3 => &self.untied.as_ref().expect("untied layer").weight,
            _ => &self.untied.as_ref().expect("untied layer").bias,
        }
    }

    fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        let nb = self.banks.len();
        match i {
            0 => &mut self.embedding,
            i if i <= 2 * nb => {
                let b = &mut self.banks[(i - 1) / 2];
                if (i - 1) % 2 == 0 {
                    &mut b.weight
                } else {
                    &mut b.bias
                }
            }
            i if i == 2 * nb + 1 => &mut self.tied.weight,
            i if i == 2 * nb + 2 => &mut self.tied.bias,
            i if i == 2 * nb + 3 => &mut self.untied.as_mut().expect("untied layer").weight,
            _ => &mut self.untied.as_mut().expect("untied layer").bias,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub dropout: f64,
    /// Minimum padded length; documents are always padded to at least the
    /// widest filter.
    pub pad_to: usize,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            dropout: 0.0,
            pad_to: 0,
        }
    }
}

/// Everything recorded by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Padded token ids.
    pub token_ids: Vec<u32>,
    /// Number of real (unpadded) tokens.
    pub real_len: usize,
    /// `[N, D]` embedded input.
    pub input: Tensor,
    /// Pre-ReLU feature map per bank, `[M_K, N-K+1]`.
    pub maps: Vec<Tensor>,
    pub pools: Vec<PoolRecord>,
    /// Max-pooled features before dropout.
    pub pooled: Vec<f64>,
    /// Dropout multipliers (train mode only).
    pub dropout_mask: Option<Vec<f64>>,
    /// Features fed to the output layers (pooled after dropout).
    pub features: Vec<f64>,
    /// Winning window `(start, width)` per global filter index.
    pub spans: Vec<(usize, usize)>,
    pub logits: Vec<f64>,
    pub untied_logits: Option<Vec<f64>>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.logits.len()
    }
}

pub fn forward(
    params: &ModelParams,
    token_ids: &[u32],
    mode: Mode<'_>,
    options: ForwardOptions,
) -> Result<ForwardTrace> {
    let dim = params.dim();
    let n = token_ids.len().max(options.pad_to).max(params.max_width());
    let mut ids = token_ids.to_vec();
    ids.resize(n, PAD_ID);

    let mut input = Tensor::zeros(&[n, dim]);
    for (p, &id) in ids.iter().enumerate() {
        if id as usize >= params.vocab_len() {
            return Err(Error::OutOfRange {
                index: id as usize,
                len: params.vocab_len(),
            });
        }
        input.row_mut(p).copy_from_slice(params.embedding.row(id as usize));
    }

    let mut maps = Vec::with_capacity(params.banks.len());
    let mut pools = Vec::with_capacity(params.banks.len());
    let mut pooled = Vec::with_capacity(params.total_filters());
    let mut spans = Vec::with_capacity(params.total_filters());
    for bank in &params.banks {
        let map = netops::conv1d_forward(&input, bank)?;
        let rec = netops::relu_maxpool(&map);
        pooled.extend_from_slice(&rec.pooled);
        spans.extend(rec.argmax.iter().map(|&s| (s, bank.width)));
        maps.push(map);
        pools.push(rec);
    }

    let (features, dropout_mask) = netops::dropout(&pooled, options.dropout, mode)?;
    let logits = params.tied.logits(&features);
    let untied_logits = params.untied.as_ref().map(|l| l.logits(&features));
    Ok(ForwardTrace {
        token_ids: ids,
        real_len: token_ids.len(),
        input,
        maps,
        pools,
        pooled,
        dropout_mask,
        features,
        spans,
        logits,
        untied_logits,
    })
}

/// Eval-mode forward pass with default padding.
pub fn forward_eval(params: &ModelParams, token_ids: &[u32]) -> Result<ForwardTrace> {
    forward(params, token_ids, Mode::Eval, ForwardOptions::default())
}

/// Per-token on/off contribution scores of one label.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenScores {
    pub on: Vec<f64>,
    pub off: Vec<f64>,
}

impl TokenScores {
    pub fn combined(&self) -> Vec<f64> {
        self.on.iter().zip(&self.off).map(|(a, b)| a - b).collect()
    }
}

fn row_contributions(trace: &ForwardTrace, layer: &OutputLayer, row: usize) -> Vec<f64> {
    let mut s = vec![layer.bias.data()[row]; trace.len()];
    let w = layer.weight.row(row);
    for (j, &(start, width)) in trace.spans.iter().enumerate() {
        let v = w[j] * trace.features[j];
        for slot in &mut s[start..start + width] {
            *slot += v;
        }
    }
    s
}

/// On/off contribution scores of `label` for every token position.
pub fn label_scores(trace: &ForwardTrace, params: &ModelParams, label: usize, use_tied: bool) -> Result<TokenScores> {
    let layer = params.output(use_tied)?;
    let c_count = layer.num_labels();
    if label >= c_count {
        return Err(Error::OutOfRange {
            index: label,
            len: c_count,
        });
    }
    Ok(TokenScores {
        on: row_contributions(trace, layer, label),
        off: row_contributions(trace, layer, c_count + label),
    })
}

/// Combined contribution `s^{c+-}_n = s^{c+}_n - s^{c-}_n` from the tied layer.
pub fn combined_scores(trace: &ForwardTrace, params: &ModelParams, label: usize) -> Vec<f64> {
    label_scores(trace, params, label, true)
        .expect("label in range")
        .combined()
}

/// Full decomposition, `[C, N]` on and off scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub on: Tensor,
    pub off: Tensor,
}

impl Decomposition {
    pub fn combined(&self, label: usize) -> Vec<f64> {
        self.on
            .row(label)
            .iter()
            .zip(self.off.row(label))
            .map(|(a, b)| a - b)
            .collect()
    }
}

pub fn decompose(trace: &ForwardTrace, params: &ModelParams, use_tied: bool) -> Result<Decomposition> {
    let c_count = params.num_labels();
    let n = trace.len();
    let mut on = Tensor::zeros(&[c_count, n]);
    let mut off = Tensor::zeros(&[c_count, n]);
    for c in 0..c_count {
        let s = label_scores(trace, params, c, use_tied)?;
        on.row_mut(c).copy_from_slice(&s.on);
        off.row_mut(c).copy_from_slice(&s.off);
    }
    Ok(Decomposition { on, off })
}

/// First index of the maximum.
pub fn argmax_first(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

/// First index of the minimum.
pub fn argmin_first(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    (best, values[best])
}

/// End-user decision offset added inside the sigmoid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasOffset {
    pub global: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_label: Option<Vec<f64>>,
}

impl BiasOffset {
    pub fn global(value: f64) -> Self {
        BiasOffset {
            global: value,
            per_label: None,
        }
    }

    pub fn for_label(&self, label: usize) -> f64 {
        match &self.per_label {
            Some(v) => v.get(label).copied().unwrap_or(self.global),
            None => self.global,
        }
    }
}

/// Document-level decision for every label.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// `o'_c + s^{c+-}_max` for fine-tuned models, `o_c` otherwise (no offset).
    pub scores: Vec<f64>,
    pub predicted: Vec<bool>,
    /// First token achieving `s^{c+-}_max`.
    pub argmax_token: Vec<usize>,
    pub s_max: Vec<f64>,
}

pub fn infer(trace: &ForwardTrace, params: &ModelParams, offset: &BiasOffset) -> Inference {
    let c_count = params.num_labels();
    let mut scores = Vec::with_capacity(c_count);
    let mut predicted = Vec::with_capacity(c_count);
    let mut argmax_token = Vec::with_capacity(c_count);
    let mut s_max = Vec::with_capacity(c_count);
    for c in 0..c_count {
        let s = combined_scores(trace, params, c);
        let (n_star, max) = argmax_first(&s);
        let score = match &trace.untied_logits {
            Some(o2) => o2[c] + max,
            None => trace.logits[c],
        };
        scores.push(score);
        predicted.push(netops::sigmoid(score + offset.for_label(c)) > 0.5);
        argmax_token.push(n_star);
        s_max.push(max);
    }
    Inference {
        scores,
        predicted,
        argmax_token,
        s_max,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Highlight where `s^{c+-}_n > 0`.
    MinmaxOnly,
    /// Highlight where `s^{c+-}_n > 0` and `o'_c + s^{c+-}_n > 0`.
    Combined,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenHighlight {
    pub score: f64,
    pub highlighted: bool,
}

pub fn highlight_rule(s: f64, untied_logit: Option<f64>) -> bool {
    match untied_logit {
        Some(o2) => s > 0.0 && o2 + s > 0.0,
        None => s > 0.0,
    }
}

/// Per-token highlight for one label over the real (unpadded) tokens.
pub fn token_mask(
    trace: &ForwardTrace,
    params: &ModelParams,
    label: usize,
    mode: MaskMode,
) -> Result<Vec<TokenHighlight>> {
    let global = match mode {
        MaskMode::MinmaxOnly => None,
        MaskMode::Combined => Some(trace.untied_logits.as_ref().ok_or(Error::MissingUntiedLayer)?[label]),
    };
    let s = label_scores(trace, params, label, true)?.combined();
    Ok(s[..trace.real_len.min(s.len())]
        .iter()
        .map(|&score| TokenHighlight {
            score,
            highlighted: highlight_rule(score, global),
        })
        .collect())
}

/// Upstream gradient of a scalar loss with respect to the model outputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutputGrad {
    /// `dL/do_c`, empty or length `C`.
    pub logits: Vec<f64>,
    /// `dL/do'_c`, empty or length `C`.
    pub untied_logits: Vec<f64>,
    /// `dL/ds^{c+-}_n` terms.
    pub tokens: Vec<TokenGrad>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenGrad {
    pub label: usize,
    pub token: usize,
    pub grad: f64,
}

/// Parameter gradients. Embedding rows are stored sparsely.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub embedding: BTreeMap<u32, Vec<f64>>,
    pub banks: Vec<FilterBank>,
    pub tied: OutputLayer,
    pub untied: Option<OutputLayer>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let dim = params.dim();
        Gradients {
            embedding: BTreeMap::new(),
            banks: params
                .banks
                .iter()
                .map(|b| FilterBank::zeros(b.width, b.count(), dim))
                .collect(),
            tied: OutputLayer::zeros(params.num_labels(), params.total_filters()),
            untied: params
                .untied
                .as_ref()
                .map(|_| OutputLayer::zeros(params.num_labels(), params.total_filters())),
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (id, row) in &other.embedding {
            let dst = self.embedding.entry(*id).or_insert_with(|| vec![0.0; row.len()]);
            for (a, b) in dst.iter_mut().zip(row) {
                *a += b;
            }
        }
        for (a, b) in self.banks.iter_mut().zip(&other.banks) {
            a.weight.add_assign(&b.weight);
            a.bias.add_assign(&b.bias);
        }
        self.tied.weight.add_assign(&other.tied.weight);
        self.tied.bias.add_assign(&other.tied.bias);
        if let (Some(a), Some(b)) = (self.untied.as_mut(), other.untied.as_ref()) {
            a.weight.add_assign(&b.weight);
            a.bias.add_assign(&b.bias);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.embedding.values_mut() {
            row.iter_mut().for_each(|x| *x *= factor);
        }
        for b in &mut self.banks {
            b.weight.scale(factor);
            b.bias.scale(factor);
        }
        self.tied.weight.scale(factor);
        self.tied.bias.scale(factor);
        if let Some(u) = &mut self.untied {
            u.weight.scale(factor);
            u.bias.scale(factor);
        }
    }

    /// Dense copy shaped like `params`.
    pub fn to_dense(&self, params: &ModelParams) -> ModelParams {
        let mut embedding = Tensor::zeros(params.embedding.shape());
        for (id, row) in &self.embedding {
            embedding.row_mut(*id as usize).copy_from_slice(row);
        }
        ModelParams {
            embedding,
            banks: self.banks.clone(),
            tied: self.tied.clone(),
            untied: self.untied.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.values().all(|r| r.iter().all(|x| x.is_finite()))
            && self.banks.iter().all(|b| b.weight.is_finite() && b.bias.is_finite())
            && self.tied.weight.is_finite()
            && self.tied.bias.is_finite()
            && self
                .untied
                .as_ref()
                .is_none_or(|u| u.weight.is_finite() && u.bias.is_finite())
    }
}

fn output_backward(
    layer: &OutputLayer,
    grad: &mut OutputLayer,
    features: &[f64],
    d_logits: &[f64],
    d_features: &mut [f64],
) {
    let c_count = layer.num_labels();
    for (c, &delta) in d_logits.iter().enumerate() {
        if delta == 0.0 {
            continue;
        }
        grad.bias.data_mut()[c] += delta;
        grad.bias.data_mut()[c_count + c] -= delta;
        for (g, f) in grad.weight.row_mut(c).iter_mut().zip(features) {
            *g += delta * f;
        }
        for (g, f) in grad.weight.row_mut(c_count + c).iter_mut().zip(features) {
            *g -= delta * f;
        }
        let on = layer.weight.row(c);
        let off = layer.weight.row(c_count + c);
        for ((df, a), b) in d_features.iter_mut().zip(on).zip(off) {
            *df += delta * (a - b);
        }
    }
}

/// Accumulate parameter gradients of a loss whose output gradient is
/// `upstream` into `grads`. Max-pool routes gradient to winning positions
/// only; the padding embedding row never receives gradient.
pub fn backward(
    trace: &ForwardTrace,
    params: &ModelParams,
    upstream: &OutputGrad,
    grads: &mut Gradients,
) -> Result<()> {
    let m_total = params.total_filters();
    if trace.features.len() != m_total || trace.logits.len() != params.num_labels() {
        return Err(Error::Shape("trace was produced by a different model".into()));
    }
    let c_count = params.num_labels();
    let mut d_features = vec![0.0; m_total];

    if !upstream.logits.is_empty() {
        output_backward(
            &params.tied,
            &mut grads.tied,
            &trace.features,
            &upstream.logits,
            &mut d_features,
        );
    }
    if upstream.untied_logits.iter().any(|&d| d != 0.0) {
        let layer = params.untied.as_ref().ok_or(Error::MissingUntiedLayer)?;
        let grad = grads.untied.as_mut().ok_or(Error::MissingUntiedLayer)?;
        output_backward(layer, grad, &trace.features, &upstream.untied_logits, &mut d_features);
    }
    for t in &upstream.tokens {
        if t.grad == 0.0 {
            continue;
        }
        let (c, n, gamma) = (t.label, t.token, t.grad);
        grads.tied.bias.data_mut()[c] += gamma;
        grads.tied.bias.data_mut()[c_count + c] -= gamma;
        let on = params.tied.weight.row(c);
        let off = params.tied.weight.row(c_count + c);
        for (j, &(start, width)) in trace.spans.iter().enumerate() {
            if n < start || n >= start + width {
                continue;
            }
            let f = trace.features[j];
            grads.tied.weight.row_mut(c)[j] += gamma * f;
            grads.tied.weight.row_mut(c_count + c)[j] -= gamma * f;
            d_features[j] += gamma * (on[j] - off[j]);
        }
    }

    if let Some(mask) = &trace.dropout_mask {
        for (d, m) in d_features.iter_mut().zip(mask) {
            *d *= m;
        }
    }

    let mut d_input = Tensor::zeros(trace.input.shape());
    let mut offset = 0;
    for ((bank, rec), grad) in params.banks.iter().zip(&trace.pools).zip(grads.banks.iter_mut()) {
        let count = bank.count();
        netops::conv1d_pool_backward(
            &trace.input,
            bank,
            rec,
            &d_features[offset..offset + count],
            grad,
            &mut d_input,
        );
        offset += count;
    }

    let dim = params.dim();
    for (p, &id) in trace.token_ids.iter().enumerate() {
        if id == PAD_ID {
            continue;
        }
        let row = d_input.row(p);
        if row.iter().all(|&x| x == 0.0) {
            continue;
        }
        let dst = grads.embedding.entry(id).or_insert_with(|| vec![0.0; dim]);
        for (a, b) in dst.iter_mut().zip(row) {
            *a += b;
        }
    }
    Ok(())
}
