//! Training objectives: document BCE, the token-level min/max terms and the
//! combined global/local term. Each loss is a mean over the evaluated labels;
//! the trainer then averages over the mini-batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax_first, argmin_first, combined_scores, ForwardTrace, ModelParams, OutputGrad, TokenGrad};
use crate::netops::{bce_with_logit, sigmoid, softplus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub bce: bool,
    pub min: bool,
    pub max: bool,
    pub combined: bool,
    /// Evaluate token losses only on the `k` labels with the highest `o'_c`.
    pub restrict_top_k: Option<usize>,
    /// Add the instance's gold labels to the restricted set.
    pub restrict_include_gold: bool,
    /// Take the token min/max over padding positions too.
    pub include_pad: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::base()
    }
}

impl LossConfig {
    pub fn base() -> Self {
        LossConfig {
            bce: true,
            min: false,
            max: false,
            combined: false,
            restrict_top_k: None,
            restrict_include_gold: true,
            include_pad: true,
        }
    }

    /// Min, max and combined terms.
    pub fn finetune() -> Self {
        LossConfig {
            bce: false,
            min: true,
            max: true,
            combined: true,
            ..LossConfig::base()
        }
    }

    pub fn minmax_only() -> Self {
        LossConfig {
            combined: false,
            ..LossConfig::finetune()
        }
    }

    pub fn is_finetune(&self) -> bool {
        self.min || self.max || self.combined
    }

    pub fn validate(&self) -> Result<()> {
        if self.bce && self.is_finetune() {
            return Err(Error::Config(
                "bce cannot be combined with fine-tuning terms in one phase".into(),
            ));
        }
        if !self.bce && !self.is_finetune() {
            return Err(Error::Config("no loss term enabled".into()));
        }
        if self.is_finetune() && !(self.min && self.max) {
            return Err(Error::Config("fine-tuning requires both the min and max terms".into()));
        }
        if self.restrict_top_k == Some(0) {
            return Err(Error::Config("restrict_top_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub upstream: OutputGrad,
}

/// Mean BCE over labels on document logits.
pub fn bce(logits: &[f64], gold: &[bool]) -> f64 {
    logits
        .iter()
        .zip(gold)
        .map(|(&o, &y)| bce_with_logit(o, y).0)
        .sum::<f64>()
        / logits.len() as f64
}

fn token_limit(trace: &ForwardTrace, include_pad: bool) -> usize {
    if include_pad || trace.real_len == 0 {
        trace.len()
    } else {
        trace.real_len
    }
}

/// Mean over labels of `L_min + L_max`.
pub fn min_max_loss(trace: &ForwardTrace, params: &ModelParams, gold: &[bool]) -> f64 {
    let cfg = LossConfig::minmax_only();
    evaluate(trace, params, gold, &cfg, None).expect("min/max loss").value
}

/// Mean over labels of `L_combined` alone.
pub fn combined_loss(trace: &ForwardTrace, params: &ModelParams, gold: &[bool]) -> Result<f64> {
    let untied = trace.untied_logits.as_ref().ok_or(Error::MissingUntiedLayer)?;
    let limit = token_limit(trace, true);
    let c_count = params.num_labels();
    let total: f64 = (0..c_count)
        .map(|c| {
            let s = combined_scores(trace, params, c);
            let (_, s_max) = argmax_first(&s[..limit]);
            bce_with_logit(untied[c] + s_max, gold[c]).0
        })
        .sum();
    Ok(total / c_count as f64)
}

/// The `k` labels with the highest `o'_c` (ties to the lower id), optionally
/// joined with the gold labels. Returned in ascending id order.
pub fn restrict_labels(untied_logits: &[f64], gold: &[bool], k: usize, include_gold: bool) -> Vec<usize> {
    let k = k.min(untied_logits.len());
    let mut order: Vec<usize> = (0..untied_logits.len()).collect();
    order.sort_by(|&a, &b| untied_logits[b].total_cmp(&untied_logits[a]).then(a.cmp(&b)));
    let mut chosen = vec![false; untied_logits.len()];
    for &c in &order[..k] {
        chosen[c] = true;
    }
    if include_gold {
        for (c, &y) in gold.iter().enumerate() {
            chosen[c] |= y;
        }
    }
    (0..chosen.len()).filter(|&c| chosen[c]).collect()
}

/// Evaluate every enabled term over `labels` (all labels when `None`) and
/// return the mean loss together with its output gradient.
pub fn evaluate(
    trace: &ForwardTrace,
    params: &ModelParams,
    gold: &[bool],
    config: &LossConfig,
    labels: Option<&[usize]>,
) -> Result<LossOutput> {
    let c_count = params.num_labels();
    if gold.len() != c_count {
        return Err(Error::Shape(format!(
            "gold has {} labels, model {}",
            gold.len(),
            c_count
        )));
    }
    if config.combined && trace.untied_logits.is_none() {
        return Err(Error::MissingUntiedLayer);
    }
    let all: Vec<usize>;
    let labels = match labels {
        Some(l) => l,
        None => {
            all = (0..c_count).collect();
            &all
        }
    };
    if labels.is_empty() {
        return Ok(LossOutput {
            value: 0.0,
            upstream: OutputGrad::default(),
        });
    }
    let scale = 1.0 / labels.len() as f64;
    let limit = token_limit(trace, config.include_pad);
    let mut upstream = OutputGrad {
        logits: if config.bce { vec![0.0; c_count] } else { Vec::new() },
        untied_logits: if config.combined {
            vec![0.0; c_count]
        } else {
            Vec::new()
        },
        tokens: Vec::new(),
    };
    let mut total = 0.0;
    for &c in labels {
        let y = gold[c];
        if config.bce {
            let (l, d) = bce_with_logit(trace.logits[c], y);
            total += l;
            upstream.logits[c] += d * scale;
        }
        if !config.is_finetune() {
            continue;
        }
        let s = combined_scores(trace, params, c);
        let s = &s[..limit];
        if config.min {
            let (n, s_min) = argmin_first(s);
            total += softplus(s_min);
            upstream.tokens.push(TokenGrad {
                label: c,
                token: n,
                grad: sigmoid(s_min) * scale,
            });
        }
        let (n_max, s_max) = argmax_first(s);
        let mut d_max = 0.0;
        if config.max {
            let (l, d) = bce_with_logit(s_max, y);
            total += l;
            d_max += d;
        }
        if config.combined {
            let o2 = trace.untied_logits.as_ref().unwrap()[c];
            let (l, d) = bce_with_logit(o2 + s_max, y);
            total += l;
            d_max += d;
            upstream.untied_logits[c] += d * scale;
        }
        if d_max != 0.0 {
            upstream.tokens.push(TokenGrad {
                label: c,
                token: n_max,
                grad: d_max * scale,
            });
        }
    }
    let value = total * scale;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss value {value}")));
    }
    Ok(LossOutput { value, upstream })
}
