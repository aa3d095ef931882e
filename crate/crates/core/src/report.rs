//! Audit payloads shared by the command line and the HTTP service, and their
//! plain-text rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::LabelSpace;
use crate::error::{Error, Result};
use crate::exemplar::{audit_label, AbsentPolicy, AuditResult, ExemplarClass, ExemplarDatabase, SNIPPET_CONTEXT};
use crate::model::{token_mask, ForwardTrace, Inference, MaskMode, ModelParams};
use crate::netops::sigmoid;

/// Per-token contribution score and highlight flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenView {
    pub token: String,
    pub score: f64,
    pub highlighted: bool,
}

/// Token scores of `label` over the real tokens, paired with their text.
pub fn token_views(
    trace: &ForwardTrace,
    params: &ModelParams,
    tokens: &[String],
    label: usize,
    mode: MaskMode,
) -> Result<Vec<TokenView>> {
    let mask = token_mask(trace, params, label, mode)?;
    Ok(mask
        .into_iter()
        .zip(tokens)
        .map(|(m, t)| TokenView {
            token: t.clone(),
            score: m.score,
            highlighted: m.highlighted,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarView {
    pub class: ExemplarClass,
    pub doc_id: String,
    pub code: String,
    pub token_index: usize,
    pub distance: f64,
    /// Softmax over negative distances of the present classes.
    pub normalized: f64,
    pub database_score: f64,
    pub snippet: String,
    pub snippet_focus: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionView {
    pub query: bool,
    pub exa: bool,
    pub exadr: bool,
    pub only_db: bool,
    pub exadr_t: bool,
}

/// Everything needed to display one (document, label) audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditPayload {
    pub model_hash: String,
    pub doc_id: String,
    pub code: String,
    pub description: String,
    pub train_frequency: usize,
    pub gold: Option<bool>,
    pub offset: f64,
    pub tau: f64,
    /// The label is not predicted under the current offset.
    pub query_negative: bool,
    pub token_index: usize,
    pub query_score: f64,
    pub probability: f64,
    /// Real tokens of the document around the key token.
    pub context: Vec<TokenView>,
    /// Index of the key token within `context`.
    pub context_focus: usize,
    /// Present classes in TP, FN, FP, TN order.
    pub exemplars: Vec<ExemplarView>,
    pub i_star: ExemplarClass,
    pub exa_score: f64,
    pub decisions: DecisionView,
}

impl AuditPayload {
    pub fn exemplar(&self, class: ExemplarClass) -> Option<&ExemplarView> {
        self.exemplars.iter().find(|e| e.class == class)
    }
}

/// Inputs of an audit beyond the model and database.
#[derive(Clone, Copy, Debug)]
pub struct AuditRequest<'a> {
    pub doc_id: &'a str,
    pub tokens: &'a [String],
    pub gold: Option<bool>,
    pub label: usize,
    pub offset: f64,
    pub tau: f64,
    pub policy: AbsentPolicy,
    pub model_hash: &'a str,
}

/// Audit one label of an evaluated document. `inference` must have been
/// computed with `request.offset`.
pub fn audit_payload(
    params: &ModelParams,
    db: &ExemplarDatabase,
    labels: &LabelSpace,
    trace: &ForwardTrace,
    inference: &Inference,
    request: &AuditRequest<'_>,
) -> Result<AuditPayload> {
    let label = request.label;
    if label >= labels.len() {
        return Err(Error::OutOfRange {
            index: label,
            len: labels.len(),
        });
    }
    let result: AuditResult = audit_label(db, trace, inference, label, request.policy)?;
    let views = token_views(trace, params, request.tokens, label, MaskMode::Combined)?;
    let n = result.token_index.min(views.len().saturating_sub(1));
    let lo = n.saturating_sub(SNIPPET_CONTEXT);
    let hi = (n + SNIPPET_CONTEXT + 1).min(views.len());
    let exemplars = ExemplarClass::ALL
        .iter()
        .filter_map(|&class| {
            result.neighbor(class).map(|nb| {
                let r = db.record(nb.record);
                ExemplarView {
                    class,
                    doc_id: r.doc_id.clone(),
                    code: labels.code(r.label).to_string(),
                    token_index: r.token_index,
                    distance: nb.distance,
                    normalized: result.prob(class),
                    database_score: r.database_score,
                    snippet: r.snippet.clone(),
                    snippet_focus: r.snippet_focus,
                }
            })
        })
        .collect();
    Ok(AuditPayload {
        model_hash: request.model_hash.to_string(),
        doc_id: request.doc_id.to_string(),
        code: labels.code(label).to_string(),
        description: labels.description(label).to_string(),
        train_frequency: labels.frequencies()[label],
        gold: request.gold,
        offset: request.offset,
        tau: request.tau,
        query_negative: !inference.predicted[label],
        token_index: result.token_index,
        query_score: result.query_score,
        probability: sigmoid(result.query_score + request.offset),
        context: views[lo..hi].to_vec(),
        context_focus: n - lo,
        exemplars,
        i_star: result.i_star,
        exa_score: result.exa_score,
        decisions: DecisionView {
            query: result.decisions.query,
            exa: result.decisions.exa,
            exadr: result.decisions.exadr,
            only_db: result.decisions.only_db,
            exadr_t: result.exadr_t(request.tau),
        },
    })
}

/// `word[code]` at the focus, `{...}` around highlighted runs.
fn render_context(tokens: &[TokenView], focus: usize, code: &str) -> String {
    let mut out = String::from("...");
    let mut open = false;
    for (i, t) in tokens.iter().enumerate() {
        out.push(' ');
        if t.highlighted && !open {
            out.push('{');
            open = true;
        }
        out.push_str(&t.token);
        if i == focus {
            let _ = write!(out, "[{code}]");
        }
        let next_highlighted = tokens.get(i + 1).is_some_and(|n| n.highlighted);
        if open && !next_highlighted {
            out.push('}');
            open = false;
        }
    }
    out.push_str(" ...");
    out
}

fn render_snippet(view: &ExemplarView) -> String {
    let words: Vec<String> = view
        .snippet
        .split(' ')
        .enumerate()
        .map(|(i, w)| {
            if i == view.snippet_focus {
                format!("{w}[{}]", view.code)
            } else {
                w.to_string()
            }
        })
        .collect();
    format!("... {} ...", words.join(" "))
}

/// Plain-text report in the layout of a printed audit table.
pub fn render_text(p: &AuditPayload) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Document {}", p.doc_id);
    let _ = writeln!(
        out,
        "Label {}: {}; label frequency in training: {}",
        p.code, p.description, p.train_frequency
    );
    let gold = match p.gold {
        Some(true) => "; gold",
        Some(false) => "; not gold",
        None => "",
    };
    let status = if p.query_negative { "not predicted" } else { "predicted" };
    let _ = writeln!(
        out,
        "Query: {status}, score {:.3}, probability {:.3} at offset {:.3}{gold}",
        p.query_score, p.probability, p.offset
    );
    let _ = writeln!(out, "  {}", render_context(&p.context, p.context_focus, &p.code));
    for e in &p.exemplars {
        let marked = matches!(e.class, ExemplarClass::Fn | ExemplarClass::Fp);
        let stars = if marked { "**" } else { "" };
        let nearest = if e.class == p.i_star { " (nearest)" } else { "" };
        let _ = writeln!(
            out,
            "{stars}Exemplar {} [{}]{stars}{nearest}: Normalized Softmax Distance: {:.3} (distance {:.3}, database score {:.3})",
            e.class.name(),
            e.code,
            e.normalized,
            e.distance,
            e.database_score
        );
        let _ = writeln!(out, "  Train Doc. {}: {}", e.doc_id, render_snippet(e));
    }
    let d = &p.decisions;
    let _ = writeln!(
        out,
        "Decisions: ExA {} (score {:.3}), ExADR {}, onlyDB {}, ExADR+t({:.2}) {}",
        d.exa, p.exa_score, d.exadr, d.only_db, p.tau, d.exadr_t
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tv(token: &str, highlighted: bool) -> TokenView {
        TokenView {
            token: token.into(),
            score: 0.0,
            highlighted,
        }
    }

    #[test]
    fn context_marks_focus_and_runs() {
        let toks = vec![
            tv("past", false),
            tv("history", true),
            tv("htn", true),
            tv("high", false),
        ];
        assert_eq!(
            render_context(&toks, 2, "401.9"),
            "... past {history htn[401.9]} high ..."
        );
    }

    #[test]
    fn snippet_marks_focus() {
        let v = ExemplarView {
            class: ExemplarClass::Tp,
            doc_id: "d".into(),
            code: "401.9".into(),
            token_index: 5,
            distance: 1.0,
            normalized: 0.6,
            database_score: 2.0,
            snippet: "medical history htn chol".into(),
            snippet_focus: 2,
        };
        assert_eq!(render_snippet(&v), "... medical history htn[401.9] chol ...");
    }
}
