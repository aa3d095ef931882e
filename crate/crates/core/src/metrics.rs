//! Evaluation: precision at z, micro/macro precision/recall/F1, and AUC.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores, predictions and gold labels for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRun {
    pub scores: Vec<Vec<f64>>,
    pub predicted: Vec<Vec<bool>>,
    pub gold: Vec<Vec<bool>>,
    /// Labels never seen in training; always predicted negative.
    pub unseen: Vec<bool>,
}

impl EvalRun {
    pub fn new(
        scores: Vec<Vec<f64>>,
        mut predicted: Vec<Vec<bool>>,
        gold: Vec<Vec<bool>>,
        unseen: Vec<bool>,
    ) -> Result<Self> {
        let c = unseen.len();
        if scores.len() != gold.len() || predicted.len() != gold.len() {
            return Err(Error::Shape(format!(
                "{} score rows, {} prediction rows, {} gold rows",
                scores.len(),
                predicted.len(),
                gold.len()
            )));
        }
        for (i, ((s, p), g)) in scores.iter().zip(&predicted).zip(&gold).enumerate() {
            if s.len() != c || p.len() != c || g.len() != c {
                return Err(Error::Shape(format!("document {i} does not have {c} labels")));
            }
        }
        for row in &mut predicted {
            for (p, &u) in row.iter_mut().zip(&unseen) {
                *p &= !u;
            }
        }
        Ok(EvalRun {
            scores,
            predicted,
            gold,
            unseen,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.gold.len()
    }

    pub fn num_labels(&self) -> usize {
        self.unseen.len()
    }
}

/// Indices of the `z` highest scores, ties broken by lower index.
pub fn top_z(scores: &[f64], z: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(z);
    idx
}

/// Mean over documents of `|top_z ∩ gold| / z`. With `adjusted`, the
/// denominator is `min(z, |gold|)` and documents without gold labels are
/// skipped.
pub fn precision_at_z(scores: &[Vec<f64>], gold: &[Vec<bool>], z: usize, adjusted: bool) -> Result<f64> {
    if z == 0 {
        return Err(Error::Config("z must be at least 1".into()));
    }
    if scores.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} score rows, {} gold rows",
            scores.len(),
            gold.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let c = scores[0].len();
    if z > c {
        return Err(Error::Config(format!("z = {z} exceeds the {c} labels")));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (s, g) in scores.iter().zip(gold) {
        if s.len() != c || g.len() != c {
            return Err(Error::Shape("ragged score or gold rows".into()));
        }
        let hits = top_z(s, z).into_iter().filter(|&l| g[l]).count();
        let denom = if adjusted {
            let n_gold = g.iter().filter(|&&y| y).count();
            if n_gold == 0 {
                continue;
            }
            z.min(n_gold)
        } else {
            z
        };
        total += hits as f64 / denom as f64;
        counted += 1;
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Prf {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

/// How macro F1 is formed from per-label counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MacroConvention {
    /// Mean of per-label F1.
    #[default]
    PerLabelMean,
    /// Harmonic mean of macro precision and macro recall.
    HarmonicOfMeans,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroOptions {
    #[serde(default)]
    pub convention: MacroConvention,
    /// Leave out labels with no gold and no predicted positives instead of
    /// counting them as zero.
    #[serde(default)]
    pub skip_zero_support: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub micro: Prf,
    #[serde(rename = "macro")]
    pub macro_: Prf,
}

pub fn micro_macro_f1(predicted: &[Vec<bool>], gold: &[Vec<bool>], options: MacroOptions) -> Result<F1Report> {
    if predicted.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} prediction rows, {} gold rows",
            predicted.len(),
            gold.len()
        )));
    }
    let c = gold.first().map_or(0, Vec::len);
    let mut counts = vec![(0usize, 0usize, 0usize); c];
    for (p, g) in predicted.iter().zip(gold) {
        if p.len() != c || g.len() != c {
            return Err(Error::Shape("ragged prediction or gold rows".into()));
        }
        for l in 0..c {
            match (p[l], g[l]) {
                (true, true) => counts[l].0 += 1,
                (true, false) => counts[l].1 += 1,
                (false, true) => counts[l].2 += 1,
                (false, false) => {}
            }
        }
    }
    let (tp, fp, fn_) = counts
        .iter()
        .fold((0, 0, 0), |acc, &(a, b, d)| (acc.0 + a, acc.1 + b, acc.2 + d));
    let micro = Prf::from_counts(tp, fp, fn_);

    let per_label: Vec<Prf> = counts
        .iter()
        .filter(|&&(a, b, d)| !(options.skip_zero_support && a + b + d == 0))
        .map(|&(a, b, d)| Prf::from_counts(a, b, d))
        .collect();
    let macro_ = if per_label.is_empty() {
        Prf::default()
    } else {
        let n = per_label.len() as f64;
        let precision = per_label.iter().map(|p| p.precision).sum::<f64>() / n;
        let recall = per_label.iter().map(|p| p.recall).sum::<f64>() / n;
        let f1 = match options.convention {
            MacroConvention::PerLabelMean => per_label.iter().map(|p| p.f1).sum::<f64>() / n,
            MacroConvention::HarmonicOfMeans => harmonic(precision, recall),
        };
        Prf { precision, recall, f1 }
    };
    Ok(F1Report { micro, macro_ })
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half. `None` when either class is empty.
pub fn rank_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&y| y).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Count, for every positive, the negatives strictly below it plus half
    // the negatives tied with it. Integer arithmetic in half units.
    let mut half_wins: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]].total_cmp(&scores[idx[i]]).is_eq() {
            j += 1;
        }
        let pos_here = idx[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        let neg_here = (j - i) as u128 - pos_here;
        half_wins += pos_here * (2 * negatives_below + neg_here);
        negatives_below += neg_here;
        i = j;
    }
    Some(half_wins as f64 / (2.0 * positives as f64 * negatives as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub micro: f64,
    /// `None` when no label has both classes.
    #[serde(rename = "macro")]
    pub macro_: Option<f64>,
}

pub fn auc(scores: &[Vec<f64>], gold: &[Vec<bool>]) -> Result<AucReport> {
    if scores.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} score rows, {} gold rows",
            scores.len(),
            gold.len()
        )));
    }
    let c = gold.first().map_or(0, Vec::len);
    if scores.iter().any(|s| s.len() != c) || gold.iter().any(|g| g.len() != c) {
        return Err(Error::Shape("ragged score or gold rows".into()));
    }
    let pooled_scores: Vec<f64> = scores.iter().flatten().copied().collect();
    let pooled_gold: Vec<bool> = gold.iter().flatten().copied().collect();
    let micro = rank_auc(&pooled_scores, &pooled_gold)
        .ok_or_else(|| Error::Config("AUC needs at least one positive and one negative cell".into()))?;
    let per_label: Vec<f64> = (0..c)
        .into_par_iter()
        .map(|l| {
            let s: Vec<f64> = scores.iter().map(|r| r[l]).collect();
            let g: Vec<bool> = gold.iter().map(|r| r[l]).collect();
            rank_auc(&s, &g)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let macro_ = if per_label.is_empty() {
        None
    } else {
        Some(per_label.iter().sum::<f64>() / per_label.len() as f64)
    };
    Ok(AucReport { micro, macro_ })
}

/// All metrics for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub docs: usize,
    pub labels: usize,
    pub auc: Option<AucReport>,
    pub f1: F1Report,
    /// `(z, P@z)` pairs.
    pub precision_at: Vec<(usize, f64)>,
}

pub fn report(run: &EvalRun, zs: &[usize], options: MacroOptions) -> Result<MetricReport> {
    let auc = auc(&run.scores, &run.gold).ok();
    let f1 = micro_macro_f1(&run.predicted, &run.gold, options)?;
    let precision_at = zs
        .iter()
        .filter(|&&z| z <= run.num_labels())
        .map(|&z| Ok((z, precision_at_z(&run.scores, &run.gold, z, false)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        docs: run.num_docs(),
        labels: run.num_labels(),
        auc,
        f1,
        precision_at,
    })
}

fn fmt3(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

impl MetricReport {
    /// Column names matching [`MetricReport::row`].
    pub fn header(&self) -> Vec<String> {
        let mut cols: Vec<String> = [
            "AUC macro",
            "AUC micro",
            "F1 macro",
            "F1 micro",
            "P macro",
            "R macro",
            "P micro",
            "R micro",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        cols.extend(self.precision_at.iter().map(|(z, _)| format!("P@{z}")));
        cols
    }

    pub fn row(&self) -> Vec<String> {
        let mut cols = vec![
            fmt3(self.auc.and_then(|a| a.macro_)),
            fmt3(self.auc.map(|a| a.micro)),
            fmt3(Some(self.f1.macro_.f1)),
            fmt3(Some(self.f1.micro.f1)),
            fmt3(Some(self.f1.macro_.precision)),
            fmt3(Some(self.f1.macro_.recall)),
            fmt3(Some(self.f1.micro.precision)),
            fmt3(Some(self.f1.micro.recall)),
        ];
        cols.extend(self.precision_at.iter().map(|&(_, p)| fmt3(Some(p))));
        cols
    }

    /// Tab-separated header and value lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.header().join("\t"));
        let _ = writeln!(out, "{}", self.row().join("\t"));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precision_at_five_with_three_gold_on_top() {
        let scores = vec![vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4]];
        let gold = vec![vec![true, true, true, false, false, false]];
        assert_eq!(precision_at_z(&scores, &gold, 5, false).unwrap(), 0.6);
        assert_eq!(precision_at_z(&scores, &gold, 5, true).unwrap(), 1.0);
        assert!(precision_at_z(&scores, &gold, 7, false).is_err());
        assert!(precision_at_z(&scores, &gold, 0, false).is_err());
    }

    #[test]
    fn top_z_ties_go_to_lower_id() {
        assert_eq!(top_z(&[1.0, 2.0, 2.0, 0.0], 2), vec![1, 2]);
        assert_eq!(top_z(&[0.0, 0.0, 0.0], 2), vec![0, 1]);
    }

    #[test]
    fn perfect_predictions() {
        let gold = vec![vec![true, false], vec![false, true]];
        let r = micro_macro_f1(&gold, &gold, MacroOptions::default()).unwrap();
        for v in [
            r.micro.precision,
            r.micro.recall,
            r.micro.f1,
            r.macro_.precision,
            r.macro_.recall,
            r.macro_.f1,
        ] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn no_positive_predictions_gives_zero() {
        let gold = vec![vec![true, false]];
        let pred = vec![vec![false, false]];
        let r = micro_macro_f1(&pred, &gold, MacroOptions::default()).unwrap();
        assert_eq!(r.micro, Prf::default());
        assert_eq!(r.macro_, Prf::default());
    }

    #[test]
    fn macro_conventions_differ() {
        // Label 0: P=1, R=1/2. Label 1: P=1/2, R=1.
        let gold = vec![vec![true, true], vec![true, false]];
        let pred = vec![vec![true, true], vec![false, true]];
        let mean = micro_macro_f1(&pred, &gold, MacroOptions::default()).unwrap();
        assert!((mean.macro_.f1 - 2.0 / 3.0).abs() < 1e-15);
        let harm = micro_macro_f1(
            &pred,
            &gold,
            MacroOptions {
                convention: MacroConvention::HarmonicOfMeans,
                skip_zero_support: false,
            },
        )
        .unwrap();
        assert!((harm.macro_.f1 - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_support_labels() {
        let gold = vec![vec![true, false]];
        let pred = vec![vec![true, false]];
        let counted = micro_macro_f1(&pred, &gold, MacroOptions::default()).unwrap();
        assert_eq!(counted.macro_.f1, 0.5);
        let skipped = micro_macro_f1(
            &pred,
            &gold,
            MacroOptions {
                skip_zero_support: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(skipped.macro_.f1, 1.0);
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(rank_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(rank_auc(&[0.5; 4], &[false, true, false, true]), Some(0.5));
        assert_eq!(rank_auc(&[0.5; 2], &[true, true]), None);
        let err = auc(&[vec![0.1, 0.2]], &[vec![false, false]]);
        assert!(err.is_err());
    }

    #[test]
    fn unseen_labels_never_predicted() {
        let run = EvalRun::new(
            vec![vec![1.0, 2.0]],
            vec![vec![true, true]],
            vec![vec![true, true]],
            vec![false, true],
        )
        .unwrap();
        assert_eq!(run.predicted, vec![vec![true, false]]);
    }

    #[test]
    fn report_formats_three_decimals() {
        let run = EvalRun::new(
            vec![vec![0.9, 0.1], vec![0.2, 0.7]],
            vec![vec![true, false], vec![false, true]],
            vec![vec![true, false], vec![false, true]],
            vec![false, false],
        )
        .unwrap();
        let r = report(&run, &[1, 5], MacroOptions::default()).unwrap();
        assert_eq!(r.precision_at, vec![(1, 1.0)]);
        let text = r.to_text();
        assert!(text.contains("1.000"));
        assert!(text.lines().next().unwrap().ends_with("P@1"));
    }
}
