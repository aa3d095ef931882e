//! Planted-trigger corpus generator.
//!
//! Every label owns a disjoint trigger n-gram. A document carries label `c`
//! exactly when the trigger for `c` was planted in it; the planted position is
//! recorded in the trigger map and is never shown to the model. Decoys are
//! single trigger tokens of non-gold labels, always surrounded by noise, so
//! no label can be satisfied by a partial match.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, LabelSpace, RawDocument, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_labels: usize,
    pub trigger_len: usize,
    /// Explicit trigger n-grams, one per label. Generated when empty.
    pub triggers: Vec<Vec<String>>,
    pub noise_vocab: usize,
    pub doc_len_min: usize,
    pub doc_len_max: usize,
    pub labels_per_doc_min: usize,
    pub labels_per_doc_max: usize,
    pub max_decoys: usize,
    pub train_docs: usize,
    pub dev_docs: usize,
    pub test_docs: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_labels: 10,
            trigger_len: 2,
            triggers: Vec::new(),
            noise_vocab: 200,
            doc_len_min: 50,
            doc_len_max: 120,
            labels_per_doc_min: 1,
            labels_per_doc_max: 3,
            max_decoys: 2,
            train_docs: 1000,
            dev_docs: 200,
            test_docs: 200,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerRecord {
    pub split: Split,
    pub doc_id: String,
    pub label: usize,
    /// Index of the first trigger token in the document.
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub triggers: Vec<Vec<String>>,
    pub trigger_map: Vec<TriggerRecord>,
}

impl SyntheticCorpus {
    pub fn trigger_len(&self, label: usize) -> usize {
        self.triggers[label].len()
    }

    /// `split<TAB>doc_id<TAB>code<TAB>start<TAB>trigger` lines.
    pub fn trigger_map_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.trigger_map {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.split.name(),
                r.doc_id,
                self.corpus.labels.code(r.label),
                r.start,
                self.triggers[r.label].join(" ")
            )
            .unwrap();
        }
        out
    }
}

fn noise_token(i: usize) -> String {
    format!("w{i:03}")
}

fn default_trigger(label: usize, len: usize) -> Vec<String> {
    (0..len)
        .map(|j| format!("t{label}{}", (b'a' + j as u8) as char))
        .collect()
}

impl SyntheticSpec {
    fn resolved_triggers(&self) -> Result<Vec<Vec<String>>> {
        let triggers: Vec<Vec<String>> = if self.triggers.is_empty() {
            (0..self.num_labels)
                .map(|c| default_trigger(c, self.trigger_len))
                .collect()
        } else {
            self.triggers.clone()
        };
        if triggers.len() != self.num_labels {
            return Err(Error::Config(format!(
                "{} triggers given for {} labels",
                triggers.len(),
                self.num_labels
            )));
        }
        let noise: HashSet<String> = (0..self.noise_vocab).map(noise_token).collect();
        let mut owner: std::collections::HashMap<&str, usize> = Default::default();
        for (c, trig) in triggers.iter().enumerate() {
            if trig.is_empty() {
                return Err(Error::Config(format!("empty trigger for label {c}")));
            }
            for tok in trig {
                if !super::has_alphabetic(tok) {
                    return Err(Error::Config(format!(
                        "trigger token {tok:?} has no alphabetic character"
                    )));
                }
                if noise.contains(tok) {
                    return Err(Error::OverlappingTriggers(format!(
                        "trigger token {tok:?} is also a noise token"
                    )));
                }
                if let Some(&other) = owner.get(tok.as_str()) {
                    if other != c {
                        return Err(Error::OverlappingTriggers(format!(
                            "token {tok:?} appears in triggers for labels {other} and {c}"
                        )));
                    }
                }
                owner.insert(tok, c);
            }
        }
        Ok(triggers)
    }

    fn validate(&self) -> Result<()> {
        if self.num_labels == 0 {
            return Err(Error::Config("num_labels must be >= 1".into()));
        }
        if self.noise_vocab == 0 {
            return Err(Error::Config("noise_vocab must be >= 1".into()));
        }
        if self.doc_len_min > self.doc_len_max || self.labels_per_doc_min > self.labels_per_doc_max {
            return Err(Error::Config("min/max ranges are inverted".into()));
        }
        if self.labels_per_doc_max > self.num_labels {
            return Err(Error::Config("labels_per_doc_max exceeds num_labels".into()));
        }
        Ok(())
    }
}

/// Generate a deterministic planted-trigger corpus.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let triggers = spec.resolved_triggers()?;
    let max_trigger = triggers.iter().map(Vec::len).max().unwrap_or(1);
    let max_items = spec.labels_per_doc_max + spec.max_decoys;
    if spec.doc_len_min < max_items * (max_trigger + 1) + 1 {
        return Err(Error::Config(format!(
            "doc_len_min {} too short to hold {} planted items",
            spec.doc_len_min, max_items
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut trigger_map = Vec::new();
    let mut gen_split = |split: Split, n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<RawDocument>> {
        (0..n)
            .map(|i| {
                let doc_id = format!("{}-{:05}", split.name(), i);
                let (doc, starts) = generate_document(spec, &triggers, doc_id, rng)?;
                for (label, start) in starts {
                    trigger_map.push(TriggerRecord {
                        split,
                        doc_id: doc.doc_id.clone(),
                        label,
                        start,
                    });
                }
                Ok(doc)
            })
            .collect()
    };
    let train = gen_split(Split::Train, spec.train_docs, &mut rng)?;
    let dev = gen_split(Split::Dev, spec.dev_docs, &mut rng)?;
    let test = gen_split(Split::Test, spec.test_docs, &mut rng)?;

    let mut freq = vec![0usize; spec.num_labels];
    for d in &train {
        for &c in &d.labels {
            freq[c] += 1;
        }
    }
    let codes = (0..spec.num_labels).map(|c| format!("L{c:02}")).collect();
    let descriptions = triggers
        .iter()
        .enumerate()
        .map(|(c, t)| format!("synthetic label {c} (trigger \"{}\")", t.join(" ")))
        .collect();
    Ok(SyntheticCorpus {
        corpus: Corpus {
            train,
            dev,
            test,
            labels: LabelSpace::new(codes, descriptions, freq),
        },
        triggers,
        trigger_map,
    })
}

enum Item {
    Trigger(usize),
    Decoy(String),
}

fn generate_document(
    spec: &SyntheticSpec,
    triggers: &[Vec<String>],
    doc_id: String,
    rng: &mut ChaCha8Rng,
) -> Result<(RawDocument, Vec<(usize, usize)>)> {
    let len = rng.gen_range(spec.doc_len_min..=spec.doc_len_max);
    let k = rng.gen_range(spec.labels_per_doc_min..=spec.labels_per_doc_max);
    let gold: BTreeSet<usize> = sample(rng, spec.num_labels, k).into_iter().collect();

    let mut items: Vec<Item> = gold.iter().map(|&c| Item::Trigger(c)).collect();
    let others: Vec<usize> = (0..spec.num_labels).filter(|c| !gold.contains(c)).collect();
    if !others.is_empty() {
        let n_decoys = rng.gen_range(0..=spec.max_decoys);
        for _ in 0..n_decoys {
            let c = *others.choose(rng).unwrap();
            let tok = triggers[c].choose(rng).unwrap().clone();
            items.push(Item::Decoy(tok));
        }
    }
    items.shuffle(rng);

    let planted: usize = items
        .iter()
        .map(|it| match it {
            Item::Trigger(c) => triggers[*c].len(),
            Item::Decoy(_) => 1,
        })
        .sum();
    let n_noise = len - planted;
    // Distinct gaps in 0..=n_noise keep every planted item flanked by noise.
    let mut gaps: Vec<usize> = sample(rng, n_noise + 1, items.len()).into_vec();
    gaps.sort_unstable();

    let mut tokens = Vec::with_capacity(len);
    let mut starts = Vec::new();
    let mut next_item = 0;
    for gap in 0..=n_noise {
        while next_item < items.len() && gaps[next_item] == gap {
            match &items[next_item] {
                Item::Trigger(c) => {
                    starts.push((*c, tokens.len()));
                    tokens.extend(triggers[*c].iter().cloned());
                }
                Item::Decoy(tok) => tokens.push(tok.clone()),
            }
            next_item += 1;
        }
        if gap < n_noise {
            tokens.push(noise_token(rng.gen_range(0..spec.noise_vocab)));
        }
    }
    debug_assert_eq!(tokens.len(), len);

    // Soundness: the trigger for c occurs iff c is gold, and only where recorded.
    for (c, trig) in triggers.iter().enumerate() {
        let found: Vec<usize> = tokens
            .windows(trig.len())
            .enumerate()
            .filter(|(_, w)| *w == trig.as_slice())
            .map(|(i, _)| i)
            .collect();
        let expected: Vec<usize> = starts.iter().filter(|(l, _)| *l == c).map(|(_, s)| *s).collect();
        if found != expected {
            return Err(Error::OverlappingTriggers(format!(
                "trigger for label {c} matched unexpectedly in {doc_id}"
            )));
        }
    }
    starts.sort_unstable();
    Ok((
        RawDocument {
            doc_id,
            tokens,
            labels: gold,
        },
        starts,
    ))
}
