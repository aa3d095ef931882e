//! Tab-separated corpus format: `doc_id<TAB>tok tok ...<TAB>code;code;...`,
//! one split per file (`train.tsv`, `dev.tsv`, `test.tsv`), plus an optional
//! `descriptions.tsv` (`code<TAB>description`) that also fixes label order.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use super::{tokenize, Corpus, LabelSpace, RawDocument, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};

pub const DESCRIPTIONS_FILE: &str = "descriptions.tsv";

#[derive(Clone, Copy, Debug)]
pub struct IngestOptions {
    pub max_len: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

/// A row before label codes are mapped to ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitRow {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub codes: Vec<String>,
}

/// Read one split file. Tokens are lowercased, filtered to those containing
/// an alphabetic character, and truncated to `max_len`.
pub fn read_split(path: &Path, options: IngestOptions) -> Result<Vec<SplitRow>> {
    if !path.is_file() {
        return Err(Error::MissingSplit(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::malformed(
                path,
                line_no,
                format!(
                    "expected 3 tab-separated columns (doc id, tokens, labels), found {}",
                    cols.len()
                ),
            ));
        }
        let doc_id = cols[0].trim();
        if doc_id.is_empty() {
            return Err(Error::malformed(path, line_no, "empty document id"));
        }
        let tokens = tokenize(cols[1], options.max_len);
        let codes: Vec<String> = cols[2]
            .split(';')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(str::to_string)
            .collect();
        rows.push(SplitRow {
            doc_id: doc_id.to_string(),
            tokens,
            codes,
        });
    }
    Ok(rows)
}

fn read_descriptions(dir: &Path) -> Result<Vec<(String, String)>> {
    let path = dir.join(DESCRIPTIONS_FILE);
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (code, desc) = line.split_once('\t').unwrap_or((line, ""));
        if code.trim().is_empty() {
            return Err(Error::malformed(&path, i + 1, "empty label code"));
        }
        out.push((code.trim().to_string(), desc.to_string()));
    }
    Ok(out)
}

/// Read `train.tsv`, `dev.tsv` and `test.tsv` from `dir`.
///
/// The label space lists codes from `descriptions.tsv` first (in file order),
/// then train codes, then dev/test-only codes, each group sorted. Codes never
/// seen in train keep a training frequency of zero.
pub fn ingest_caml_format(dir: &Path, options: IngestOptions) -> Result<Corpus> {
    let train = read_split(&dir.join("train.tsv"), options)?;
    let dev = read_split(&dir.join("dev.tsv"), options)?;
    let test = read_split(&dir.join("test.tsv"), options)?;
    let described = read_descriptions(dir)?;

    let mut codes: Vec<String> = Vec::new();
    let mut descriptions: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut push = |code: &str, desc: &str, codes: &mut Vec<String>, descriptions: &mut Vec<String>| {
        if !index.contains_key(code) {
            index.insert(code.to_string(), codes.len());
            codes.push(code.to_string());
            descriptions.push(desc.to_string());
        }
    };
    for (code, desc) in &described {
        push(code, desc, &mut codes, &mut descriptions);
    }
    let train_codes: BTreeSet<&str> = train.iter().flat_map(|r| r.codes.iter().map(String::as_str)).collect();
    for code in &train_codes {
        push(code, "", &mut codes, &mut descriptions);
    }
    let other_codes: BTreeSet<&str> = dev
        .iter()
        .chain(&test)
        .flat_map(|r| r.codes.iter().map(String::as_str))
        .collect();
    for code in &other_codes {
        push(code, "", &mut codes, &mut descriptions);
    }
    let index: HashMap<&str, usize> = codes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();

    let mut freq = vec![0usize; codes.len()];
    let convert = |rows: Vec<SplitRow>, freq: Option<&mut Vec<usize>>| -> Vec<RawDocument> {
        let docs: Vec<RawDocument> = rows
            .into_iter()
            .map(|r| RawDocument {
                doc_id: r.doc_id,
                tokens: r.tokens,
                labels: r.codes.iter().map(|c| index[c.as_str()]).collect(),
            })
            .collect();
        if let Some(freq) = freq {
            for d in &docs {
                for &c in &d.labels {
                    freq[c] += 1;
                }
            }
        }
        docs
    };
    let train = convert(train, Some(&mut freq));
    let dev = convert(dev, None);
    let test = convert(test, None);
    if codes.is_empty() {
        return Err(Error::Config("corpus has no labels".into()));
    }
    Ok(Corpus {
        train,
        dev,
        test,
        labels: LabelSpace::new(codes, descriptions, freq),
    })
}

pub fn write_split(path: &Path, docs: &[RawDocument], labels: &LabelSpace) -> Result<()> {
    let mut out = String::new();
    for d in docs {
        let codes: Vec<&str> = d.labels.iter().map(|&c| labels.code(c)).collect();
        writeln!(out, "{}\t{}\t{}", d.doc_id, d.tokens.join(" "), codes.join(";")).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write all three splits and `descriptions.tsv` into `dir`.
pub fn write_caml_format(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_split(&dir.join("train.tsv"), &corpus.train, &corpus.labels)?;
    write_split(&dir.join("dev.tsv"), &corpus.dev, &corpus.labels)?;
    write_split(&dir.join("test.tsv"), &corpus.test, &corpus.labels)?;
    let mut desc = String::new();
    for i in 0..corpus.labels.len() {
        writeln!(desc, "{}\t{}", corpus.labels.code(i), corpus.labels.description(i)).unwrap();
    }
    std::fs::write(dir.join(DESCRIPTIONS_FILE), desc)?;
    Ok(())
}
