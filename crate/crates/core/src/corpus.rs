//! WMT-style direct-assessment data: TSV datasets, per-annotator z-score
//! normalization and prediction files.
//!
//! Dataset files are UTF-8 with LF line endings and a header row:
//!
//! ```text
//! id<TAB>source<TAB>target                      (unlabeled)
//! id<TAB>source<TAB>target<TAB>scores<TAB>z_mean  (labeled)
//! ```
//!
//! `scores` is a space-separated list of raw DA values in `[0, 100]`, one
//! per annotator, and may be empty. Numbers are written in Rust's shortest
//! round-trip decimal form, so parsing and rewriting a file produced by
//! this module reproduces it byte for byte.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNLABELED_HEADER: &str = "id\tsource\ttarget";
pub const LABELED_HEADER: &str = "id\tsource\ttarget\tscores\tz_mean";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Contract(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedPair {
    pub segment_id: String,
    pub source: String,
    pub target: String,
    /// Raw DA scores in `[0, 100]`, one per annotator.
    pub raw_scores: Vec<f64>,
    /// Mean annotator z-score; `None` only for unlabeled test data.
    pub z_mean: Option<f64>,
}

impl AnnotatedPair {
    pub fn labeled(
        id: impl Into<String>,
        source: impl Into<String>,
        target: impl Into<String>,
        z: f64,
    ) -> Self {
        Self {
            segment_id: id.into(),
            source: source.into(),
            target: target.into(),
            raw_scores: Vec::new(),
            z_mean: Some(z),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub language_pair: String,
    pub pairs: Vec<AnnotatedPair>,
}

impl Dataset {
    pub fn new(split: Split, language_pair: impl Into<String>, pairs: Vec<AnnotatedPair>) -> Result<Self> {
        let ds = Self {
            split,
            language_pair: language_pair.into(),
            pairs,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn has_labels(&self) -> bool {
        !self.pairs.is_empty() && self.pairs.iter().all(|p| p.z_mean.is_some())
    }

    /// Gold labels in row order; fails if any row is unlabeled.
    pub fn labels(&self) -> Result<Vec<f64>> {
        self.pairs
            .iter()
            .map(|p| {
                p.z_mean
                    .ok_or_else(|| Error::Contract(format!("segment {} has no gold label", p.segment_id)))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.pairs {
            if !seen.insert(p.segment_id.as_str()) {
                return Err(Error::Integrity(format!(
                    "duplicate segment id {:?}",
                    p.segment_id
                )));
            }
            if let Some(bad) = p.raw_scores.iter().find(|s| !(0.0..=100.0).contains(*s)) {
                return Err(Error::Integrity(format!(
                    "segment {}: raw score {bad} outside [0, 100]",
                    p.segment_id
                )));
            }
            match p.z_mean {
                Some(z) if !z.is_finite() => {
                    return Err(Error::Integrity(format!(
                        "segment {}: z_mean is not finite",
                        p.segment_id
                    )))
                }
                None if self.split != Split::Test => {
                    return Err(Error::Integrity(format!(
                        "segment {}: {} split must be labeled",
                        p.segment_id, self.split
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Recomputes every `z_mean` from the raw scores, treating the i-th score
    /// of each row as annotator i.
    pub fn relabel_from_raw_scores(&mut self) -> Result<()> {
        let k = self.pairs.first().map_or(0, |p| p.raw_scores.len());
        if k == 0 {
            return Err(Error::Contract("no raw scores to normalize".into()));
        }
        if let Some(p) = self.pairs.iter().find(|p| p.raw_scores.len() != k) {
            return Err(Error::Contract(format!(
                "segment {} has {} raw scores, expected {k}",
                p.segment_id,
                p.raw_scores.len()
            )));
        }
        let columns: Vec<Vec<f64>> = (0..k)
            .map(|a| self.pairs.iter().map(|p| p.raw_scores[a]).collect())
            .collect();
        let z = zscore_normalize(&columns)?;
        for (p, z) in self.pairs.iter_mut().zip(z) {
            p.z_mean = Some(z);
        }
        Ok(())
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Splits on LF, dropping the empty piece after a final newline.
fn split_lines(text: &str) -> Vec<&str> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    if lines.last() == Some(&"") {
        lines.pop();
    }
    lines
}

pub fn parse_tsv(path: impl AsRef<Path>, has_labels: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv_str(&text, has_labels, path)
}

/// Parses a dataset, reading whether it carries labels from its header.
pub fn parse_tsv_auto(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = text.split('\n').next().unwrap_or("");
    parse_tsv_str(&text, header == LABELED_HEADER, path)
}

/// Parses dataset text; `path` is only used in error messages. Labeled data
/// becomes a train split, unlabeled data a test split.
pub fn parse_tsv_str(text: &str, has_labels: bool, path: &Path) -> Result<Dataset> {
    let lines = split_lines(text);
    let expected_header = if has_labels {
        LABELED_HEADER
    } else {
        UNLABELED_HEADER
    };
    match lines.first() {
        Some(h) if *h == expected_header => {}
        Some(h) => {
            return Err(parse_err(
                path,
                1,
                format!("expected header {expected_header:?}, found {h:?}"),
            ))
        }
        None => return Err(parse_err(path, 1, "missing header line")),
    }
    let columns = if has_labels { 5 } else { 3 };
    let mut pairs = Vec::with_capacity(lines.len().saturating_sub(1));
    let mut seen = HashSet::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != columns {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {columns} tab-separated columns, found {}", fields.len()),
            ));
        }
        let segment_id = fields[0].to_string();
        if segment_id.is_empty() {
            return Err(parse_err(path, line_no, "empty segment id"));
        }
        if !seen.insert(segment_id.clone()) {
            return Err(Error::Integrity(format!(
                "{}:{line_no}: duplicate segment id {segment_id:?}",
                path.display()
            )));
        }
        let (raw_scores, z_mean) = if has_labels {
            let raw_scores = if fields[3].is_empty() {
                Vec::new()
            } else {
                fields[3]
                    .split(' ')
                    .map(|s| {
                        let v: f64 = s
                            .parse()
                            .map_err(|_| parse_err(path, line_no, format!("score {s:?} is not a number")))?;
                        if !(0.0..=100.0).contains(&v) {
                            return Err(parse_err(path, line_no, format!("score {s} outside [0, 100]")));
                        }
                        Ok(v)
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let z: f64 = fields[4]
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("z_mean {:?} is not a number", fields[4])))?;
            if !z.is_finite() {
                return Err(parse_err(path, line_no, "z_mean must be finite"));
            }
            (raw_scores, Some(z))
        } else {
            (Vec::new(), None)
        };
        pairs.push(AnnotatedPair {
            segment_id,
            source: fields[1].to_string(),
            target: fields[2].to_string(),
            raw_scores,
            z_mean,
        });
    }
    let split = if has_labels { Split::Train } else { Split::Test };
    Dataset::new(split, "", pairs)
}

fn check_field(value: &str, what: &str, id: &str) -> Result<()> {
    if value.contains('\t') || value.contains('\n') {
        return Err(Error::Contract(format!(
            "segment {id}: {what} contains a tab or newline"
        )));
    }
    Ok(())
}

/// Canonical text for a dataset. Writes the labeled layout iff every row is
/// labeled.
pub fn format_dataset(ds: &Dataset) -> Result<String> {
    let labeled = ds.has_labels();
    let mut out = String::new();
    out.push_str(if labeled { LABELED_HEADER } else { UNLABELED_HEADER });
    out.push('\n');
    for p in &ds.pairs {
        check_field(&p.segment_id, "id", &p.segment_id)?;
        check_field(&p.source, "source", &p.segment_id)?;
        check_field(&p.target, "target", &p.segment_id)?;
        write!(out, "{}\t{}\t{}", p.segment_id, p.source, p.target).expect("string write");
        if labeled {
            out.push('\t');
            for (i, s) in p.raw_scores.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                write!(out, "{s}").expect("string write");
            }
            write!(out, "\t{}", p.z_mean.expect("labeled")).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = format_dataset(ds)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-annotator z-scores averaged per segment.
///
/// `columns[a][s]` is annotator `a`'s raw score for segment `s`. Each column
/// is standardized with its own mean and sample (n-1) standard deviation;
/// the result holds, per segment, the mean of its annotators' z-scores.
pub fn zscore_normalize(columns: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = columns
        .first()
        .ok_or_else(|| Error::Contract("zscore_normalize needs at least one annotator".into()))?;
    let n = first.len();
    if n < 2 {
        return Err(Error::Contract(format!(
            "z-scoring needs at least 2 segments per annotator, got {n}"
        )));
    }
    if let Some(a) = columns.iter().position(|c| c.len() != n) {
        return Err(Error::Contract(format!(
            "annotator column {a} has {} scores, expected {n}",
            columns[a].len()
        )));
    }
    let mut z_mean = vec![0.0; n];
    for (a, col) in columns.iter().enumerate() {
        let z = zscore_column(col).ok_or(Error::DegenerateAnnotator(a))?;
        for (acc, v) in z_mean.iter_mut().zip(z) {
            *acc += v;
        }
    }
    let k = columns.len() as f64;
    z_mean.iter_mut().for_each(|v| *v /= k);
    Ok(z_mean)
}

/// `None` when the column has zero variance.
fn zscore_column(col: &[f64]) -> Option<Vec<f64>> {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sd = (ss / (n - 1.0)).sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return None;
    }
    Some(col.iter().map(|v| (v - mean) / sd).collect())
}

/// One model's scores, in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSet {
    pub entries: Vec<(String, f64)>,
}

impl PredictionSet {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self> {
        let p = Self { entries };
        p.validate()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|&(_, s)| s).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (id, score) in &self.entries {
            if !seen.insert(id.as_str()) {
                return Err(Error::Integrity(format!(
                    "duplicate segment id {id:?} in predictions"
                )));
            }
            if !score.is_finite() {
                return Err(Error::Numeric(format!(
                    "segment {id}: score {score} is not finite"
                )));
            }
        }
        Ok(())
    }
}

pub fn format_predictions(preds: &PredictionSet) -> Result<String> {
    let mut out = String::new();
    for (id, score) in &preds.entries {
        check_field(id, "id", id)?;
        writeln!(out, "{id}\t{score}").expect("string write");
    }
    Ok(out)
}

pub fn write_predictions(preds: &PredictionSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    preds.validate()?;
    let text = format_predictions(preds)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<PredictionSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, path)
}

pub fn parse_predictions(text: &str, path: &Path) -> Result<PredictionSet> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in split_lines(text).into_iter().enumerate() {
        let line_no = i + 1;
        let Some((id, score)) = line.split_once('\t') else {
            return Err(parse_err(path, line_no, "expected segment_id<TAB>score"));
        };
        if score.contains('\t') {
            return Err(parse_err(path, line_no, "expected exactly 2 columns"));
        }
        let v: f64 = score
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("score {score:?} is not a number")))?;
        if !v.is_finite() {
            return Err(parse_err(path, line_no, "score must be finite"));
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::Integrity(format!(
                "{}:{line_no}: duplicate segment id {id:?}",
                path.display()
            )));
        }
        entries.push((id.to_string(), v));
    }
    Ok(PredictionSet { entries })
}
