//! Pearson and Spearman correlation, gold alignment and leaderboards.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, PredictionSet};
use crate::error::{Error, Result};

/// Pearson's r with mean-subtracted (two-pass) sums in 64-bit.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "correlation inputs differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 samples, got {n}"
        )));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("input vector is constant".into()));
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    if !r.is_finite() {
        return Err(Error::UndefinedCorrelation(format!("non-finite coefficient {r}")));
    }
    Ok(r.clamp(-1.0, 1.0))
}

/// Ascending 1-based ranks; ties share the mean of the positions they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        // Positions i+1 ..= j share their mean rank.
        let rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = rank;
        }
        i = j;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of the average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "correlation inputs differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    #[serde(rename = "method")]
    pub method_name: String,
    #[serde(rename = "pair")]
    pub language_pair: String,
    #[serde(rename = "spearman")]
    pub spearman_rho: f64,
    #[serde(rename = "pearson")]
    pub pearson_r: f64,
    pub n: usize,
}

/// Aligns predictions with gold labels by segment id and correlates them.
/// Predictions for ids absent from `gold` are ignored.
pub fn evaluate(preds: &PredictionSet, gold: &Dataset, method: &str) -> Result<CorrelationReport> {
    let mut by_id: HashMap<&str, f64> = HashMap::with_capacity(preds.len());
    for (id, score) in &preds.entries {
        if by_id.insert(id.as_str(), *score).is_some() {
            return Err(Error::Integrity(format!(
                "duplicate segment id {id:?} in predictions"
            )));
        }
    }
    let mut predicted = Vec::with_capacity(gold.len());
    let mut labels = Vec::with_capacity(gold.len());
    for pair in &gold.pairs {
        let score = by_id
            .get(pair.segment_id.as_str())
            .ok_or_else(|| Error::Alignment(format!("no prediction for segment {:?}", pair.segment_id)))?;
        let label = pair
            .z_mean
            .ok_or_else(|| Error::Contract(format!("gold segment {:?} has no label", pair.segment_id)))?;
        predicted.push(*score);
        labels.push(label);
    }
    Ok(CorrelationReport {
        method_name: method.to_string(),
        language_pair: gold.language_pair.clone(),
        spearman_rho: spearman(&predicted, &labels)?,
        pearson_r: pearson(&predicted, &labels)?,
        n: labels.len(),
    })
}

/// Leaderboard ordering key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SortKey {
    #[default]
    Spearman,
    Pearson,
    Method,
}

impl std::str::FromStr for SortKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spearman" => Ok(SortKey::Spearman),
            "pearson" => Ok(SortKey::Pearson),
            "method" => Ok(SortKey::Method),
            other => Err(Error::Contract(format!("unknown sort key {other:?}"))),
        }
    }
}

/// One JSON leaderboard row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub method: String,
    pub pair: String,
    pub spearman: f64,
    pub pearson: f64,
    pub n: usize,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Leaderboard {
    /// Sorted by pair, then sort key (descending for coefficients), then
    /// method name.
    pub entries: Vec<LeaderboardEntry>,
    pub text: String,
}

impl Leaderboard {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("leaderboard serializes")
    }

    pub fn best_for(&self, pair: &str) -> Vec<&LeaderboardEntry> {
        self.entries.iter().filter(|e| e.pair == pair && e.best).collect()
    }
}

fn key_value(e: &LeaderboardEntry, key: SortKey) -> f64 {
    match key {
        SortKey::Spearman | SortKey::Method => e.spearman,
        SortKey::Pearson => e.pearson,
    }
}

/// Compares at the 3-decimal precision the tables display.
fn rounded(v: f64) -> i64 {
    (v * 1000.0).round() as i64
}

fn order_by(key: SortKey) -> impl Fn(&LeaderboardEntry, &LeaderboardEntry) -> Ordering {
    move |a, b| match key {
        SortKey::Method => a.method.cmp(&b.method),
        _ => rounded(key_value(b, key))
            .cmp(&rounded(key_value(a, key)))
            .then_with(|| a.method.cmp(&b.method)),
    }
}

pub fn render_leaderboard(reports: &[CorrelationReport], key: SortKey) -> Result<Leaderboard> {
    if reports.is_empty() {
        return Err(Error::Contract("leaderboard needs at least one report".into()));
    }
    let mut cells: BTreeMap<(String, String), &CorrelationReport> = BTreeMap::new();
    for r in reports {
        let k = (r.language_pair.clone(), r.method_name.clone());
        if cells.insert(k, r).is_some() {
            return Err(Error::Integrity(format!(
                "two reports for method {:?} on pair {:?}",
                r.method_name, r.language_pair
            )));
        }
    }

    let mut best_by_pair: BTreeMap<&str, i64> = BTreeMap::new();
    for r in reports {
        let v = rounded(r.spearman_rho);
        best_by_pair
            .entry(r.language_pair.as_str())
            .and_modify(|b| *b = (*b).max(v))
            .or_insert(v);
    }

    let mut entries: Vec<LeaderboardEntry> = cells
        .values()
        .map(|r| LeaderboardEntry {
            method: r.method_name.clone(),
            pair: r.language_pair.clone(),
            spearman: r.spearman_rho,
            pearson: r.pearson_r,
            n: r.n,
            best: rounded(r.spearman_rho) == best_by_pair[r.language_pair.as_str()],
        })
        .collect();
    let cmp = order_by(key);
    entries.sort_by(|a, b| a.pair.cmp(&b.pair).then_with(|| cmp(a, b)));

    let text = render_table(&entries, key);
    Ok(Leaderboard { entries, text })
}

/// Wide layout: one row per method, a (rho, r) column pair per language
/// pair, `*` marking the best Spearman in each pair.
fn render_table(entries: &[LeaderboardEntry], key: SortKey) -> String {
    let pairs: Vec<&str> = {
        let mut p: Vec<&str> = entries.iter().map(|e| e.pair.as_str()).collect();
        p.dedup();
        p
    };
    // Methods ordered by their mean key value across pairs.
    let mut methods: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for e in entries {
        let slot = methods.entry(e.method.as_str()).or_insert((0.0, 0));
        slot.0 += key_value(e, key);
        slot.1 += 1;
    }
    let mut method_order: Vec<(&str, f64)> = methods
        .into_iter()
        .map(|(m, (sum, n))| (m, sum / n as f64))
        .collect();
    method_order.sort_by(|a, b| match key {
        SortKey::Method => a.0.cmp(b.0),
        _ => rounded(b.1).cmp(&rounded(a.1)).then_with(|| a.0.cmp(b.0)),
    });

    let lookup: HashMap<(&str, &str), &LeaderboardEntry> = entries
        .iter()
        .map(|e| ((e.method.as_str(), e.pair.as_str()), e))
        .collect();

    let name_width = method_order
        .iter()
        .map(|(m, _)| m.chars().count())
        .max()
        .unwrap_or(0)
        .max("Method".len());
    const CELL: usize = 8;

    let mut out = String::new();
    write!(out, "{:<4}{:<name_width$}", "", "").expect("string write");
    for pair in &pairs {
        write!(out, " | {:^w$}", pair, w = 2 * CELL + 1).expect("string write");
    }
    out.push('\n');
    write!(out, "{:<4}{:<name_width$}", "#", "Method").expect("string write");
    for _ in &pairs {
        write!(out, " | {:>CELL$} {:>CELL$}", "rho", "r").expect("string write");
    }
    out.push('\n');
    let width = out.lines().last().map_or(0, |l| l.chars().count());
    out.push_str(&"-".repeat(width));
    out.push('\n');
    for (i, (method, _)) in method_order.iter().enumerate() {
        write!(out, "{:<4}{:<name_width$}", i + 1, method).expect("string write");
        for pair in &pairs {
            match lookup.get(&(*method, *pair)) {
                Some(e) => {
                    let rho = format!("{}{:.3}", if e.best { "*" } else { "" }, e.spearman);
                    write!(out, " | {:>CELL$} {:>CELL$.3}", rho, e.pearson).expect("string write");
                }
                None => write!(out, " | {:>CELL$} {:>CELL$}", "-", "-").expect("string write"),
            }
        }
        out.push('\n');
    }
    out
}
