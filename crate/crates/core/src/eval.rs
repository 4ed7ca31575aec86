//! ROUGE-1/2/L scoring and pooled click-log rates.

use std::collections::HashMap;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};
use smallvec::SmallVec;

use crate::corpus::{ProductRecord, Vocabulary};
use crate::encoder::{FeatureSource, ModelInput};
use crate::error::{Error, Result};
use crate::generator::{strip_eos, Generator};

/// Which ROUGE ratio to report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RougeVariant {
    #[default]
    F1,
    Recall,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn combine(hits: usize, cand_total: usize, ref_total: usize, variant: RougeVariant) -> f64 {
    if hits == 0 {
        return 0.0;
    }
    let recall = hits as f64 / ref_total as f64;
    match variant {
        RougeVariant::Recall => 100.0 * recall,
        RougeVariant::F1 => {
            let precision = hits as f64 / cand_total as f64;
            100.0 * 2.0 * precision * recall / (precision + recall)
        }
    }
}

/// Clipped n-gram overlap score in `[0, 100]`.
///
/// A reference shorter than `n` has no n-grams; the score is then 100 for an
/// identical candidate and 0 otherwise.
pub fn rouge_n<T: Eq + Hash>(
    candidate: &[T],
    reference: &[T],
    n: usize,
    variant: RougeVariant,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("ROUGE-n needs n >= 1"));
    }
    if reference.is_empty() {
        return Err(Error::invalid("empty reference"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    if reference.len() < n {
        return Ok(if candidate == reference { 100.0 } else { 0.0 });
    }
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let hits = refs
        .iter()
        .map(|(g, &c)| c.min(cand.get(g).copied().unwrap_or(0)))
        .sum();
    let cand_total = candidate.len().saturating_sub(n - 1);
    Ok(combine(hits, cand_total, reference.len() - n + 1, variant))
}

/// Longest common subsequence length by dynamic programming over one row.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: SmallVec<[usize; 32]> = SmallVec::from_elem(0, b.len());
    for x in a {
        let (mut diag, mut left) = (0, 0);
        for (y, cell) in b.iter().zip(row.iter_mut()) {
            let up = *cell;
            left = if x == y { diag + 1 } else { up.max(left) };
            *cell = left;
            diag = up;
        }
    }
    row.last().copied().unwrap_or(0)
}

pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T], variant: RougeVariant) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("empty reference"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let l = lcs_len(candidate, reference);
    Ok(combine(l, candidate.len(), reference.len(), variant))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

impl RougeScores {
    pub fn compute<T: Eq + Hash>(candidate: &[T], reference: &[T], variant: RougeVariant) -> Result<Self> {
        Ok(RougeScores {
            rouge1: rouge_n(candidate, reference, 1, variant)?,
            rouge2: rouge_n(candidate, reference, 2, variant)?,
            rouge_l: rouge_l(candidate, reference, variant)?,
        })
    }
}

/// Corpus means plus the per-pair scores they average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    pub variant: RougeVariant,
    pub count: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_pair: Vec<RougeScores>,
}

impl RougeReport {
    pub fn from_pairs(per_pair: Vec<RougeScores>, variant: RougeVariant) -> Self {
        let n = per_pair.len();
        let mean = |f: fn(&RougeScores) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_pair.iter().map(f).sum::<f64>() / n as f64
            }
        };
        RougeReport {
            variant,
            count: n,
            rouge1: mean(|s| s.rouge1),
            rouge2: mean(|s| s.rouge2),
            rouge_l: mean(|s| s.rouge_l),
            per_pair,
        }
    }
}

/// Anything that turns a record into a short title.
pub trait TitleGenerator {
    fn generate(&self, record: &ProductRecord) -> Result<Vec<String>>;
}

/// Returns the gold title; the ceiling every model is compared against.
pub struct GoldCopier;

impl TitleGenerator for GoldCopier {
    fn generate(&self, record: &ProductRecord) -> Result<Vec<String>> {
        record
            .short_title
            .clone()
            .ok_or_else(|| Error::data(format!("record {} has no short_title", record.label())))
    }
}

/// Greedy decoding with a trained generator.
pub struct GreedyTitler<'a> {
    pub generator: &'a Generator,
    pub vocab: &'a Vocabulary,
    pub source: &'a FeatureSource,
}

impl TitleGenerator for GreedyTitler<'_> {
    fn generate(&self, record: &ProductRecord) -> Result<Vec<String>> {
        let input = ModelInput::from_record(record, self.vocab, self.source, &self.generator.config().encoder)?;
        let encoded = self.generator.encode(&input)?;
        let trace = self.generator.greedy_decode(&encoded);
        self.vocab.decode(strip_eos(&trace.ids))
    }
}

/// Generates a title for every record and scores it against the gold one.
pub fn evaluate_corpus<G: TitleGenerator + ?Sized>(
    model: &G,
    records: &[ProductRecord],
    variant: RougeVariant,
) -> Result<RougeReport> {
    let generated = records
        .iter()
        .map(|r| model.generate(r))
        .collect::<Result<Vec<_>>>()?;
    evaluate_pairs(records, &generated, variant)
}

/// Scores `generated[i]` against the gold title of `records[i]`.
pub fn evaluate_pairs(
    records: &[ProductRecord],
    generated: &[Vec<String>],
    variant: RougeVariant,
) -> Result<RougeReport> {
    if records.len() != generated.len() {
        return Err(Error::invalid("one generated title per record required"));
    }
    let mut pairs = Vec::with_capacity(records.len());
    for (r, g) in records.iter().zip(generated) {
        let gold = r
            .short_title
            .as_ref()
            .ok_or_else(|| Error::data(format!("record {} has no short_title", r.label())))?;
        pairs.push(RougeScores::compute(g, gold, variant)?);
    }
    Ok(RougeReport::from_pairs(pairs, variant))
}

/// One product's counts from a click log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickLogRow {
    pub product_id: String,
    pub pv: u64,
    pub clicks: u64,
    pub trades: u64,
}

/// A ratio, or the marker for a zero denominator. Serialises as a number or `null`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rate {
    Defined(f64),
    Undefined,
}

impl Rate {
    pub fn new(num: u64, den: u64) -> Self {
        if den == 0 {
            Rate::Undefined
        } else {
            Rate::Defined(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Rate::Defined(v) => Some(v),
            Rate::Undefined => None,
        }
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.value().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.map_or(Rate::Undefined, Rate::Defined))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbMetrics {
    pub ctr: Rate,
    pub cvr: Rate,
    pub pv: u64,
    pub clicks: u64,
    pub trades: u64,
}

/// Pooled rates: summed numerators over summed denominators.
pub fn ctr_cvr(rows: &[ClickLogRow]) -> AbMetrics {
    let pv = rows.iter().map(|r| r.pv).sum();
    let clicks = rows.iter().map(|r| r.clicks).sum();
    let trades = rows.iter().map(|r| r.trades).sum();
    AbMetrics {
        ctr: Rate::new(clicks, pv),
        cvr: Rate::new(trades, clicks),
        pv,
        clicks,
        trades,
    }
}

const CLICK_LOG_HEADER: [&str; 4] = ["product_id", "pv", "clicks", "trades"];

/// Reads a CSV click log with header `product_id,pv,clicks,trades`.
pub fn load_click_log(path: &Path) -> Result<Vec<ClickLogRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_click_log(file)
}

pub fn read_click_log<R: std::io::Read>(reader: R) -> Result<Vec<ClickLogRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::data(format!("line 1: {e}")))?
        .clone();
    if header.iter().ne(CLICK_LOG_HEADER) {
        return Err(Error::data(format!(
            "line 1: expected header `{}`",
            CLICK_LOG_HEADER.join(",")
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<ClickLogRow>() {
        let row = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            let msg = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                _ => e.to_string(),
            };
            Error::data(format!("line {line}: {msg}"))
        })?;
        rows.push(row);
    }
    Ok(rows)
}
