//! Answer evaluation against expert references.
//!
//! Each question gets a similarity score `S` (cosine between word n-gram
//! count profiles of candidate and reference), an externally supplied expert
//! grade `G`, and an evaluation score `E = (S + G) / 2`. Scores are carried as
//! decimals so that `E` and the column means are exact for two-decimal inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use rust_decimal::prelude::*;
use rust_decimal::RoundingStrategy;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::tokenize;

pub const MEAN_ROW_LABEL: &str = "Rounded Mean (mu)";

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("reference answer for {0} is empty")]
    EmptyReference(String),
    #[error("n-gram sizes must be a non-empty set of positive integers")]
    InvalidNValues,
    #[error("score {value} for {question_id} is outside [0, 1]")]
    OutOfRange { question_id: String, value: String },
    #[error("nothing to summarize")]
    NoRecords,
    #[error("malformed CSV at line {line}: {reason}")]
    Csv { line: u64, reason: String },
}

/// Word n-gram counts keyed by `(n, space-joined tokens)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NgramProfile {
    pub counts: BTreeMap<(usize, String), u32>,
}

impl NgramProfile {
    pub fn total_for(&self, n: usize) -> u64 {
        self.counts
            .iter()
            .filter(|((k, _), _)| *k == n)
            .map(|(_, &c)| u64::from(c))
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

pub fn default_n_values() -> BTreeSet<usize> {
    BTreeSet::from([1, 2])
}

fn check_n_values(n_values: &BTreeSet<usize>) -> Result<(), EvalError> {
    if n_values.is_empty() || n_values.contains(&0) {
        return Err(EvalError::InvalidNValues);
    }
    Ok(())
}

pub fn ngram_profile(text: &str, n_values: &BTreeSet<usize>) -> NgramProfile {
    let tokens = tokenize(text);
    let mut counts = BTreeMap::new();
    for &n in n_values.iter().filter(|&&n| n > 0) {
        for gram in tokens.windows(n) {
            *counts.entry((n, gram.join(" "))).or_insert(0) += 1;
        }
    }
    NgramProfile { counts }
}

/// Cosine similarity of the two n-gram profiles, in `[0, 1]`.
pub fn similarity_score(candidate: &str, reference: &str, n_values: &BTreeSet<usize>) -> Result<f64, EvalError> {
    check_n_values(n_values)?;
    let reference = ngram_profile(reference, n_values);
    if reference.is_empty() {
        return Err(EvalError::EmptyReference(String::new()));
    }
    let candidate = ngram_profile(candidate, n_values);
    if candidate.is_empty() {
        return Ok(0.0);
    }
    // integer sums keep identical profiles at exactly 1.0
    let dot: u64 = candidate
        .counts
        .iter()
        .filter_map(|(k, &a)| reference.counts.get(k).map(|&b| u64::from(a) * u64::from(b)))
        .sum();
    let sq = |p: &NgramProfile| p.counts.values().map(|&c| u64::from(c).pow(2)).sum::<u64>();
    let denom = (sq(&candidate) as f64 * sq(&reference) as f64).sqrt();
    Ok((dot as f64 / denom).clamp(0.0, 1.0))
}

fn check_unit(question_id: &str, value: Decimal) -> Result<Decimal, EvalError> {
    if value < Decimal::ZERO || value > Decimal::ONE {
        return Err(EvalError::OutOfRange {
            question_id: question_id.to_string(),
            value: value.to_string(),
        });
    }
    Ok(value)
}

/// `(S + G) / 2`.
pub fn evaluation_score(s: Decimal, g: Decimal) -> Result<Decimal, EvalError> {
    check_unit("", s)?;
    check_unit("", g)?;
    Ok(((s + g) / Decimal::TWO).normalize())
}

/// Converts a float to the decimal with the same shortest representation.
pub fn decimal_from_f64(x: f64) -> Decimal {
    Decimal::from_str(&x.to_string())
        .or_else(|_| Decimal::from_f64(x).ok_or(()))
        .map(|d| d.round_dp(20).normalize())
        .unwrap_or_default()
}

pub mod decimal_json {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Decimal, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.to_f64().unwrap_or(f64::NAN))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Decimal, D::Error> {
        f64::deserialize(d).map(decimal_from_f64)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(d: &Option<Decimal>, s: S) -> Result<S::Ok, S::Error> {
            match d {
                Some(d) => super::serialize(d, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Decimal>, D::Error> {
            Ok(Option::<f64>::deserialize(d)?.map(decimal_from_f64))
        }
    }
}


#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub question_id: String,
    pub question: String,
    pub reference_answer: String,
    pub candidate_answer: String,
}

/// A row of an evaluation report. `g` and `e` are absent for ungraded rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    #[serde(rename = "S", with = "decimal_json")]
    pub s: Decimal,
    #[serde(rename = "G", with = "decimal_json::option")]
    pub g: Option<Decimal>,
    #[serde(rename = "E", with = "decimal_json::option")]
    pub e: Option<Decimal>,
}

impl EvalRecord {
    pub fn graded(question_id: impl Into<String>, s: Decimal, g: Decimal) -> Result<Self, EvalError> {
        let question_id = question_id.into();
        check_unit(&question_id, s)?;
        check_unit(&question_id, g)?;
        Ok(Self {
            e: Some(evaluation_score(s, g)?),
            question_id,
            s,
            g: Some(g),
        })
    }
}

/// Decimal places used for the rounded means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Rounding {
    pub s: u32,
    pub g: u32,
    pub e: u32,
}

impl Default for Rounding {
    fn default() -> Self {
        Self { s: 2, g: 2, e: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub records: Vec<EvalRecord>,
    #[serde(with = "decimal_json")]
    pub mean_s: Decimal,
    #[serde(with = "decimal_json")]
    pub mean_g: Decimal,
    #[serde(with = "decimal_json")]
    pub mean_e: Decimal,
    #[serde(with = "decimal_json")]
    pub rounded_mean_s: Decimal,
    #[serde(with = "decimal_json")]
    pub rounded_mean_g: Decimal,
    #[serde(with = "decimal_json")]
    pub rounded_mean_e: Decimal,
}

pub fn round_half_up(value: Decimal, decimals: u32) -> Decimal {
    value
        .round_dp_with_strategy(decimals, RoundingStrategy::MidpointAwayFromZero)
        .normalize()
}

/// Means over graded records plus their rounded forms.
pub fn summarize(records: &[EvalRecord], rounding: &Rounding) -> Result<EvalSummary, EvalError> {
    let graded: Vec<&EvalRecord> = records.iter().filter(|r| r.g.is_some()).collect();
    if graded.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let n = Decimal::from(graded.len());
    let mean = |f: &dyn Fn(&EvalRecord) -> Decimal| (graded.iter().map(|r| f(r)).sum::<Decimal>() / n).normalize();
    let mean_s = mean(&|r| r.s);
    let mean_g = mean(&|r| r.g.unwrap_or_default());
    let mean_e = mean(&|r| r.e.unwrap_or_default());
    Ok(EvalSummary {
        records: graded.into_iter().cloned().collect(),
        rounded_mean_s: round_half_up(mean_s, rounding.s),
        rounded_mean_g: round_half_up(mean_g, rounding.g),
        rounded_mean_e: round_half_up(mean_e, rounding.e),
        mean_s,
        mean_g,
        mean_e,
    })
}

/// One parsed row of an items file: either texts to score, or a row whose S
/// (and possibly G) is already known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalInput {
    Text(EvalItem),
    Scored {
        question_id: String,
        s: Decimal,
        g: Option<Decimal>,
    },
}

impl EvalInput {
    pub fn question_id(&self) -> &str {
        match self {
            EvalInput::Text(item) => &item.question_id,
            EvalInput::Scored { question_id, .. } => question_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRun {
    pub records: Vec<EvalRecord>,
    pub summary: Option<EvalSummary>,
    pub warnings: Vec<String>,
}

/// Scores every input, joins grades (the `grades` map wins over inline G
/// values) and summarizes the graded rows.
pub fn run_eval(
    inputs: &[EvalInput],
    grades: &BTreeMap<String, Decimal>,
    n_values: &BTreeSet<usize>,
    rounding: &Rounding,
) -> Result<EvalRun, EvalError> {
    check_n_values(n_values)?;
    for (qid, &g) in grades {
        check_unit(qid, g)?;
    }
    let mut records = Vec::with_capacity(inputs.len());
    let mut warnings = Vec::new();
    for input in inputs {
        let qid = input.question_id().to_string();
        let (s, inline_g) = match input {
            EvalInput::Text(item) => {
                let s = similarity_score(&item.candidate_answer, &item.reference_answer, n_values)
                    .map_err(|e| match e {
                        EvalError::EmptyReference(_) => EvalError::EmptyReference(qid.clone()),
                        other => other,
                    })?;
                (decimal_from_f64(s), None)
            }
            EvalInput::Scored { s, g, .. } => (check_unit(&qid, *s)?, *g),
        };
        let g = match grades.get(&qid).copied().or(inline_g) {
            Some(g) => Some(check_unit(&qid, g)?),
            None => {
                warnings.push(format!("no grade for {qid}; reporting S only"));
                None
            }
        };
        records.push(match g {
            Some(g) => EvalRecord::graded(qid, s, g)?,
            None => EvalRecord {
                question_id: qid,
                s,
                g: None,
                e: None,
            },
        });
    }
    let summary = match summarize(&records, rounding) {
        Ok(s) => Some(s),
        Err(EvalError::NoRecords) => {
            if !records.is_empty() {
                warnings.push("no graded rows; summary omitted".into());
            }
            None
        }
        Err(e) => return Err(e),
    };
    Ok(EvalRun {
        records,
        summary,
        warnings,
    })
}

/// CSV report: `question_id,S,G,E` rows followed by the rounded-mean row.
pub fn report_csv(run: &EvalRun) -> String {
    let fmt = |d: &Option<Decimal>| d.map(|d| d.normalize().to_string()).unwrap_or_default();
    let mut out = String::from("question_id,S,G,E\n");
    for r in &run.records {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            csv_field(&r.question_id),
            r.s.normalize(),
            fmt(&r.g),
            fmt(&r.e)
        );
    }
    if let Some(s) = &run.summary {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            MEAN_ROW_LABEL, s.rounded_mean_s, s.rounded_mean_g, s.rounded_mean_e
        );
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn csv_error(e: &csv::Error) -> EvalError {
    EvalError::Csv {
        line: e.position().map_or(0, |p| p.line()),
        reason: e.to_string(),
    }
}

fn parse_score(raw: &str, qid: &str, line: u64) -> Result<Decimal, EvalError> {
    let value = Decimal::from_str(raw).map_err(|_| EvalError::Csv {
        line,
        reason: format!("score {raw:?} for {qid} is not a number"),
    })?;
    check_unit(qid, value)
}

/// Parses an items file. Accepted headers: `question_id, question,
/// reference_answer, candidate_answer` for text rows, or `question_id, S`
/// (optionally with `G`, and an `E` column which is ignored) for pre-scored
/// rows. Lines starting with `#` are comments.
pub fn parse_items_csv(text: &str) -> Result<Vec<EvalInput>, EvalError> {
    let mut reader = csv_reader(text);
    let headers = reader.headers().map_err(|e| csv_error(&e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let header_line = reader.position().line();
    let qid_col = col("question_id").ok_or(EvalError::Csv {
        line: header_line,
        reason: "missing question_id column".into(),
    })?;
    let scored = col("S");
    let text_cols = (col("question"), col("reference_answer"), col("candidate_answer"));
    if scored.is_none() && (text_cols.1.is_none() || text_cols.2.is_none()) {
        return Err(EvalError::Csv {
            line: header_line,
            reason: "expected reference_answer and candidate_answer columns, or an S column".into(),
        });
    }
    let g_col = col("G");

    let mut inputs = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&e))?;
        let line = record.position().map_or(0, |p| p.line());
        let get = |i: Option<usize>| i.and_then(|i| record.get(i)).unwrap_or("");
        let qid = get(Some(qid_col)).to_string();
        if qid.is_empty() {
            return Err(EvalError::Csv {
                line,
                reason: "empty question_id".into(),
            });
        }
        let input = match scored {
            Some(s_col) => EvalInput::Scored {
                s: parse_score(get(Some(s_col)), &qid, line)?,
                g: match get(g_col) {
                    "" => None,
                    raw => Some(parse_score(raw, &qid, line)?),
                },
                question_id: qid,
            },
            None => EvalInput::Text(EvalItem {
                question: get(text_cols.0).to_string(),
                reference_answer: get(text_cols.1).to_string(),
                candidate_answer: get(text_cols.2).to_string(),
                question_id: qid,
            }),
        };
        inputs.push(input);
    }
    Ok(inputs)
}

/// Parses `question_id,G` rows.
pub fn parse_grades_csv(text: &str) -> Result<BTreeMap<String, Decimal>, EvalError> {
    let mut reader = csv_reader(text);
    let headers = reader.headers().map_err(|e| csv_error(&e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (Some(qid_col), Some(g_col)) = (col("question_id"), col("G")) else {
        return Err(EvalError::Csv {
            line: 1,
            reason: "grades file needs question_id and G columns".into(),
        });
    };
    let mut grades = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&e))?;
        let line = record.position().map_or(0, |p| p.line());
        let qid = record.get(qid_col).unwrap_or("").to_string();
        let g = parse_score(record.get(g_col).unwrap_or(""), &qid, line)?;
        grades.insert(qid, g);
    }
    Ok(grades)
}
