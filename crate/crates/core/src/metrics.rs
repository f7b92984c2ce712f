//! Automatic metrics and the min-max normalized summary scores.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::coherence::tokenize;
use crate::dialogue::NliLabel;
use crate::error::{Error, Result};

/// Responses scored above this perplexity are dropped from the
/// small-vocabulary (BERT-style) channel.
pub const BERT_PPL_FILTER: f64 = 10_000.0;

/// Corpus-level distinct-n: unique n-grams over all n-grams in all
/// responses.
pub fn distinct_n<S: AsRef<str>>(responses: &[S], n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::validation("distinct-n needs n >= 1"));
    }
    let mut unique: HashSet<Vec<String>> = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        let toks = tokenize(r.as_ref());
        for gram in toks.windows(n) {
            total += 1;
            unique.insert(gram.to_vec());
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    })
}

fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Fraction of responses that duplicate at least one other response while
/// differing from their own gold response.
pub fn repetition_rate<S: AsRef<str>, G: AsRef<str>>(responses: &[S], golds: &[G]) -> Result<f64> {
    if responses.len() != golds.len() {
        return Err(Error::validation(format!(
            "{} responses but {} gold responses",
            responses.len(),
            golds.len()
        )));
    }
    if responses.is_empty() {
        return Err(Error::validation(
            "repetition rate needs at least one response",
        ));
    }
    let norm: Vec<String> = responses
        .iter()
        .map(|r| normalize_text(r.as_ref()))
        .collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in &norm {
        *counts.entry(r.as_str()).or_insert(0) += 1;
    }
    let repeated = norm
        .iter()
        .zip(golds)
        .filter(|(r, g)| counts[r.as_str()] > 1 && **r != normalize_text(g.as_ref()))
        .count();
    Ok(repeated as f64 / norm.len() as f64)
}

/// Mean perplexity, optionally dropping entries above `filter_threshold`.
pub fn ppl_aggregate(per_response_ppl: &[f64], filter_threshold: Option<f64>) -> Result<f64> {
    if per_response_ppl.is_empty() {
        return Err(Error::validation("no perplexities to aggregate"));
    }
    let kept: Vec<f64> = per_response_ppl
        .iter()
        .copied()
        .filter(|&p| filter_threshold.is_none_or(|t| p <= t))
        .collect();
    if kept.is_empty() {
        return Err(Error::Aggregation(format!(
            "every perplexity exceeds the filter threshold {}",
            filter_threshold.unwrap_or(f64::INFINITY)
        )));
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Perplexity from a natural-log total likelihood over `token_count` tokens.
pub fn perplexity(total_loglik: f64, token_count: usize) -> Result<f64> {
    if token_count == 0 {
        return Err(Error::validation("perplexity of a zero-token response"));
    }
    Ok((-total_loglik / token_count as f64).exp())
}

pub fn consistency_score(label: NliLabel) -> i32 {
    match label {
        NliLabel::Entailment => 1,
        NliLabel::Neutral => 0,
        NliLabel::Contradiction => -1,
    }
}

pub fn c_mean(labels: &[NliLabel]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::validation("consistency score over zero responses"));
    }
    Ok(labels
        .iter()
        .map(|&l| consistency_score(l) as f64)
        .sum::<f64>()
        / labels.len() as f64)
}

/// One system row: raw metric values plus timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResults {
    pub system_name: String,
    /// Systems sharing a block (backbone) are normalized together under
    /// per-block grouping.
    pub block: String,
    /// `(instance id, response text)`.
    pub responses: Vec<(String, String)>,
    /// Small-vocabulary (BERT-style) channel, filtered.
    pub ppl_a: f64,
    /// Large-vocabulary (GPT2-style) channel, unfiltered.
    pub ppl_b: f64,
    pub dis1: f64,
    pub dis2: f64,
    pub c_score: f64,
    pub rep: f64,
    pub generation_seconds: f64,
    pub evaluation_seconds: f64,
}

impl SystemResults {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64, lo: f64| {
            if (lo..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::validation(format!(
                    "system {:?}: {name} = {v} outside [{lo}, 1]",
                    self.system_name
                )))
            }
        };
        unit("dis1", self.dis1, 0.0)?;
        unit("dis2", self.dis2, 0.0)?;
        unit("rep", self.rep, 0.0)?;
        unit("c_score", self.c_score, -1.0)
    }

    /// Raw columns in report order: PPL_a, PPL_b, Dis-1, Dis-2, C, Rep.
    fn columns(&self) -> [f64; 6] {
        [
            self.ppl_a,
            self.ppl_b,
            self.dis1,
            self.dis2,
            self.c_score,
            self.rep,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    #[default]
    PerBlock,
    Global,
}

impl std::str::FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_block" | "per-block" => Ok(Self::PerBlock),
            "global" => Ok(Self::Global),
            other => Err(Error::validation(format!("unknown grouping {other:?}"))),
        }
    }
}

/// Maps values onto `[0, 1]`; a constant column maps to 0.5.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 })
        .collect()
}

/// Lower is better for these columns (PPL_a, PPL_b, Rep).
const NEGATED: [bool; 6] = [true, true, false, false, false, true];

/// Min-max normalizes each column within its group. Constant columns map to
/// 0.5. Returns `(Avg, Avg-R)` per row: Avg averages the first five
/// normalized columns, Avg-R all six.
pub fn normalize_rows(rows: &[[f64; 6]], groups: &[usize]) -> Result<Vec<(f64, f64)>> {
    if rows.len() != groups.len() {
        return Err(Error::validation("every row needs a group"));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    let mut out = vec![(0.0, 0.0); rows.len()];
    for (g, idx) in members {
        if idx.len() < 2 {
            return Err(Error::validation(format!(
                "normalization group {g} has a single system"
            )));
        }
        let mut normed = vec![[0.0; 6]; idx.len()];
        for col in 0..6 {
            let vals: Vec<f64> = idx
                .iter()
                .map(|&i| {
                    if NEGATED[col] {
                        -rows[i][col]
                    } else {
                        rows[i][col]
                    }
                })
                .collect();
            for (r, v) in min_max(&vals).into_iter().enumerate() {
                normed[r][col] = v;
            }
        }
        for (r, &i) in idx.iter().enumerate() {
            let avg = normed[r][..5].iter().sum::<f64>() / 5.0;
            let avg_r = normed[r].iter().sum::<f64>() / 6.0;
            out[i] = (avg, avg_r);
        }
    }
    Ok(out)
}

pub fn normalized_averages(table: &[SystemResults], grouping: Grouping) -> Result<Vec<(f64, f64)>> {
    let rows: Vec<[f64; 6]> = table.iter().map(SystemResults::columns).collect();
    let groups: Vec<usize> = match grouping {
        Grouping::Global => vec![0; table.len()],
        Grouping::PerBlock => {
            let mut ids: HashMap<&str, usize> = HashMap::new();
            table
                .iter()
                .map(|s| {
                    let next = ids.len();
                    *ids.entry(s.block.as_str()).or_insert(next)
                })
                .collect()
        }
    };
    normalize_rows(&rows, &groups)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub system: String,
    pub block: String,
    pub ppl_a: f64,
    pub ppl_b: f64,
    pub dis1: f64,
    pub dis2: f64,
    pub c: f64,
    pub avg: f64,
    pub rep: f64,
    pub avg_r: f64,
    pub generation_seconds: f64,
    pub evaluation_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub grouping: Grouping,
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    /// Plain-text table. Dis-1, Dis-2 and Rep are shown as percentages.
    pub fn to_text(&self) -> String {
        let headers = [
            "System", "Block", "PPL_a", "PPL_b", "Dis-1", "Dis-2", "C", "Avg", "Rep", "Avg-R",
            "Gen(s)", "Eval(s)",
        ];
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.system.clone(),
                    r.block.clone(),
                    format!("{:.2}", r.ppl_a),
                    format!("{:.2}", r.ppl_b),
                    format!("{:.2}", r.dis1 * 100.0),
                    format!("{:.2}", r.dis2 * 100.0),
                    format!("{:.3}", r.c),
                    format!("{:.3}", r.avg),
                    format!("{:.2}", r.rep * 100.0),
                    format!("{:.3}", r.avg_r),
                    format!("{:.3}", r.generation_seconds),
                    format!("{:.3}", r.evaluation_seconds),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..headers.len())
            .map(|c| {
                cells
                    .iter()
                    .map(|row| row[c].len())
                    .chain([headers[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, row: &[&str]| {
            for (c, cell) in row.iter().enumerate() {
                if c > 0 {
                    out.push_str("  ");
                }
                if c < 2 {
                    let _ = write!(out, "{cell:<w$}", w = widths[c]);
                } else {
                    let _ = write!(out, "{cell:>w$}", w = widths[c]);
                }
            }
            out.push('\n');
        };
        line(&mut out, &headers);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        line(
            &mut out,
            &rule.iter().map(String::as_str).collect::<Vec<_>>(),
        );
        for row in &cells {
            line(
                &mut out,
                &row.iter().map(String::as_str).collect::<Vec<_>>(),
            );
        }
        out
    }
}

/// Builds the comparison report. All systems must cover the same instances.
pub fn compare_systems(runs: &[SystemResults], grouping: Grouping) -> Result<MetricsReport> {
    if runs.len() < 2 {
        return Err(Error::validation("comparison needs at least two systems"));
    }
    for r in runs {
        r.validate()?;
    }
    let ids = |s: &SystemResults| {
        s.responses
            .iter()
            .map(|(id, _)| id.clone())
            .collect::<BTreeSet<_>>()
    };
    let reference = ids(&runs[0]);
    for r in &runs[1..] {
        let other = ids(r);
        if other != reference {
            let diff: Vec<String> = reference.symmetric_difference(&other).cloned().collect();
            return Err(Error::validation(format!(
                "systems {:?} and {:?} cover different instances: {}",
                runs[0].system_name,
                r.system_name,
                diff.join(", ")
            )));
        }
    }
    let avgs = normalized_averages(runs, grouping)?;
    let rows = runs
        .iter()
        .zip(avgs)
        .map(|(s, (avg, avg_r))| ReportRow {
            system: s.system_name.clone(),
            block: s.block.clone(),
            ppl_a: s.ppl_a,
            ppl_b: s.ppl_b,
            dis1: s.dis1,
            dis2: s.dis2,
            c: s.c_score,
            avg,
            rep: s.rep,
            avg_r,
            generation_seconds: s.generation_seconds,
            evaluation_seconds: s.evaluation_seconds,
        })
        .collect();
    Ok(MetricsReport { grouping, rows })
}
