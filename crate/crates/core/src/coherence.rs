//! TF-IDF coherence filter.
//!
//! The corpus is the history document followed by one document per
//! candidate. Term frequency is the raw count over document length and
//! `idf = log(|D| / (1 + df))`, base 10 by default. Because of the `+1` in
//! the denominator a term present in every document gets a negative idf,
//! which is kept as is.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::dialogue::Candidate;
use crate::error::{Error, Result};

/// Lowercases, splits on whitespace and strips punctuation from both ends
/// of each token. Tokens that end up empty are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(is_punct))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'
                | '\u{2019}'
                | '\u{201C}'
                | '\u{201D}'
                | '\u{2026}'
                | '\u{2013}'
                | '\u{2014}'
                | '\u{00BF}'
                | '\u{00A1}'
        )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Ten,
    Natural,
}

impl LogBase {
    fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Ten => x.log10(),
            LogBase::Natural => x.ln(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfModel {
    /// Sorted unique terms of the whole corpus.
    pub vocabulary: Vec<String>,
    pub idf: Vec<f64>,
    pub doc_count: usize,
    /// Candidate index of each document after the first.
    pub candidate_indices: Vec<usize>,
    /// Non-zero entries of each document vector as `(term id, tfidf)`,
    /// sorted by term id.
    doc_vectors: Vec<Vec<(u32, f64)>>,
}

impl TfidfModel {
    /// Builds a model over raw document texts; document 0 is the reference.
    pub fn from_documents(docs: &[&str], base: LogBase) -> Self {
        let tokenized: Vec<Vec<String>> = docs.iter().map(|d| tokenize(d)).collect();
        let mut counts: Vec<BTreeMap<&str, usize>> = Vec::with_capacity(docs.len());
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for toks in &tokenized {
            let mut c = BTreeMap::new();
            for t in toks {
                *c.entry(t.as_str()).or_insert(0) += 1;
            }
            for t in c.keys() {
                *df.entry(t).or_insert(0) += 1;
            }
            counts.push(c);
        }
        let n_docs = docs.len() as f64;
        let vocabulary: Vec<String> = df.keys().map(|t| t.to_string()).collect();
        let idf: Vec<f64> = df
            .values()
            .map(|&d| base.log(n_docs / (1.0 + d as f64)))
            .collect();
        let term_id: HashMap<&str, u32> =
            df.keys().enumerate().map(|(i, t)| (*t, i as u32)).collect();
        let doc_vectors = counts
            .iter()
            .zip(&tokenized)
            .map(|(c, toks)| {
                let len = toks.len() as f64;
                c.iter()
                    .map(|(t, &n)| {
                        let id = term_id[t];
                        (id, n as f64 / len * idf[id as usize])
                    })
                    .collect()
            })
            .collect();
        Self {
            vocabulary,
            idf,
            doc_count: docs.len(),
            candidate_indices: (0..docs.len().saturating_sub(1)).collect(),
            doc_vectors,
        }
    }

    pub fn term_count(&self) -> usize {
        self.vocabulary.len()
    }

    /// Dense vector of document `j` over the vocabulary.
    pub fn vector(&self, j: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.vocabulary.len()];
        for &(id, w) in &self.doc_vectors[j] {
            v[id as usize] = w;
        }
        v
    }

    pub fn sparse_vector(&self, j: usize) -> &[(u32, f64)] {
        &self.doc_vectors[j]
    }

    /// Cosine between document 0 and every candidate document, in document
    /// order.
    pub fn similarities(&self) -> Vec<f64> {
        let reference = &self.doc_vectors[0];
        let ref_norm = norm(reference);
        self.doc_vectors[1..]
            .iter()
            .map(|d| {
                let n = norm(d);
                if ref_norm == 0.0 || n == 0.0 {
                    0.0
                } else {
                    sparse_dot(reference, d) / (ref_norm * n)
                }
            })
            .collect()
    }
}

fn norm(v: &[(u32, f64)]) -> f64 {
    v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt()
}

fn sparse_dot(a: &[(u32, f64)], b: &[(u32, f64)]) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

pub fn build_tfidf(h_document: &str, candidates: &[Candidate]) -> Result<TfidfModel> {
    build_tfidf_with_base(h_document, candidates, LogBase::Ten)
}

pub fn build_tfidf_with_base(
    h_document: &str,
    candidates: &[Candidate],
    base: LogBase,
) -> Result<TfidfModel> {
    if candidates.is_empty() {
        return Err(Error::validation(
            "coherence corpus needs at least one candidate",
        ));
    }
    let docs: Vec<&str> = std::iter::once(h_document)
        .chain(candidates.iter().map(|c| c.text.as_str()))
        .collect();
    let mut model = TfidfModel::from_documents(&docs, base);
    model.candidate_indices = candidates.iter().map(|c| c.index).collect();
    Ok(model)
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::validation(format!(
            "cosine over vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (nu * nv))
}

/// Similarities are compared at this resolution so that values equal up to
/// floating-point noise tie and fall back to index order.
const RANK_RESOLUTION: f64 = 1e12;

pub(crate) fn rank_key(score: f64) -> i64 {
    (score * RANK_RESOLUTION).round() as i64
}

/// Keeps the `c` candidates most similar to the history document, most
/// similar first, ties by ascending candidate index.
pub fn coherence_rank(model: &TfidfModel, c: usize) -> Result<Vec<(usize, f64)>> {
    let n = model.candidate_indices.len();
    if c < 1 || c > n {
        return Err(Error::validation(format!(
            "coherence keep count {c} outside 1..={n}"
        )));
    }
    let mut ranked: Vec<(usize, f64)> = model
        .candidate_indices
        .iter()
        .copied()
        .zip(model.similarities())
        .collect();
    ranked.sort_by(|a, b| rank_key(b.1).cmp(&rank_key(a.1)).then(a.0.cmp(&b.0)));
    ranked.truncate(c);
    Ok(ranked)
}
