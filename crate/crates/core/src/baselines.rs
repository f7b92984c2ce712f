//! Comparison rerankers: backward-model MMI and length-normalized
//! loglikelihood (LLS).

use rayon::prelude::*;

use crate::dialogue::{persona_history_source, Candidate, DialogueInstance};
use crate::error::{Error, Result};
use crate::gateway::{self, Backend};
use crate::sampling::desc_then_index;

/// Input to the backward scorer: how likely is the source given the
/// response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackwardQuery {
    pub response_text: String,
    /// Persona sentences then history utterances, space-joined.
    pub source_text: String,
}

impl BackwardQuery {
    pub fn new(instance: &DialogueInstance, response_text: &str) -> Self {
        Self {
            response_text: response_text.to_owned(),
            source_text: persona_history_source(instance),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmiRanking {
    /// `(candidate index, log P(source | response))`, best first.
    pub ranked: Vec<(usize, f64)>,
    /// Candidates whose scoring failed after retries.
    pub failed: Vec<(usize, String)>,
}

impl MmiRanking {
    pub fn best(&self) -> Option<usize> {
        self.ranked.first().map(|r| r.0)
    }
}

/// Orders candidates by the backward model's loglikelihood of the source,
/// summed over source tokens.
pub fn mmi_rerank(
    backward: &dyn Backend,
    instance: &DialogueInstance,
    candidates: &[Candidate],
) -> Result<MmiRanking> {
    if candidates.is_empty() {
        return Err(Error::validation(
            "MMI reranking needs at least one candidate",
        ));
    }
    let scored: Vec<(usize, Result<f64>)> = candidates
        .par_iter()
        .map(|c| {
            let q = BackwardQuery::new(instance, &c.text);
            let score = gateway::loglikelihood(backward, &q.response_text, &q.source_text)
                .map(|(ll, _)| ll);
            (c.index, score)
        })
        .collect();
    let mut ranked = Vec::with_capacity(scored.len());
    let mut failed = Vec::new();
    for (i, s) in scored {
        match s {
            Ok(ll) => ranked.push((i, ll)),
            Err(e) => failed.push((i, e.to_string())),
        }
    }
    if ranked.is_empty() {
        return Err(Error::Aggregation(format!(
            "backward scoring failed for every candidate of {:?}: {}",
            instance.id, failed[0].1
        )));
    }
    ranked.sort_by(|a, b| desc_then_index((a.1, a.0), (b.1, b.0)));
    Ok(MmiRanking { ranked, failed })
}

pub fn lls_score(total_loglik: f64, token_count: usize) -> Result<f64> {
    if token_count == 0 {
        return Err(Error::validation(
            "LLS is undefined for a zero-token response",
        ));
    }
    Ok(total_loglik / token_count as f64)
}

/// Orders candidates by mean token logprob, best first. Empty candidates
/// have no defined score and rank last with `-inf`.
pub fn lls_rerank(candidates: &[Candidate]) -> Result<Vec<(usize, f64)>> {
    let mut ranked = candidates
        .iter()
        .map(|c| {
            let total = c.total_loglik().ok_or_else(|| {
                Error::validation(format!("candidate {} has no token logprobs", c.index))
            })?;
            let score = if c.token_count == 0 {
                f64::NEG_INFINITY
            } else {
                lls_score(total, c.token_count)?
            };
            Ok((c.index, score))
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| desc_then_index((a.1, a.0), (b.1, b.0)));
    Ok(ranked)
}
