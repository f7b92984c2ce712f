//! Where good responses sit in the perplexity ranking of a candidate set,
//! and which ranks the reranker ends up selecting.

use serde::{Deserialize, Serialize};

use crate::coherence::{LogBase, TfidfModel};
use crate::consistency::persona_entailment;
use crate::dialogue::{DialogueInstance, PersonaAggregation};
use crate::error::{Error, Result};
use crate::gateway::Backend;
use crate::pipeline::response_ppl;
use crate::sampling::SamplingRun;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateStats {
    pub index: usize,
    /// `None` when no perplexity could be computed.
    pub ppl: Option<f64>,
    /// TF-IDF cosine against the gold response.
    pub gold_sim: f64,
    pub entailment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankInstance {
    pub instance_id: String,
    pub candidates: Vec<CandidateStats>,
    pub selected_index: usize,
}

/// A candidate is good when both its gold similarity and its entailment
/// probability exceed the thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoodPredicate {
    pub sim_threshold: f64,
    pub entail_threshold: f64,
}

impl GoodPredicate {
    pub const DEFAULT: GoodPredicate = GoodPredicate {
        sim_threshold: 0.25,
        entail_threshold: 0.5,
    };

    pub fn new(sim_threshold: f64, entail_threshold: f64) -> Result<Self> {
        for (name, t) in [
            ("similarity", sim_threshold),
            ("entailment", entail_threshold),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::validation(format!(
                    "{name} threshold {t} must lie in (0, 1)"
                )));
            }
        }
        Ok(Self {
            sim_threshold,
            entail_threshold,
        })
    }

    pub fn is_good(&self, c: &CandidateStats) -> bool {
        c.gold_sim > self.sim_threshold && c.entailment > self.entail_threshold
    }
}

impl Default for GoodPredicate {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAnalysis {
    /// `bucket_count + 1` rank boundaries; bucket b covers ranks
    /// `edges[b]..edges[b + 1]`.
    pub bucket_edges: Vec<usize>,
    pub good_ratio_per_bucket: Vec<f64>,
    /// Mean perplexity of the candidates in each bucket.
    pub mean_ppl_per_bucket: Vec<f64>,
    /// Count of selected candidates per perplexity rank (0-based).
    pub selected_rank_histogram: Vec<usize>,
    /// Mean 1-based rank of the selected candidates.
    pub mean_selected_rank: f64,
}

/// Candidate indices ordered by ascending perplexity, ties by index.
pub fn ppl_order(candidates: &[CandidateStats]) -> Result<Vec<usize>> {
    let mut keyed = candidates
        .iter()
        .map(|c| match c.ppl {
            Some(p) if !p.is_nan() => Ok((p, c.index)),
            _ => Err(Error::validation(format!(
                "candidate {} has no perplexity",
                c.index
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

pub fn rank_analysis(
    instances: &[RankInstance],
    predicate: GoodPredicate,
    bucket_count: usize,
) -> Result<RankAnalysis> {
    GoodPredicate::new(predicate.sim_threshold, predicate.entail_threshold)?;
    let first = instances
        .first()
        .ok_or_else(|| Error::validation("rank analysis over zero instances"))?;
    let s = first.candidates.len();
    if bucket_count == 0 || bucket_count > s {
        return Err(Error::validation(format!(
            "bucket count {bucket_count} must lie in 1..={s}"
        )));
    }
    let edges: Vec<usize> = (0..=bucket_count).map(|b| b * s / bucket_count).collect();
    let bucket_of = |rank: usize| edges.partition_point(|&e| e <= rank) - 1;

    let mut good = vec![0usize; bucket_count];
    let mut total = vec![0usize; bucket_count];
    let mut ppl_sum = vec![0.0f64; bucket_count];
    let mut histogram = vec![0usize; s];
    let mut rank_sum = 0usize;
    for inst in instances {
        if inst.candidates.len() != s {
            return Err(Error::validation(format!(
                "instance {:?} has {} candidates, expected {s}",
                inst.instance_id,
                inst.candidates.len()
            )));
        }
        let order = ppl_order(&inst.candidates)?;
        let by_index = |i: usize| {
            inst.candidates
                .iter()
                .find(|c| c.index == i)
                .expect("index taken from the same list")
        };
        let mut selected_rank = None;
        for (rank, &i) in order.iter().enumerate() {
            let c = by_index(i);
            let b = bucket_of(rank);
            total[b] += 1;
            ppl_sum[b] += c.ppl.unwrap_or_default();
            if predicate.is_good(c) {
                good[b] += 1;
            }
            if i == inst.selected_index {
                selected_rank = Some(rank);
            }
        }
        let rank = selected_rank.ok_or_else(|| {
            Error::validation(format!(
                "instance {:?}: selected index {} is not a candidate",
                inst.instance_id, inst.selected_index
            ))
        })?;
        histogram[rank] += 1;
        rank_sum += rank + 1;
    }
    Ok(RankAnalysis {
        bucket_edges: edges,
        good_ratio_per_bucket: good
            .iter()
            .zip(&total)
            .map(|(&g, &t)| g as f64 / t as f64)
            .collect(),
        mean_ppl_per_bucket: ppl_sum
            .iter()
            .zip(&total)
            .map(|(&p, &t)| p / t as f64)
            .collect(),
        selected_rank_histogram: histogram,
        mean_selected_rank: rank_sum as f64 / instances.len() as f64,
    })
}

/// Per-candidate statistics for one run. Gold similarity uses a TF-IDF
/// space built from the gold response and the candidates.
pub fn candidate_stats(
    instance: &DialogueInstance,
    run: &SamplingRun,
    ppl_scorer: Option<&dyn Backend>,
    nli: &dyn Backend,
) -> Result<Vec<CandidateStats>> {
    let mut docs: Vec<&str> = vec![&instance.gold];
    docs.extend(run.candidates.iter().map(|c| c.text.as_str()));
    let sims = TfidfModel::from_documents(&docs, LogBase::Ten).similarities();
    run.candidates
        .iter()
        .zip(sims)
        .map(|(c, gold_sim)| {
            let ppl = match ppl_scorer {
                Some(scorer) => response_ppl(scorer, &c.text)?,
                None => c
                    .total_loglik()
                    .filter(|_| c.token_count > 0)
                    .map(|ll| (-ll / c.token_count as f64).exp()),
            };
            let (entailment, _) =
                persona_entailment(nli, &instance.persona, &c.text, PersonaAggregation::Max)?;
            Ok(CandidateStats {
                index: c.index,
                ppl,
                gold_sim,
                entailment,
            })
        })
        .collect()
}
