//! NLI consistency selection against the persona sentences.

use serde::{Deserialize, Serialize};

use crate::dialogue::{NliLabel, PersonaAggregation, ScoreRecord};
use crate::error::{Error, Result};
use crate::gateway::{self, Backend};

pub const NLI_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliJudgment {
    pub entailment: f64,
    pub neutral: f64,
    pub contradiction: f64,
}

impl NliJudgment {
    pub fn new(entailment: f64, neutral: f64, contradiction: f64) -> Result<Self> {
        for (name, p) in [
            ("entailment", entailment),
            ("neutral", neutral),
            ("contradiction", contradiction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!(
                    "{name} probability {p} outside [0, 1]"
                )));
            }
        }
        let sum = entailment + neutral + contradiction;
        if (sum - 1.0).abs() > NLI_SUM_TOL {
            return Err(Error::validation(format!("NLI probabilities sum to {sum}")));
        }
        Ok(Self {
            entailment,
            neutral,
            contradiction,
        })
    }

    /// Most probable label; exact ties resolve toward entailment, then
    /// neutral.
    pub fn label(&self) -> NliLabel {
        let mut best = (NliLabel::Entailment, self.entailment);
        for cand in [
            (NliLabel::Neutral, self.neutral),
            (NliLabel::Contradiction, self.contradiction),
        ] {
            if cand.1 > best.1 {
                best = cand;
            }
        }
        best.0
    }
}

/// Aggregates per-sentence judgments. The label comes from the sentence with
/// the highest entailment probability (first one on ties).
pub fn aggregate_judgments(
    judgments: &[NliJudgment],
    aggregation: PersonaAggregation,
) -> Result<(f64, NliLabel)> {
    let best = judgments
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.entailment.total_cmp(&b.entailment).then(j.cmp(i)))
        .map(|(_, j)| j)
        .ok_or_else(|| Error::validation("no persona judgments to aggregate"))?;
    let prob = match aggregation {
        PersonaAggregation::Max => best.entailment,
        PersonaAggregation::Mean => {
            judgments.iter().map(|j| j.entailment).sum::<f64>() / judgments.len() as f64
        }
    };
    Ok((prob, best.label()))
}

/// Scores a candidate against each persona sentence (premise = persona
/// sentence, hypothesis = candidate).
pub fn persona_entailment(
    scorer: &dyn Backend,
    persona: &[String],
    candidate_text: &str,
    aggregation: PersonaAggregation,
) -> Result<(f64, NliLabel)> {
    if persona.is_empty() {
        return Err(Error::validation(
            "persona must contain at least one sentence",
        ));
    }
    let judgments = persona
        .iter()
        .map(|p| gateway::nli(scorer, p, candidate_text))
        .collect::<Result<Vec<_>>>()?;
    aggregate_judgments(&judgments, aggregation)
}

/// Picks the record with the highest entailment probability; ties go to the
/// higher coherence similarity, then to the lower candidate index.
pub fn select_final(scored: &[ScoreRecord]) -> Result<usize> {
    let mut best: Option<(&ScoreRecord, f64)> = None;
    for r in scored {
        let p = r.entailment_prob.ok_or_else(|| {
            Error::validation(format!(
                "candidate {} has no entailment probability",
                r.candidate_index
            ))
        })?;
        let better = match best {
            None => true,
            Some((b, bp)) => {
                let sim = |x: &ScoreRecord| x.coherence_sim.unwrap_or(f64::NEG_INFINITY);
                p.total_cmp(&bp)
                    .then(sim(r).total_cmp(&sim(b)))
                    .then(b.candidate_index.cmp(&r.candidate_index))
                    .is_gt()
            }
        };
        if better {
            best = Some((r, p));
        }
    }
    best.map(|(r, _)| r.candidate_index)
        .ok_or_else(|| Error::validation("no scored candidates to select from"))
}
