//! Shared data model: dialogue instances, sampled candidates, per-candidate
//! scores and the pipeline configuration.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One persona-based dialogue example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueInstance {
    pub id: String,
    pub persona: Vec<String>,
    pub history: Vec<String>,
    #[serde(default)]
    pub gold: String,
}

impl DialogueInstance {
    pub fn validate(&self) -> Result<()> {
        if self.persona.is_empty() {
            return Err(Error::validation(format!(
                "instance {:?} has no persona sentences",
                self.id
            )));
        }
        if self.history.is_empty() {
            return Err(Error::validation(format!(
                "instance {:?} has no history utterances",
                self.id
            )));
        }
        Ok(())
    }
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub index: usize,
    pub token_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    pub seed_stream: u64,
}

impl Candidate {
    pub fn validate(&self) -> Result<()> {
        if let Some(lps) = &self.token_logprobs {
            if lps.len() != self.token_count {
                return Err(Error::validation(format!(
                    "candidate {}: {} logprobs for {} tokens",
                    self.index,
                    lps.len(),
                    self.token_count
                )));
            }
            if let Some(bad) = lps.iter().find(|lp| !(lp.is_finite() && **lp <= 0.0)) {
                return Err(Error::validation(format!(
                    "candidate {}: token logprob {bad} is not a finite value <= 0",
                    self.index
                )));
            }
        }
        Ok(())
    }

    pub fn total_loglik(&self) -> Option<f64> {
        self.token_logprobs.as_ref().map(|lps| lps.iter().sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl fmt::Display for NliLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Neutral => "neutral",
            NliLabel::Contradiction => "contradiction",
        })
    }
}

impl FromStr for NliLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "entailment" => Ok(NliLabel::Entailment),
            "neutral" => Ok(NliLabel::Neutral),
            "contradiction" => Ok(NliLabel::Contradiction),
            other => Err(Error::validation(format!("unknown NLI label {other:?}"))),
        }
    }
}

/// Per-candidate stage scores. Fields are filled in by whichever stages ran.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub candidate_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coherence_sim: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entailment_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nli_label: Option<NliLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backward_loglik: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lls: Option<f64>,
    /// Set when a scoring backend failed for this candidate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ScoreRecord {
    pub fn new(candidate_index: usize) -> Self {
        Self {
            candidate_index,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(sim) = self.coherence_sim {
            if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&sim) {
                return Err(Error::validation(format!(
                    "coherence similarity {sim} outside [-1, 1]"
                )));
            }
        }
        if let Some(p) = self.entailment_prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!(
                    "entailment probability {p} outside [0, 1]"
                )));
            }
        }
        if let Some(ll) = self.backward_loglik {
            if ll > 0.0 {
                return Err(Error::validation(format!("backward loglik {ll} > 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoherenceContext {
    #[default]
    FullHistory,
    LastTwo,
}

impl FromStr for CoherenceContext {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_history" | "full-history" => Ok(Self::FullHistory),
            "last_two" | "last-two" => Ok(Self::LastTwo),
            other => Err(Error::validation(format!(
                "unknown coherence context {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonaAggregation {
    #[default]
    Max,
    Mean,
}

impl FromStr for PersonaAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "mean" => Ok(Self::Mean),
            other => Err(Error::validation(format!("unknown aggregation {other:?}"))),
        }
    }
}

pub const DEFAULT_MAX_TOKENS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Top-k width used while sampling.
    pub k: usize,
    /// Number of candidates sampled per instance.
    pub s: usize,
    /// Number of candidates surviving the coherence filter.
    pub c: usize,
    pub coherence_context: CoherenceContext,
    pub master_seed: u64,
    pub persona_aggregation: PersonaAggregation,
    pub max_tokens: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 100,
            s: 2000,
            c: 100,
            coherence_context: CoherenceContext::FullHistory,
            master_seed: 0,
            persona_aggregation: PersonaAggregation::Max,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

impl PipelineConfig {
    /// Sampling setup used by the length-normalized loglikelihood baseline:
    /// top-40 sampling, 20 candidates.
    pub fn lls_defaults() -> Self {
        Self {
            k: 40,
            s: 20,
            c: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::validation("k must be >= 1"));
        }
        if self.s < 1 {
            return Err(Error::validation("s must be >= 1"));
        }
        if self.c < 1 || self.c > self.s {
            return Err(Error::validation(format!(
                "c must satisfy 1 <= c <= s (c = {}, s = {})",
                self.c, self.s
            )));
        }
        if self.max_tokens < 1 {
            return Err(Error::validation("max_tokens must be >= 1"));
        }
        Ok(())
    }
}

/// Reads a JSONL dataset. Blank lines are skipped; line numbers in errors are
/// 1-based.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DialogueInstance>> {
    let reader = BufReader::new(File::open(path)?);
    parse_dataset(reader)
}

pub fn parse_dataset(reader: impl BufRead) -> Result<Vec<DialogueInstance>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: DialogueInstance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        inst.validate().map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(inst.id.clone()) {
            return Err(Error::DuplicateId(inst.id));
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn write_dataset(mut writer: impl Write, instances: &[DialogueInstance]) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut writer, inst)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// The history text used as the first document of the coherence corpus.
pub fn coherence_context(instance: &DialogueInstance, mode: CoherenceContext) -> Result<String> {
    let h = &instance.history;
    if h.is_empty() {
        return Err(Error::validation(format!(
            "instance {:?} has no history utterances",
            instance.id
        )));
    }
    let start = match mode {
        CoherenceContext::FullHistory => 0,
        CoherenceContext::LastTwo => h.len().saturating_sub(2),
    };
    Ok(h[start..].join(" "))
}

/// Persona sentences followed by history utterances, space-joined.
pub fn persona_history_source(instance: &DialogueInstance) -> String {
    instance
        .persona
        .iter()
        .chain(instance.history.iter())
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(" ")
}
