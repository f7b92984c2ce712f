//! Wire protocol to generation and scoring backends.
//!
//! Every backend (HTTP client or in-process mock) implements [`Backend`] and
//! returns raw wire payloads. The free functions in this module check the
//! advertised capability before calling out, and validate each payload
//! before anything downstream sees it.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::consistency::NliJudgment;
use crate::dialogue::Candidate;
use crate::error::{Error, Result};
use crate::sampling::TokenDistribution;

pub mod http;
pub mod mock;
pub mod server;

pub use http::HttpBackend;

/// Environment variable supplying a default base URL.
pub const BACKEND_URL_ENV: &str = "SIMOAP_BACKEND_URL";

pub const INPROCESS_PREFIX: &str = "inprocess:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    NextTokenDist,
    BatchSample,
    Loglikelihood,
    Nli,
}

impl Capability {
    pub const ALL: [Capability; 4] = [
        Capability::NextTokenDist,
        Capability::BatchSample,
        Capability::Loglikelihood,
        Capability::Nli,
    ];

    pub fn endpoint(self) -> &'static str {
        match self {
            Capability::NextTokenDist => "/v1/next-token-dist",
            Capability::BatchSample => "/v1/batch-sample",
            Capability::Loglikelihood => "/v1/loglikelihood",
            Capability::Nli => "/v1/nli",
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Capability::NextTokenDist => "next_token_dist",
            Capability::BatchSample => "batch_sample",
            Capability::Loglikelihood => "loglikelihood",
            Capability::Nli => "nli",
        })
    }
}

impl FromStr for Capability {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Capability::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::validation(format!("unknown capability {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_id: String,
    /// `http(s)://...` or `inprocess:<mock-name>`.
    pub base_url: String,
    pub capabilities: BTreeSet<Capability>,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub max_retries: u32,
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

impl BackendDescriptor {
    pub fn new(
        backend_id: impl Into<String>,
        base_url: impl Into<String>,
        capabilities: impl IntoIterator<Item = Capability>,
    ) -> Result<Self> {
        let d = Self {
            backend_id: backend_id.into(),
            base_url: base_url.into(),
            capabilities: capabilities.into_iter().collect(),
            timeout: Duration::from_secs(30),
            max_retries: 3,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.capabilities.is_empty() {
            return Err(Error::validation(format!(
                "backend {:?} advertises no capabilities",
                self.backend_id
            )));
        }
        if self.timeout.is_zero() {
            return Err(Error::validation(format!(
                "backend {:?} has a zero timeout",
                self.backend_id
            )));
        }
        Ok(())
    }

    pub fn supports(&self, cap: Capability) -> bool {
        self.capabilities.contains(&cap)
    }

    pub fn is_inprocess(&self) -> bool {
        self.base_url.starts_with(INPROCESS_PREFIX)
    }

    fn require(&self, cap: Capability) -> Result<()> {
        if self.supports(cap) {
            Ok(())
        } else {
            Err(Error::Capability {
                backend: self.backend_id.clone(),
                capability: cap.to_string(),
            })
        }
    }
}

// Wire payloads. Field names are the JSON field names.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextTokenDistRequest {
    pub context: String,
    /// Tokens generated so far for this response.
    pub context_tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextTokenDistResponse {
    pub token_ids: Vec<u32>,
    pub logprobs: Vec<f64>,
    pub eos_token_id: u32,
    /// Surface text of each token; the response text is their concatenation.
    pub pieces: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSampleRequest {
    /// Idempotency key; a retried request carries the same id.
    pub request_id: String,
    pub context: String,
    pub k: usize,
    pub n: usize,
    pub seed: u64,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledResponse {
    pub text: String,
    pub token_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSampleResponse {
    pub request_id: String,
    pub candidates: Vec<SampledResponse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoglikelihoodRequest {
    pub context: String,
    pub continuation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoglikelihoodResponse {
    pub total_loglik: f64,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliRequest {
    pub premise: String,
    pub hypothesis: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliResponse {
    pub entailment: f64,
    pub neutral: f64,
    pub contradiction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub backend_id: String,
    pub capabilities: Vec<Capability>,
}

/// A generation or scoring backend. Implementations return raw payloads;
/// unimplemented endpoints fall back to a capability error.
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn raw_next_token_dist(&self, _req: &NextTokenDistRequest) -> Result<NextTokenDistResponse> {
        Err(self.unsupported(Capability::NextTokenDist))
    }

    fn raw_batch_sample(&self, _req: &BatchSampleRequest) -> Result<BatchSampleResponse> {
        Err(self.unsupported(Capability::BatchSample))
    }

    fn raw_loglikelihood(&self, _req: &LoglikelihoodRequest) -> Result<LoglikelihoodResponse> {
        Err(self.unsupported(Capability::Loglikelihood))
    }

    fn raw_nli(&self, _req: &NliRequest) -> Result<NliResponse> {
        Err(self.unsupported(Capability::Nli))
    }

    fn unsupported(&self, cap: Capability) -> Error {
        Error::Capability {
            backend: self.descriptor().backend_id.clone(),
            capability: cap.to_string(),
        }
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }
    fn raw_next_token_dist(&self, req: &NextTokenDistRequest) -> Result<NextTokenDistResponse> {
        (**self).raw_next_token_dist(req)
    }
    fn raw_batch_sample(&self, req: &BatchSampleRequest) -> Result<BatchSampleResponse> {
        (**self).raw_batch_sample(req)
    }
    fn raw_loglikelihood(&self, req: &LoglikelihoodRequest) -> Result<LoglikelihoodResponse> {
        (**self).raw_loglikelihood(req)
    }
    fn raw_nli(&self, req: &NliRequest) -> Result<NliResponse> {
        (**self).raw_nli(req)
    }
}

/// A validated next-token response.
#[derive(Debug, Clone, PartialEq)]
pub struct NextToken {
    pub dist: TokenDistribution,
    pub eos_token_id: u32,
    pieces: Vec<String>,
}

impl NextToken {
    pub fn piece(&self, token: u32) -> Result<&str> {
        self.dist
            .token_ids()
            .iter()
            .position(|&id| id == token)
            .map(|i| self.pieces[i].as_str())
            .ok_or_else(|| Error::Internal(format!("token {token} not in distribution")))
    }
}

pub fn validate_next_token(resp: NextTokenDistResponse) -> Result<NextToken> {
    if resp.pieces.len() != resp.token_ids.len() {
        return Err(Error::protocol(format!(
            "{} pieces for {} token ids",
            resp.pieces.len(),
            resp.token_ids.len()
        )));
    }
    let dist = TokenDistribution::new(resp.token_ids, resp.logprobs)
        .map_err(|e| Error::protocol(e.to_string()))?;
    Ok(NextToken {
        dist,
        eos_token_id: resp.eos_token_id,
        pieces: resp.pieces,
    })
}

pub fn validate_batch(
    resp: BatchSampleResponse,
    req: &BatchSampleRequest,
) -> Result<Vec<Candidate>> {
    if resp.request_id != req.request_id {
        return Err(Error::protocol(format!(
            "batch response id {:?} does not match request {:?}",
            resp.request_id, req.request_id
        )));
    }
    if resp.candidates.len() != req.n {
        return Err(Error::protocol(format!(
            "partial batch: requested {} samples, received {}",
            req.n,
            resp.candidates.len()
        )));
    }
    resp.candidates
        .into_iter()
        .enumerate()
        .map(|(index, s)| {
            let c = Candidate {
                text: s.text,
                index,
                token_count: s.token_count,
                token_logprobs: s.token_logprobs,
                seed_stream: s.seed,
            };
            c.validate().map_err(|e| Error::protocol(e.to_string()))?;
            Ok(c)
        })
        .collect()
}

pub fn validate_loglikelihood(resp: LoglikelihoodResponse) -> Result<(f64, usize)> {
    if !resp.total_loglik.is_finite() || resp.total_loglik > 0.0 {
        return Err(Error::protocol(format!(
            "loglikelihood {} is not a finite value <= 0",
            resp.total_loglik
        )));
    }
    if resp.token_count == 0 {
        return Err(Error::protocol("loglikelihood reports zero tokens"));
    }
    Ok((resp.total_loglik, resp.token_count))
}

pub fn validate_nli(resp: NliResponse) -> Result<NliJudgment> {
    NliJudgment::new(resp.entailment, resp.neutral, resp.contradiction)
        .map_err(|e| Error::protocol(e.to_string()))
}

pub fn next_token_dist(
    backend: &dyn Backend,
    context: &str,
    context_tokens: &[u32],
) -> Result<NextToken> {
    backend.descriptor().require(Capability::NextTokenDist)?;
    let resp = backend.raw_next_token_dist(&NextTokenDistRequest {
        context: context.to_owned(),
        context_tokens: context_tokens.to_vec(),
    })?;
    validate_next_token(resp)
}

/// Request id for a batch call, stable across retries of the same call.
pub fn batch_request_id(
    backend_id: &str,
    context: &str,
    k: usize,
    n: usize,
    seed: u64,
    max_tokens: usize,
) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for part in [backend_id.as_bytes(), context.as_bytes()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    for n in [k as u64, n as u64, seed, max_tokens as u64] {
        h.update(n.to_le_bytes());
    }
    h.finalize()[..16]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn batch_sample(
    backend: &dyn Backend,
    context: &str,
    k: usize,
    n: usize,
    seed: u64,
    max_tokens: usize,
) -> Result<Vec<Candidate>> {
    let desc = backend.descriptor();
    desc.require(Capability::BatchSample)?;
    if n < 1 {
        return Err(Error::validation("batch size must be >= 1"));
    }
    if k < 1 {
        return Err(Error::validation("top-k width must be >= 1"));
    }
    let req = BatchSampleRequest {
        request_id: batch_request_id(&desc.backend_id, context, k, n, seed, max_tokens),
        context: context.to_owned(),
        k,
        n,
        seed,
        max_tokens,
    };
    let resp = backend.raw_batch_sample(&req)?;
    validate_batch(resp, &req)
}

pub fn loglikelihood(
    backend: &dyn Backend,
    context: &str,
    continuation: &str,
) -> Result<(f64, usize)> {
    backend.descriptor().require(Capability::Loglikelihood)?;
    if continuation.is_empty() {
        return Err(Error::validation("continuation must be non-empty"));
    }
    let resp = backend.raw_loglikelihood(&LoglikelihoodRequest {
        context: context.to_owned(),
        continuation: continuation.to_owned(),
    })?;
    validate_loglikelihood(resp)
}

pub fn nli(backend: &dyn Backend, premise: &str, hypothesis: &str) -> Result<NliJudgment> {
    backend.descriptor().require(Capability::Nli)?;
    let resp = backend.raw_nli(&NliRequest {
        premise: premise.to_owned(),
        hypothesis: hypothesis.to_owned(),
    })?;
    validate_nli(resp)
}

/// Builds a backend from a URL-ish address: `inprocess:<mock>` or an HTTP base
/// URL. HTTP backends get their capabilities from the health endpoint.
pub fn connect(addr: &str) -> Result<Arc<dyn Backend>> {
    if let Some(name) = addr.strip_prefix(INPROCESS_PREFIX) {
        return Ok(Arc::new(mock::MockBackend::by_name(name)?));
    }
    Ok(Arc::new(HttpBackend::connect(addr)?))
}
