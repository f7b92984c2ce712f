//! Blocking JSON-over-HTTP client for the backend protocol.

use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

use super::{
    Backend, BackendDescriptor, BatchSampleRequest, BatchSampleResponse, Capability,
    HealthResponse, LoglikelihoodRequest, LoglikelihoodResponse, NextTokenDistRequest,
    NextTokenDistResponse, NliRequest, NliResponse,
};

const BACKOFF_BASE: Duration = Duration::from_millis(50);
const BACKOFF_CAP: Duration = Duration::from_secs(2);

pub struct HttpBackend {
    descriptor: BackendDescriptor,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(descriptor: BackendDescriptor) -> Result<Self> {
        descriptor.validate()?;
        let agent = ureq::AgentBuilder::new()
            .timeout(descriptor.timeout)
            .build();
        Ok(Self { descriptor, agent })
    }

    /// Probes `GET /v1/health` and takes the advertised capabilities.
    pub fn connect(base_url: &str) -> Result<Self> {
        let base = base_url.trim_end_matches('/').to_owned();
        let probe = Self::new(BackendDescriptor::new(
            base.clone(),
            base.clone(),
            Capability::ALL,
        )?)?;
        let health: HealthResponse = probe.with_retries(|| probe.get("/v1/health"))?;
        let mut descriptor = probe.descriptor;
        descriptor.backend_id = health.backend_id;
        descriptor.capabilities = health.capabilities.into_iter().collect();
        Self::new(descriptor)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.descriptor.base_url.trim_end_matches('/'), path)
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let resp = self.agent.get(&self.url(path)).call();
        self.decode(resp)
    }

    fn post<Q: Serialize, T: DeserializeOwned>(&self, path: &str, body: &Q) -> Result<T> {
        let body = serde_json::to_string(body)?;
        let resp = self
            .agent
            .post(&self.url(path))
            .set("Content-Type", "application/json")
            .send_string(&body);
        self.decode(resp)
    }

    fn decode<T: DeserializeOwned>(
        &self,
        resp: std::result::Result<ureq::Response, ureq::Error>,
    ) -> Result<T> {
        match resp {
            Ok(r) => {
                let text = r.into_string()?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::protocol(format!("malformed payload: {e}")))
            }
            Err(ureq::Error::Status(code, r)) => {
                let body = r.into_string().unwrap_or_default();
                if code >= 500 || code == 429 {
                    Err(self.transport(true, format!("HTTP {code}: {body}")))
                } else {
                    Err(Error::protocol(format!("HTTP {code}: {body}")))
                }
            }
            Err(ureq::Error::Transport(t)) => Err(self.transport(true, t.to_string())),
        }
    }

    fn transport(&self, retryable: bool, message: String) -> Error {
        Error::Transport {
            backend: self.descriptor.backend_id.clone(),
            attempts: 1,
            retryable,
            message,
        }
    }

    /// Runs `call` up to `max_retries + 1` times while it fails with a
    /// retryable transport error, backing off exponentially between tries.
    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T>) -> Result<T> {
        let max_attempts = self.descriptor.max_retries + 1;
        let mut attempt = 1;
        loop {
            match call() {
                Err(e) if e.is_retryable() && attempt < max_attempts => {
                    let backoff = BACKOFF_BASE.saturating_mul(1 << (attempt - 1).min(16));
                    thread::sleep(backoff.min(BACKOFF_CAP));
                    attempt += 1;
                }
                Err(Error::Transport {
                    backend,
                    retryable,
                    message,
                    ..
                }) => {
                    return Err(Error::Transport {
                        backend,
                        attempts: attempt,
                        retryable,
                        message,
                    })
                }
                other => return other,
            }
        }
    }
}

impl Backend for HttpBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn raw_next_token_dist(&self, req: &NextTokenDistRequest) -> Result<NextTokenDistResponse> {
        self.with_retries(|| self.post(Capability::NextTokenDist.endpoint(), req))
    }

    fn raw_batch_sample(&self, req: &BatchSampleRequest) -> Result<BatchSampleResponse> {
        self.with_retries(|| self.post(Capability::BatchSample.endpoint(), req))
    }

    fn raw_loglikelihood(&self, req: &LoglikelihoodRequest) -> Result<LoglikelihoodResponse> {
        self.with_retries(|| self.post(Capability::Loglikelihood.endpoint(), req))
    }

    fn raw_nli(&self, req: &NliRequest) -> Result<NliResponse> {
        self.with_retries(|| self.post(Capability::Nli.endpoint(), req))
    }
}
