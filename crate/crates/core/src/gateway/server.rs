//! Serves any [`Backend`] over the HTTP protocol. Used by `serve-mock` and by
//! the integration tests that exercise the HTTP client.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tiny_http::{Header, Method, Request, Response, Server};

use crate::error::{Error, Result};

use super::{Backend, BatchSampleResponse, Capability, HealthResponse};

const IDEMPOTENCY_CACHE_LIMIT: usize = 1024;

#[derive(Debug, Default)]
pub struct ServerStats {
    pub requests: AtomicUsize,
    /// Batch requests actually computed (cache misses).
    pub batch_computations: AtomicUsize,
}

struct Shared {
    backend: Arc<dyn Backend>,
    batches: Mutex<HashMap<String, BatchSampleResponse>>,
    stats: Arc<ServerStats>,
}

pub struct ServerHandle {
    server: Arc<Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
    stats: Arc<ServerStats>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    /// Blocks until the server is shut down from elsewhere.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `addr` (use port 0 for an ephemeral port) and serves requests on
/// `threads` worker threads.
pub fn serve(backend: Arc<dyn Backend>, addr: &str, threads: usize) -> Result<ServerHandle> {
    let server = Server::http(addr).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| Error::Internal("server is not bound to an IP address".into()))?;
    let server = Arc::new(server);
    let stats = Arc::new(ServerStats::default());
    let shared = Arc::new(Shared {
        backend,
        batches: Mutex::new(HashMap::new()),
        stats: stats.clone(),
    });
    let workers = (0..threads.max(1))
        .map(|_| {
            let server = server.clone();
            let shared = shared.clone();
            std::thread::spawn(move || {
                while let Ok(req) = server.recv() {
                    handle(&shared, req);
                }
            })
        })
        .collect();
    Ok(ServerHandle {
        server,
        addr,
        workers,
        stats,
    })
}

fn handle(shared: &Shared, mut req: Request) {
    shared.stats.requests.fetch_add(1, Ordering::Relaxed);
    let mut body = String::new();
    let (status, payload) = match req.as_reader().read_to_string(&mut body) {
        Err(e) => (400, error_body(&e.to_string())),
        Ok(_) => route(shared, req.method(), req.url(), &body),
    };
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    let _ = req.respond(
        Response::from_string(payload)
            .with_status_code(status)
            .with_header(header),
    );
}

fn route(shared: &Shared, method: &Method, url: &str, body: &str) -> (u16, String) {
    let backend = shared.backend.as_ref();
    let desc = backend.descriptor();
    if *method == Method::Get && url == "/v1/health" {
        return ok(&HealthResponse {
            backend_id: desc.backend_id.clone(),
            capabilities: desc.capabilities.iter().copied().collect(),
        });
    }
    if *method != Method::Post {
        return (405, error_body("method not allowed"));
    }
    let Some(cap) = Capability::ALL.into_iter().find(|c| c.endpoint() == url) else {
        return (404, error_body(&format!("no endpoint {url}")));
    };
    if !desc.supports(cap) {
        return (404, error_body(&format!("backend does not support {cap}")));
    }
    match cap {
        Capability::NextTokenDist => call(body, |r| backend.raw_next_token_dist(&r)),
        Capability::Loglikelihood => call(body, |r| backend.raw_loglikelihood(&r)),
        Capability::Nli => call(body, |r| backend.raw_nli(&r)),
        Capability::BatchSample => call(body, |r: super::BatchSampleRequest| {
            if let Some(hit) = shared.batches.lock().expect("poisoned").get(&r.request_id) {
                return Ok(hit.clone());
            }
            shared
                .stats
                .batch_computations
                .fetch_add(1, Ordering::Relaxed);
            let resp = backend.raw_batch_sample(&r)?;
            let mut cache = shared.batches.lock().expect("poisoned");
            if cache.len() >= IDEMPOTENCY_CACHE_LIMIT {
                cache.clear();
            }
            cache.insert(r.request_id.clone(), resp.clone());
            Ok(resp)
        }),
    }
}

fn call<Q: DeserializeOwned, T: Serialize>(
    body: &str,
    f: impl FnOnce(Q) -> Result<T>,
) -> (u16, String) {
    let req: Q = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(e) => return (400, error_body(&format!("malformed request: {e}"))),
    };
    match f(req) {
        Ok(resp) => ok(&resp),
        Err(e) => {
            let status = match &e {
                Error::Validation(_) | Error::Protocol(_) | Error::Parse { .. } => 400,
                Error::Capability { .. } => 404,
                Error::Transport { .. } => 503,
                _ => 500,
            };
            (status, error_body(&e.to_string()))
        }
    }
}

fn ok<T: Serialize>(v: &T) -> (u16, String) {
    match serde_json::to_string(v) {
        Ok(s) => (200, s),
        Err(e) => (500, error_body(&e.to_string())),
    }
}

fn error_body(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}
