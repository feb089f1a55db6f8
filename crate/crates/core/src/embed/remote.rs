use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::EmbeddingBackend;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub endpoint: String,
    /// Model requested from the service; `None` accepts whatever it serves.
    pub model_id: Option<String>,
    pub timeout: Duration,
    pub batch_size: usize,
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into().trim_end_matches('/').to_owned(),
            model_id: None,
            timeout: Duration::from_secs(30),
            batch_size: 64,
            attempts: 3,
            initial_backoff: Duration::from_millis(200),
        }
    }
}

#[derive(Debug, Deserialize)]
struct Health {
    status: String,
    model: String,
    dim: usize,
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    texts: &'a [&'a str],
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    model: String,
    dim: usize,
    embeddings: Vec<Vec<f64>>,
}

/// Client for an HTTP embedding service (`GET /healthz`, `POST /v1/embed`).
pub struct RemoteBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    model: String,
    dim: usize,
}

enum Failure {
    Retryable(String),
    Fatal(Error),
}

impl RemoteBackend {
    /// Connects and runs the health check.
    pub fn connect(cfg: RemoteConfig) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::Config("remote batch size must be positive".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut backend = RemoteBackend {
            cfg,
            agent,
            model: String::new(),
            dim: 0,
        };
        let health: Health = backend.with_retries(|b| b.get_json("/healthz"))?;
        if health.status != "ok" {
            return Err(Error::BackendUnavailable(format!(
                "health check reported status {:?}",
                health.status
            )));
        }
        if let Some(want) = &backend.cfg.model_id {
            if *want != health.model {
                return Err(Error::Protocol(format!(
                    "service serves model {:?}, requested {want:?}",
                    health.model
                )));
            }
        }
        if health.dim == 0 {
            return Err(Error::Protocol("service advertises dim 0".into()));
        }
        backend.model = health.model;
        backend.dim = health.dim;
        Ok(backend)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.cfg.endpoint, path)
    }

    fn with_retries<T>(&self, mut call: impl FnMut(&Self) -> Result<T, Failure>) -> Result<T> {
        let mut backoff = self.cfg.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=self.cfg.attempts.max(1) {
            match call(self) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(msg)) => {
                    log::debug!("embedding request attempt {attempt} failed: {msg}");
                    last = msg;
                    if attempt < self.cfg.attempts {
                        thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(Error::BackendUnavailable(format!(
            "{} after {} attempts: {last}",
            self.cfg.endpoint, self.cfg.attempts
        )))
    }

    fn get_json<T: serde::de::DeserializeOwned>(&self, path: &str) -> Result<T, Failure> {
        let resp = self
            .agent
            .get(&self.url(path))
            .call()
            .map_err(|e| Failure::Retryable(e.to_string()))?;
        read_body(resp)
    }

    fn post_batch(&self, texts: &[&str]) -> Result<EmbedResponse, Failure> {
        let resp = self
            .agent
            .post(&self.url("/v1/embed"))
            .send_json(EmbedRequest {
                model: &self.model,
                texts,
            })
            .map_err(|e| Failure::Retryable(e.to_string()))?;
        read_body(resp)
    }

    fn check_response(&self, resp: EmbedResponse, expected_rows: usize) -> Result<Vec<Vec<f32>>> {
        if resp.model != self.model {
            return Err(Error::Protocol(format!(
                "response model {:?} differs from {:?}",
                resp.model, self.model
            )));
        }
        if resp.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: resp.dim,
            });
        }
        if resp.embeddings.len() != expected_rows {
            return Err(Error::Protocol(format!(
                "{} rows for {expected_rows} texts",
                resp.embeddings.len()
            )));
        }
        resp.embeddings
            .into_iter()
            .map(|row| {
                if row.len() != self.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim,
                        actual: row.len(),
                    });
                }
                row.into_iter()
                    .map(|x| {
                        let v = x as f32;
                        if v.is_finite() {
                            Ok(v)
                        } else {
                            Err(Error::Protocol(format!("non-finite embedding value {x}")))
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

fn read_body<T: serde::de::DeserializeOwned>(
    mut resp: ureq::http::Response<ureq::Body>,
) -> Result<T, Failure> {
    let status = resp.status().as_u16();
    let body = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| Failure::Retryable(e.to_string()))?;
    match status {
        200 => serde_json::from_str(&body)
            .map_err(|e| Failure::Fatal(Error::Protocol(format!("malformed response: {e}")))),
        500..=599 => Err(Failure::Retryable(format!("HTTP {status}: {body}"))),
        _ => Err(Failure::Fatal(Error::Protocol(format!("HTTP {status}: {body}")))),
    }
}

impl EmbeddingBackend for RemoteBackend {
    fn id(&self) -> &str {
        "remote"
    }

    fn model_id(&self) -> &str {
        &self.model
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.cfg.batch_size) {
            let resp = self.with_retries(|b| b.post_batch(chunk))?;
            out.extend(self.check_response(resp, chunk.len())?);
        }
        Ok(out)
    }
}
