//! Black boxes served over HTTP.
//!
//! The engine POSTs `{"x": [..encoded..]}` to `{url}/predict` and expects
//! `{"probability": p}` back. Calls are blocking; run them off the async
//! executor.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use causex_core::model::Evaluator;
use causex_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_TIMEOUT_MS: u64 = 5_000;
pub const DEFAULT_MAX_QUERIES: u64 = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteSpec {
    pub url: String,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    /// Lifetime cap on calls to this endpoint.
    #[serde(default = "default_max_queries")]
    pub max_queries: u64,
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_MS
}

fn default_max_queries() -> u64 {
    DEFAULT_MAX_QUERIES
}

#[derive(Serialize)]
struct PredictRequest<'a> {
    x: &'a [f64],
}

#[derive(Deserialize)]
struct PredictResponse {
    probability: f64,
}

#[derive(Debug)]
pub struct RemoteEvaluator {
    endpoint: String,
    client: reqwest::blocking::Client,
    max_queries: u64,
    used: AtomicU64,
}

impl RemoteEvaluator {
    pub fn new(spec: &RemoteSpec) -> Result<Self> {
        let base = spec.url.trim_end_matches('/');
        if !(base.starts_with("http://") || base.starts_with("https://")) {
            return Err(Error::ModelSpec(format!("remote url must be http(s), got `{}`", spec.url)));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(spec.timeout_ms))
            .build()
            .map_err(|e| Error::ModelSpec(e.to_string()))?;
        Ok(Self {
            endpoint: format!("{base}/predict"),
            client,
            max_queries: spec.max_queries,
            used: AtomicU64::new(0),
        })
    }

    pub fn queries(&self) -> u64 {
        self.used.load(Ordering::Relaxed)
    }
}

impl Evaluator for RemoteEvaluator {
    fn evaluate(&self, encoded: &[f64]) -> Result<f64> {
        if self.used.fetch_add(1, Ordering::Relaxed) >= self.max_queries {
            return Err(Error::Model(format!("query budget of {} exhausted", self.max_queries)));
        }
        let response = self
            .client
            .post(&self.endpoint)
            .json(&PredictRequest { x: encoded })
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| Error::Model(format!("{}: {e}", self.endpoint)))?;
        let body: PredictResponse = response
            .json()
            .map_err(|e| Error::Model(format!("{}: bad response: {e}", self.endpoint)))?;
        Ok(body.probability)
    }

    fn is_deterministic(&self) -> bool {
        false
    }
}
