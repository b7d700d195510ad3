//! Thin asynchronous client for the experiment-lab HTTP service.
//!
//! The client mirrors the service's JSON API one method per route and
//! reuses the core crate's [`Scenario`], [`RunReport`], and [`SweepReport`]
//! types, so a report fetched over the wire renders to exactly the same
//! CSV/JSON bytes the service computed.

use serde::Deserialize;
use serde_json::json;
use thiserror::Error;

use qkd_lab::lab::{RunReport, Scenario, SweepReport};

/// A failure while talking to the service.
#[derive(Debug, Error)]
pub enum ClientError {
    /// The request never completed (connection refused, timeout, …).
    #[error("transport error: {0}")]
    Transport(#[from] reqwest::Error),
    /// The service answered with an error status.
    #[error("service rejected the request ({status}): {message}")]
    Api {
        /// HTTP status code.
        status: u16,
        /// The service's error description.
        message: String,
        /// The scenario field at fault, when the service named one.
        field: Option<String>,
    },
}

/// Health endpoint response.
#[derive(Debug, Clone, Deserialize)]
pub struct Health {
    /// `ok` when the service is up.
    pub status: String,
    /// The service's crate version.
    pub version: String,
}

/// A run response: the report plus per-trial transcripts when requested.
#[derive(Debug, Clone, Deserialize)]
pub struct RunOutcome {
    /// The full report, rows ordered by seed.
    pub report: RunReport,
    /// Rendered transcripts, one per trial, when requested.
    #[serde(default)]
    pub transcripts: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
struct WireError {
    error: String,
    #[serde(default)]
    field: Option<String>,
}

/// Client for one service instance.
#[derive(Debug, Clone)]
pub struct LabClient {
    base_url: String,
    http: reqwest::Client,
}

impl LabClient {
    /// Creates a client for the service at `base_url`
    /// (e.g. `http://127.0.0.1:7787`).
    pub fn new(base_url: impl Into<String>) -> LabClient {
        let mut base_url = base_url.into();
        while base_url.ends_with('/') {
            base_url.pop();
        }
        LabClient {
            base_url,
            http: reqwest::Client::new(),
        }
    }

    /// The service base URL this client talks to.
    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    async fn decode<T: serde::de::DeserializeOwned>(
        response: reqwest::Response,
    ) -> Result<T, ClientError> {
        let status = response.status();
        if status.is_success() {
            return Ok(response.json().await?);
        }
        let message = response.text().await.unwrap_or_default();
        match serde_json::from_str::<WireError>(&message) {
            Ok(wire) => Err(ClientError::Api {
                status: status.as_u16(),
                message: wire.error,
                field: wire.field,
            }),
            Err(_) => Err(ClientError::Api {
                status: status.as_u16(),
                message,
                field: None,
            }),
        }
    }

    async fn get<T: serde::de::DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        let response = self
            .http
            .get(format!("{}{path}", self.base_url))
            .send()
            .await?;
        Self::decode(response).await
    }

    async fn post<T: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        body: &serde_json::Value,
    ) -> Result<T, ClientError> {
        let response = self
            .http
            .post(format!("{}{path}", self.base_url))
            .json(body)
            .send()
            .await?;
        Self::decode(response).await
    }

    /// Checks that the service is alive.
    pub async fn health(&self) -> Result<Health, ClientError> {
        self.get("/api/v1/health").await
    }

    /// Fetches the service's default scenario.
    pub async fn default_scenario(&self) -> Result<Scenario, ClientError> {
        self.get("/api/v1/scenario/default").await
    }

    /// Runs a scenario's key-distillation trials.
    pub async fn run_qkd(
        &self,
        scenario: &Scenario,
        transcripts: bool,
    ) -> Result<RunOutcome, ClientError> {
        self.post(
            "/api/v1/qkd/run",
            &json!({ "scenario": scenario, "transcripts": transcripts }),
        )
        .await
    }

    /// Runs a scenario's full-handshake trials.
    pub async fn run_handshake(
        &self,
        scenario: &Scenario,
        transcripts: bool,
    ) -> Result<RunOutcome, ClientError> {
        self.post(
            "/api/v1/handshake/run",
            &json!({ "scenario": scenario, "transcripts": transcripts }),
        )
        .await
    }

    /// Sweeps one scenario field across `values`.
    pub async fn sweep(
        &self,
        scenario: &Scenario,
        parameter: &str,
        values: &[String],
    ) -> Result<SweepReport, ClientError> {
        self.post(
            "/api/v1/qkd/sweep",
            &json!({ "scenario": scenario, "parameter": parameter, "values": values }),
        )
        .await
    }
}
