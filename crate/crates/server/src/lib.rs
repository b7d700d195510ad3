//! HTTP service exposing the experiment lab.
//!
//! The service is stateless: every request carries a full [`Scenario`]
//! (missing fields take their defaults) and the response carries the
//! complete report, so identical requests yield identical responses.
//!
//! Routes, all under `/api/v1`:
//!
//! | Method | Path                | Body                               | Response                      |
//! |--------|---------------------|------------------------------------|-------------------------------|
//! | GET    | `/health`           | —                                  | service status and version    |
//! | GET    | `/scenario/default` | —                                  | the default [`Scenario`]      |
//! | POST   | `/qkd/run`          | `{scenario, transcripts?}`         | `{report, transcripts?}`      |
//! | POST   | `/qkd/sweep`        | `{scenario, parameter, values}`    | [`SweepReport`]               |
//! | POST   | `/handshake/run`    | `{scenario, transcripts?}`         | `{report, transcripts?}`      |
//!
//! `/qkd/run` and `/handshake/run` execute whatever the scenario's `mode`
//! field says; the two routes exist so callers can address the operation
//! they mean. Configuration problems come back as `422` with a `field`
//! pointer; runs execute on the blocking pool so the service stays
//! responsive while trials are in flight.

use axum::extract::Json;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};

use qkd_lab::lab::{
    run_scenario, run_scenario_with_transcripts, sweep, RunReport, Scenario, ScenarioError,
    SweepReport,
};

/// Body of a `run` request.
#[derive(Debug, Clone, Deserialize)]
pub struct RunRequest {
    /// The scenario to execute; unset fields take their defaults.
    pub scenario: Scenario,
    /// Whether to return each trial's rendered transcript.
    #[serde(default)]
    pub transcripts: bool,
}

/// Body of a `run` response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResponse {
    /// The full report, rows ordered by seed.
    pub report: RunReport,
    /// Rendered per-trial transcripts, present when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transcripts: Option<Vec<String>>,
}

/// Body of a `sweep` request.
#[derive(Debug, Clone, Deserialize)]
pub struct SweepRequest {
    /// The base scenario shared by every swept value.
    pub scenario: Scenario,
    /// The field to sweep, in `set`-key form (e.g. `eve.fraction`).
    pub parameter: String,
    /// Values to assign, in order.
    pub values: Vec<String>,
}

/// Body of the health response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    /// Always `ok` when the service is up.
    pub status: String,
    /// The crate version.
    pub version: String,
}

/// JSON error envelope for every non-2xx response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    /// Human-readable description.
    pub error: String,
    /// The scenario field at fault, when one is known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

/// An error response: a status code plus its JSON body.
#[derive(Debug)]
pub struct ApiError {
    /// HTTP status to return.
    pub status: StatusCode,
    /// JSON body to return.
    pub body: ErrorBody,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<ScenarioError> for ApiError {
    fn from(err: ScenarioError) -> ApiError {
        let field = match &err {
            ScenarioError::UnknownField { name } => Some(name.clone()),
            ScenarioError::InvalidValue { field, .. } => Some(field.clone()),
            ScenarioError::ReportIntegrity { .. } => None,
        };
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: ErrorBody {
                error: err.to_string(),
                field,
            },
        }
    }
}

fn join_error(err: tokio::task::JoinError) -> ApiError {
    ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        body: ErrorBody {
            error: format!("worker failed: {err}"),
            field: None,
        },
    }
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

async fn default_scenario() -> Json<Scenario> {
    Json(Scenario::default())
}

async fn run(Json(request): Json<RunRequest>) -> Result<Json<RunResponse>, ApiError> {
    let RunRequest {
        scenario,
        transcripts,
    } = request;
    tracing::info!(
        trials = scenario.trials,
        pulses = scenario.n_pulses,
        "running scenario"
    );
    let outcome = tokio::task::spawn_blocking(move || {
        if transcripts {
            run_scenario_with_transcripts(&scenario)
                .map(|(report, transcripts)| (report, Some(transcripts)))
        } else {
            run_scenario(&scenario).map(|report| (report, None))
        }
    })
    .await
    .map_err(join_error)?;
    let (report, transcripts) = outcome?;
    Ok(Json(RunResponse {
        report,
        transcripts,
    }))
}

async fn run_sweep(Json(request): Json<SweepRequest>) -> Result<Json<SweepReport>, ApiError> {
    let SweepRequest {
        scenario,
        parameter,
        values,
    } = request;
    tracing::info!(parameter, values = values.len(), "running sweep");
    let report = tokio::task::spawn_blocking(move || sweep(&scenario, &parameter, &values))
        .await
        .map_err(join_error)??;
    Ok(Json(report))
}

/// Builds the service router.
pub fn router() -> Router {
    Router::new()
        .route("/api/v1/health", get(health))
        .route("/api/v1/scenario/default", get(default_scenario))
        .route("/api/v1/qkd/run", post(run))
        .route("/api/v1/qkd/sweep", post(run_sweep))
        .route("/api/v1/handshake/run", post(run))
}

/// Serves the API on an already-bound listener until the task is dropped.
pub async fn serve(listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router()).await
}
