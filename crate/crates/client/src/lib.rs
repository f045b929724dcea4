//! Async client for the local project service.
//!
//! `get_raw` returns the document bytes as served; the typed getters parse
//! those same bytes into the core store types.

use graphaudit_core::beliefs::HypothesisDoc;
use graphaudit_core::graph::{GraphRecord, GraphSummary};
use graphaudit_core::inbox::SteeringNote;
use graphaudit_core::planning::{CoverageIndex, PlanDoc};
use graphaudit_core::session::SessionStatus;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("steering note is empty")]
    EmptyNote,
    #[error("request to {url} failed: {source}")]
    Http {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("{url} returned {status}: {message}")]
    Status { url: String, status: u16, message: String },
    #[error("bad payload from {url}: {source}")]
    Payload {
        url: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteCreated {
    pub id: String,
    pub note: SteeringNote,
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` like `http://127.0.0.1:8737`.
    pub fn new(base: impl Into<String>) -> Client {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn check(url: String, resp: reqwest::Response) -> Result<Vec<u8>> {
        let status = resp.status();
        let bytes = resp
            .bytes()
            .await
            .map_err(|source| ClientError::Http { url: url.clone(), source })?
            .to_vec();
        if status.is_success() {
            return Ok(bytes);
        }
        let message = serde_json::from_slice::<serde_json::Value>(&bytes)
            .ok()
            .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(str::to_string))
            .unwrap_or_else(|| String::from_utf8_lossy(&bytes).into_owned());
        Err(ClientError::Status {
            url,
            status: status.as_u16(),
            message,
        })
    }

    pub async fn get_raw(&self, path_and_query: &str) -> Result<Vec<u8>> {
        let url = format!("{}{}", self.base, path_and_query);
        let resp = self
            .http
            .get(&url)
            .send()
            .await
            .map_err(|source| ClientError::Http { url: url.clone(), source })?;
        Client::check(url, resp).await
    }

    async fn get_json<T: DeserializeOwned>(&self, path_and_query: &str) -> Result<T> {
        let bytes = self.get_raw(path_and_query).await?;
        serde_json::from_slice(&bytes).map_err(|source| ClientError::Payload {
            url: format!("{}{}", self.base, path_and_query),
            source,
        })
    }

    pub async fn graphs(&self) -> Result<GraphSummary> {
        self.get_json("/graphs").await
    }

    pub async fn graph(&self, name: &str) -> Result<GraphRecord> {
        self.get_json(&format!("/graphs/{}", encode(name))).await
    }

    pub async fn hypotheses(&self) -> Result<HypothesisDoc> {
        self.get_json("/hypotheses").await
    }

    pub async fn coverage(&self) -> Result<CoverageIndex> {
        self.get_json("/coverage").await
    }

    pub async fn plans(&self, session: Option<&str>) -> Result<PlanDoc> {
        self.get_json(&with_session("/plans", session)).await
    }

    pub async fn session_status(&self, session: Option<&str>) -> Result<SessionStatus> {
        self.get_json(&with_session("/session/status", session)).await
    }

    /// Empty or blank text is rejected here without a request.
    pub async fn add_note(&self, text: &str) -> Result<NoteCreated> {
        if text.trim().is_empty() {
            return Err(ClientError::EmptyNote);
        }
        let url = format!("{}/inbox", self.base);
        let resp = self
            .http
            .post(&url)
            .json(&serde_json::json!({ "text": text }))
            .send()
            .await
            .map_err(|source| ClientError::Http { url: url.clone(), source })?;
        let bytes = Client::check(url.clone(), resp).await?;
        serde_json::from_slice(&bytes).map_err(|source| ClientError::Payload { url, source })
    }
}

fn with_session(path: &str, session: Option<&str>) -> String {
    match session {
        Some(s) => format!("{path}?session={}", encode(s)),
        None => path.to_string(),
    }
}

fn encode(s: &str) -> String {
    let mut out = String::new();
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}
