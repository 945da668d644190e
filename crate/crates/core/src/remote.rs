//! Minimal HTTP+JSON clients for remote models.
//!
//! Two contracts are used throughout:
//! * chat: `{"system": s, "input": i}` → `{"output": o}`
//! * embedding: `{"input": i}` → `{"embedding": [f64...]}`

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RemoteError {
    #[error("remote endpoint {endpoint} unavailable: {message}")]
    Unavailable { endpoint: String, message: String },
    #[error("remote endpoint {endpoint} returned malformed output: {message}")]
    Malformed { endpoint: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatClient {
    pub endpoint: String,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    system: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    output: String,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

impl ChatClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self { endpoint: endpoint.into() }
    }

    pub fn complete(&self, system: &str, input: &str) -> Result<String, RemoteError> {
        let response: ChatResponse = post_json(&self.endpoint, &ChatRequest { system, input })?;
        Ok(response.output)
    }
}

pub(crate) fn fetch_embedding(endpoint: &str, input: &str) -> Result<Vec<f64>, RemoteError> {
    let response: EmbedResponse = post_json(endpoint, &EmbedRequest { input })?;
    Ok(response.embedding)
}

#[cfg(feature = "remote")]
pub(crate) fn post_json<B: Serialize, R: for<'de> Deserialize<'de>>(
    endpoint: &str,
    body: &B,
) -> Result<R, RemoteError> {
    let unavailable = |message: String| RemoteError::Unavailable {
        endpoint: endpoint.to_string(),
        message,
    };
    let mut response = ureq::post(endpoint)
        .send_json(body)
        .map_err(|e| unavailable(e.to_string()))?;
    response.body_mut().read_json::<R>().map_err(|e| RemoteError::Malformed {
        endpoint: endpoint.to_string(),
        message: e.to_string(),
    })
}

#[cfg(not(feature = "remote"))]
pub(crate) fn post_json<B: Serialize, R: for<'de> Deserialize<'de>>(
    endpoint: &str,
    _body: &B,
) -> Result<R, RemoteError> {
    Err(RemoteError::Unavailable {
        endpoint: endpoint.to_string(),
        message: "built without the `remote` feature".to_string(),
    })
}
