//! Blocking client for the service, plus a driver that replays a scenario
//! plan over HTTP.

use collabmem::orchestration::EpisodeRequest;
use collabmem::scenario::Plan;
use collabmem::{Action, Edge};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::IDENTITY_HEADER;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] ureq::Error),
    #[error("{status} {code}: {message}")]
    Api { status: u16, code: String, message: String },
}

/// A response body with its status.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub status: u16,
    pub body: Value,
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    pub fn new(base: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self { base: base.into().trim_end_matches('/').to_string(), agent }
    }

    /// POSTs `body` as `identity` and returns the status and JSON body,
    /// whatever the status.
    pub fn post(&self, path: &str, identity: &str, body: &impl Serialize) -> Result<Reply, ClientError> {
        let mut resp = self
            .agent
            .post(format!("{}{path}", self.base))
            .header(IDENTITY_HEADER, identity)
            .send_json(body)?;
        let status = resp.status().as_u16();
        Ok(Reply { status, body: resp.body_mut().read_json()? })
    }

    pub fn get(&self, path_and_query: &str, identity: &str) -> Result<Reply, ClientError> {
        let mut resp = self
            .agent
            .get(format!("{}{path_and_query}", self.base))
            .header(IDENTITY_HEADER, identity)
            .call()?;
        let status = resp.status().as_u16();
        Ok(Reply { status, body: resp.body_mut().read_json()? })
    }

    fn ok(reply: Reply) -> Result<Value, ClientError> {
        if reply.status < 300 {
            return Ok(reply.body);
        }
        let field = |k: &str| reply.body.get(k).and_then(Value::as_str).unwrap_or_default().to_string();
        Err(ClientError::Api { status: reply.status, code: field("error"), message: field("message") })
    }

    pub fn change(&self, admin: &str, action: Action, edge: &Edge) -> Result<Value, ClientError> {
        let path = match action {
            Action::Grant => "/permissions/grant",
            Action::Revoke => "/permissions/revoke",
        };
        Self::ok(self.post(path, admin, &json!({ "edge": edge }))?)
    }

    pub fn episode(&self, identity: &str, request: &EpisodeRequest) -> Result<Value, ClientError> {
        Self::ok(self.post("/episodes", identity, request)?)
    }

    /// The audit log from `since_seq` as raw JSON lines.
    pub fn audit_jsonl(&self, admin: &str, since_seq: u64) -> Result<String, ClientError> {
        let mut resp = self
            .agent
            .get(format!("{}/audit?since_seq={since_seq}", self.base))
            .header(IDENTITY_HEADER, admin)
            .call()?;
        let status = resp.status().as_u16();
        if status >= 300 {
            return Self::ok(Reply { status, body: resp.body_mut().read_json()? }).map(|_| String::new());
        }
        Ok(resp.body_mut().read_to_string()?)
    }
}

/// Replays `plan` (setup grants, then each phase's permission changes and
/// episodes) through `client`. Permission changes go through `admin`;
/// episodes are issued by the requesting user themselves.
pub fn replay_plan(client: &Client, admin: &str, plan: &Plan) -> Result<Vec<Value>, ClientError> {
    for (action, edge) in &plan.setup {
        client.change(admin, *action, edge)?;
    }
    let mut replies = Vec::new();
    for (i, phase) in plan.phases.iter().enumerate() {
        for (action, edge) in &phase.events {
            client.change(admin, *action, edge)?;
        }
        for req in plan.phase_requests(i) {
            replies.push(client.episode(&format!("user:{}", req.user), &req)?);
        }
    }
    Ok(replies)
}
