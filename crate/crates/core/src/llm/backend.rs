//! Backend abstraction and the line-oriented JSON wire protocol.
//!
//! Every request is a single JSON object on one line; the server answers with
//! a single JSON object on one line and closes the connection. See
//! `docs/wire-protocol.md` for the exact field list.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::BackendError;

pub const BACKEND_KEY_ENV: &str = "CONVAUG_BACKEND_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub want_logprobs: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<(String, f64)>>,
}

pub trait CompletionBackend: Send + Sync {
    /// Stable identifier; part of every cache key.
    fn id(&self) -> String;
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError>;
}

/// Probability distribution over a fixed topic vocabulary for a turn prefix.
pub trait TopicBackend: Send + Sync {
    fn topic_distribution(&self, text: &str) -> Result<Vec<(String, f64)>, BackendError>;
}

pub trait EmbeddingBackend: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WireRequest {
    Complete {
        prompt: String,
        max_tokens: u32,
        temperature: f64,
        want_logprobs: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        key: Option<String>,
    },
    TopicDistribution {
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        key: Option<String>,
    },
    Embed {
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        key: Option<String>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireError {
    pub message: String,
    #[serde(default)]
    pub retryable: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WireResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<(String, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topics: Option<Vec<(String, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

/// Client for a server speaking the JSON-lines protocol over TCP.
#[derive(Debug, Clone)]
pub struct TcpBackend {
    address: String,
    timeout: Duration,
    key: Option<String>,
}

impl TcpBackend {
    /// `address` is `host:port`; a leading `tcp://` is accepted.
    pub fn new(address: &str) -> Self {
        TcpBackend {
            address: address.trim_start_matches("tcp://").to_string(),
            timeout: Duration::from_secs(120),
            key: std::env::var(BACKEND_KEY_ENV).ok().filter(|k| !k.is_empty()),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_key(mut self, key: Option<String>) -> Self {
        self.key = key;
        self
    }

    fn round_trip(&self, request: &WireRequest) -> Result<WireResponse, BackendError> {
        let unavailable = |e: std::io::Error| BackendError::Unavailable(format!("{}: {e}", self.address));
        let addr = self
            .address
            .to_socket_addrs()
            .map_err(unavailable)?
            .next()
            .ok_or_else(|| BackendError::Unavailable(format!("cannot resolve {}", self.address)))?;
        let stream = TcpStream::connect_timeout(&addr, self.timeout).map_err(unavailable)?;
        stream.set_read_timeout(Some(self.timeout)).map_err(unavailable)?;
        stream.set_write_timeout(Some(self.timeout)).map_err(unavailable)?;

        let mut line = serde_json::to_string(request)
            .map_err(|e| BackendError::Rejected(e.to_string()))?;
        line.push('\n');
        (&stream).write_all(line.as_bytes()).map_err(unavailable)?;
        (&stream).flush().map_err(unavailable)?;

        let mut reply = String::new();
        BufReader::new(&stream).read_line(&mut reply).map_err(unavailable)?;
        if reply.trim().is_empty() {
            return Err(BackendError::Unavailable(format!("{}: empty reply", self.address)));
        }
        let response: WireResponse = serde_json::from_str(reply.trim())
            .map_err(|e| BackendError::Rejected(format!("malformed reply: {e}")))?;
        if let Some(err) = response.error {
            return Err(if err.retryable {
                BackendError::Unavailable(err.message)
            } else {
                BackendError::Rejected(err.message)
            });
        }
        Ok(response)
    }
}

impl CompletionBackend for TcpBackend {
    fn id(&self) -> String {
        format!("tcp://{}", self.address)
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let reply = self.round_trip(&WireRequest::Complete {
            prompt: request.prompt.clone(),
            max_tokens: request.max_tokens,
            temperature: request.temperature,
            want_logprobs: request.want_logprobs,
            key: self.key.clone(),
        })?;
        Ok(CompletionResponse {
            text: reply
                .text
                .ok_or_else(|| BackendError::Rejected("reply has no `text`".into()))?,
            logprobs: reply.logprobs,
        })
    }
}

impl TopicBackend for TcpBackend {
    fn topic_distribution(&self, text: &str) -> Result<Vec<(String, f64)>, BackendError> {
        self.round_trip(&WireRequest::TopicDistribution {
            text: text.to_string(),
            key: self.key.clone(),
        })?
        .topics
        .ok_or_else(|| BackendError::Rejected("reply has no `topics`".into()))
    }
}

impl EmbeddingBackend for TcpBackend {
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.round_trip(&WireRequest::Embed {
            text: text.to_string(),
            key: self.key.clone(),
        })?
        .embedding
        .ok_or_else(|| BackendError::Rejected("reply has no `embedding`".into()))
    }
}

/// Backend defined by a closure. Used for scripted tests.
pub struct FnBackend<F> {
    id: String,
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<CompletionResponse, BackendError> + Send + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        FnBackend { id: id.into(), f }
    }
}

impl<F> CompletionBackend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<CompletionResponse, BackendError> + Send + Sync,
{
    fn id(&self) -> String {
        self.id.clone()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        (self.f)(request)
    }
}
