//! Blocking JSON-over-HTTP client shared by the remote encoder and the
//! remote agent backends.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use ureq::Agent;

use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Debug)]
pub struct RemoteClient {
    endpoint: String,
    agent: Agent,
}

impl RemoteClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self> {
        let endpoint = endpoint.into().trim_end_matches('/').to_string();
        if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
            return Err(Error::Config(format!("endpoint {endpoint:?} is not an http(s) URL")));
        }
        let agent: Agent = Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Ok(Self { endpoint, agent })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// POSTs `body` to `path` and decodes the JSON reply. Connection
    /// failures, timeouts, non-200 statuses and undecodable bodies all map to
    /// [`Error::Transport`] naming the URL.
    pub fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R> {
        let url = format!("{}{path}", self.endpoint);
        let transport = |message: String| Error::Transport { endpoint: url.clone(), message };
        let mut resp = self.agent.post(&url).send_json(body).map_err(|e| transport(e.to_string()))?;
        if resp.status() != 200 {
            return Err(transport(format!("status {}", resp.status())));
        }
        resp.body_mut().read_json::<R>().map_err(|e| transport(format!("bad reply body: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_http_endpoints() {
        assert!(matches!(RemoteClient::new("ftp://x", DEFAULT_TIMEOUT), Err(Error::Config(_))));
        let c = RemoteClient::new("http://localhost:1/", DEFAULT_TIMEOUT).unwrap();
        assert_eq!(c.endpoint(), "http://localhost:1");
    }

    #[test]
    fn unreachable_endpoint_is_a_transport_error() {
        let c = RemoteClient::new("http://127.0.0.1:9", Duration::from_secs(2)).unwrap();
        let err = c.post::<_, serde_json::Value>("/embed", &serde_json::json!({})).unwrap_err();
        match err {
            Error::Transport { endpoint, .. } => assert_eq!(endpoint, "http://127.0.0.1:9/embed"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
