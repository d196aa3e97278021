//! Container engine HTTP API client (Docker-compatible, API v1.41 paths).
//!
//! Each request opens its own connection over the local socket or TCP and
//! speaks HTTP/1.1 through hyper's connection-level client.

use std::collections::BTreeSet;

use async_trait::async_trait;
use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::{Method, Request, StatusCode};
use hyper_util::rt::TokioIo;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::io::{AsyncRead, AsyncWrite};

use super::{ContainerSpec, Engine, EngineEndpoint, EngineError, EngineInfo, Transport};
use crate::manifest::ImageRef;

#[derive(Debug, Clone)]
pub struct DockerEngine {
    endpoint: EngineEndpoint,
}

struct Response {
    status: StatusCode,
    headers: hyper::HeaderMap,
    body: Bytes,
}

impl Response {
    fn text(&self) -> String {
        let raw = String::from_utf8_lossy(&self.body);
        // Error bodies are `{"message": "..."}`; keep the message when present.
        serde_json::from_str::<Value>(&raw)
            .ok()
            .and_then(|v| v.get("message").and_then(Value::as_str).map(str::to_string))
            .unwrap_or_else(|| raw.trim().to_string())
    }
}

/// JSON body for `POST /containers/create`.
pub fn create_container_body(spec: &ContainerSpec) -> Value {
    let mut host_config = json!({
        "Binds": [spec.bind.to_bind_string()],
        "Memory": spec.memory_limit_bytes,
    });
    if spec.gpu {
        host_config["DeviceRequests"] = json!([{
            "Driver": "",
            "Count": -1,
            "Capabilities": [["gpu"]],
        }]);
    }
    json!({
        "Image": spec.image,
        "Cmd": spec.argv,
        "AttachStdout": false,
        "AttachStderr": false,
        "Tty": false,
        "HostConfig": host_config,
    })
}

/// Splits the engine's multiplexed log stream into (stdout, stderr).
///
/// Each frame is an 8-byte header `[stream, 0, 0, 0, len_be32]` followed by
/// `len` payload bytes; stream 1 is stdout and 2 is stderr. A truncated final
/// frame keeps whatever payload arrived.
pub fn demux_logs(mut raw: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut stdout = Vec::new();
    let mut stderr = Vec::new();
    while raw.len() >= 8 {
        let stream = raw[0];
        let len = u32::from_be_bytes([raw[4], raw[5], raw[6], raw[7]]) as usize;
        let end = (8 + len).min(raw.len());
        let payload = &raw[8..end];
        match stream {
            2 => stderr.extend_from_slice(payload),
            _ => stdout.extend_from_slice(payload),
        }
        raw = &raw[end..];
    }
    (stdout, stderr)
}

#[derive(Deserialize)]
struct CreateResponse {
    #[serde(rename = "Id")]
    id: String,
}

#[derive(Deserialize)]
struct WaitResponse {
    #[serde(rename = "StatusCode")]
    status_code: i64,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct InfoResponse {
    #[serde(rename = "ServerVersion")]
    server_version: String,
    #[serde(rename = "Runtimes")]
    runtimes: serde_json::Map<String, Value>,
}

impl DockerEngine {
    pub fn new(endpoint: EngineEndpoint) -> Self {
        Self { endpoint }
    }

    pub fn endpoint(&self) -> &EngineEndpoint {
        &self.endpoint
    }

    fn unreachable(&self, reason: impl ToString) -> EngineError {
        EngineError::Unreachable {
            endpoint: self.endpoint.to_string(),
            reason: reason.to_string(),
        }
    }

    async fn request(&self, method: Method, path: &str, body: Option<Value>) -> Result<Response, EngineError> {
        match &self.endpoint.transport {
            Transport::LocalSocket(socket) => {
                let stream = tokio::net::UnixStream::connect(socket)
                    .await
                    .map_err(|e| self.unreachable(e))?;
                self.exchange(stream, method, path, body).await
            }
            Transport::Tcp(address) => {
                let stream = tokio::net::TcpStream::connect(address.as_str())
                    .await
                    .map_err(|e| self.unreachable(e))?;
                self.exchange(stream, method, path, body).await
            }
        }
    }

    async fn exchange<S>(
        &self,
        stream: S,
        method: Method,
        path: &str,
        body: Option<Value>,
    ) -> Result<Response, EngineError>
    where
        S: AsyncRead + AsyncWrite + Unpin + Send + 'static,
    {
        let transport = |e: hyper::Error| EngineError::Transport(e.to_string());
        let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream))
            .await
            .map_err(transport)?;
        tokio::spawn(async move {
            if let Err(e) = conn.await {
                log::debug!("engine connection closed: {e}");
            }
        });
        let uri = format!("/{}{}", self.endpoint.api_version, path);
        let mut builder = Request::builder()
            .method(method)
            .uri(uri)
            .header(hyper::header::HOST, "docker");
        let payload = match body {
            Some(v) => {
                builder = builder.header(hyper::header::CONTENT_TYPE, "application/json");
                Bytes::from(serde_json::to_vec(&v).expect("json value serializes"))
            }
            None => Bytes::new(),
        };
        let request = builder
            .body(Full::new(payload))
            .map_err(|e| EngineError::Transport(e.to_string()))?;
        let response = sender.send_request(request).await.map_err(transport)?;
        let status = response.status();
        let headers = response.headers().clone();
        let body = response.into_body().collect().await.map_err(transport)?.to_bytes();
        Ok(Response { status, headers, body })
    }

    fn api_error(request: String, response: &Response) -> EngineError {
        EngineError::Api {
            request,
            status: response.status.as_u16(),
            body: response.text(),
        }
    }

    async fn expect_success(&self, method: Method, path: String, body: Option<Value>) -> Result<Response, EngineError> {
        let request = format!("{method} {path}");
        let response = self.request(method, &path, body).await?;
        if response.status.is_success() {
            Ok(response)
        } else if response.status == StatusCode::NOT_FOUND && path.starts_with("/containers/") {
            Err(EngineError::NoSuchContainer(
                path.split('/').nth(2).unwrap_or_default().to_string(),
            ))
        } else {
            Err(Self::api_error(request, &response))
        }
    }
}

/// Interprets the newline-delimited JSON progress stream of an image pull.
fn summarize_pull(image: &ImageRef, body: &[u8]) -> Result<usize, EngineError> {
    let mut layers = BTreeSet::new();
    for message in serde_json::Deserializer::from_slice(body).into_iter::<Value>() {
        let message = message.map_err(|e| EngineError::Transport(format!("bad pull progress: {e}")))?;
        if let Some(err) = message.get("error").and_then(Value::as_str) {
            let lower = err.to_ascii_lowercase();
            if lower.contains("not found") || lower.contains("manifest unknown") || lower.contains("does not exist") {
                return Err(EngineError::ImageNotFound {
                    image: image.canonical(),
                });
            }
            return Err(EngineError::Api {
                request: "POST /images/create".into(),
                status: 200,
                body: err.to_string(),
            });
        }
        let status = message.get("status").and_then(Value::as_str).unwrap_or_default();
        if matches!(status, "Pull complete" | "Already exists") {
            if let Some(id) = message.get("id").and_then(Value::as_str) {
                layers.insert(id.to_string());
            }
        }
    }
    Ok(layers.len())
}

#[async_trait]
impl Engine for DockerEngine {
    fn describe(&self) -> String {
        self.endpoint.to_string()
    }

    async fn ping(&self) -> Result<(), EngineError> {
        let response = self.request(Method::GET, "/_ping", None).await?;
        if response.status.is_success() {
            Ok(())
        } else {
            Err(self.unreachable(format!("ping returned HTTP {}", response.status.as_u16())))
        }
    }

    async fn info(&self) -> Result<EngineInfo, EngineError> {
        let ping = self.request(Method::GET, "/_ping", None).await?;
        let api_version = ping
            .headers
            .get("api-version")
            .and_then(|v| v.to_str().ok())
            .unwrap_or_default()
            .to_string();
        let response = self.expect_success(Method::GET, "/info".into(), None).await?;
        let info: InfoResponse = serde_json::from_slice(&response.body)
            .map_err(|e| EngineError::Transport(format!("bad /info response: {e}")))?;
        Ok(EngineInfo {
            engine_version: info.server_version,
            api_version,
            runtimes: info.runtimes.keys().cloned().collect(),
            reachable: true,
        })
    }

    async fn inspect_image(&self, image: &str) -> Result<bool, EngineError> {
        let path = format!("/images/{image}/json");
        let response = self.request(Method::GET, &path, None).await?;
        match response.status {
            s if s.is_success() => Ok(true),
            StatusCode::NOT_FOUND => Ok(false),
            _ => Err(Self::api_error(format!("GET {path}"), &response)),
        }
    }

    async fn pull(&self, image: &ImageRef) -> Result<usize, EngineError> {
        let path = format!("/images/create?fromImage={}&tag={}", image.name(), image.tag);
        let response = self.request(Method::POST, &path, None).await?;
        match response.status {
            s if s.is_success() => summarize_pull(image, &response.body),
            StatusCode::NOT_FOUND => Err(EngineError::ImageNotFound {
                image: image.canonical(),
            }),
            _ => Err(Self::api_error(format!("POST {path}"), &response)),
        }
    }

    async fn create_container(&self, spec: &ContainerSpec) -> Result<String, EngineError> {
        let path = "/containers/create";
        let response = self
            .request(Method::POST, path, Some(create_container_body(spec)))
            .await?;
        if !response.status.is_success() {
            return Err(Self::api_error(format!("POST {path}"), &response));
        }
        let created: CreateResponse = serde_json::from_slice(&response.body)
            .map_err(|e| EngineError::Transport(format!("bad create response: {e}")))?;
        Ok(created.id)
    }

    async fn start_container(&self, id: &str) -> Result<(), EngineError> {
        self.expect_success(Method::POST, format!("/containers/{id}/start"), None)
            .await?;
        Ok(())
    }

    async fn wait_container(&self, id: &str) -> Result<i64, EngineError> {
        let response = self
            .expect_success(Method::POST, format!("/containers/{id}/wait"), None)
            .await?;
        let waited: WaitResponse = serde_json::from_slice(&response.body)
            .map_err(|e| EngineError::Transport(format!("bad wait response: {e}")))?;
        Ok(waited.status_code)
    }

    async fn container_logs(&self, id: &str) -> Result<(Vec<u8>, Vec<u8>), EngineError> {
        let response = self
            .expect_success(Method::GET, format!("/containers/{id}/logs?stdout=1&stderr=1"), None)
            .await?;
        Ok(demux_logs(&response.body))
    }

    async fn remove_container(&self, id: &str) -> Result<(), EngineError> {
        match self
            .expect_success(Method::DELETE, format!("/containers/{id}?force=1"), None)
            .await
        {
            Ok(_) | Err(EngineError::NoSuchContainer(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }
}
