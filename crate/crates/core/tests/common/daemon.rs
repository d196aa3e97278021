//! A Docker-compatible HTTP daemon on a Unix socket, backed by a fake engine.
//! It lets the HTTP client run the engine contract suite without a real
//! container engine.

use std::convert::Infallible;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bytes::Bytes;
use http_body_util::{BodyExt, Full};
use hyper::body::Incoming;
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper::{Method, Request, Response, StatusCode};
use hyper_util::rt::TokioIo;
use repro::engine::FakeEngine;
use repro::engine::{BindMount, ContainerSpec, Engine, EngineError, DEFAULT_TIMEOUT_S};
use repro::manifest::ImageRef;
use serde_json::{json, Value};
use tokio::net::UnixListener;
use tokio::task::JoinHandle;

pub struct MockDaemon {
    pub socket: PathBuf,
    task: JoinHandle<()>,
}

impl Drop for MockDaemon {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// Starts serving on `<dir>/docker.sock`. Must be called inside a runtime.
pub fn spawn(dir: &Path, engine: Arc<FakeEngine>) -> MockDaemon {
    let socket = dir.join("docker.sock");
    let listener = UnixListener::bind(&socket).expect("bind mock daemon socket");
    let task = tokio::spawn(async move {
        loop {
            let Ok((stream, _)) = listener.accept().await else {
                return;
            };
            let engine = engine.clone();
            tokio::spawn(async move {
                let service = service_fn(move |req| {
                    let engine = engine.clone();
                    async move { Ok::<_, Infallible>(handle(engine, req).await) }
                });
                let _ = http1::Builder::new()
                    .serve_connection(TokioIo::new(stream), service)
                    .await;
            });
        }
    });
    MockDaemon { socket, task }
}

fn reply(status: StatusCode, body: Value) -> Response<Full<Bytes>> {
    Response::builder()
        .status(status)
        .header("content-type", "application/json")
        .body(Full::new(Bytes::from(body.to_string())))
        .unwrap()
}

fn error_reply(e: EngineError) -> Response<Full<Bytes>> {
    let status = match &e {
        EngineError::NoSuchContainer(_) | EngineError::ImageNotFound { .. } => StatusCode::NOT_FOUND,
        EngineError::Unreachable { .. } => StatusCode::SERVICE_UNAVAILABLE,
        EngineError::Api { status, .. } => StatusCode::from_u16(*status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    reply(status, json!({ "message": e.to_string() }))
}

fn frames(stream: u8, payload: &[u8], out: &mut Vec<u8>) {
    // Split into small frames so the client's demultiplexer sees several.
    for chunk in payload.chunks(7) {
        out.extend_from_slice(&[stream, 0, 0, 0]);
        out.extend_from_slice(&(chunk.len() as u32).to_be_bytes());
        out.extend_from_slice(chunk);
    }
}

fn query_param<'a>(query: &'a str, name: &str) -> Option<&'a str> {
    query
        .split('&')
        .filter_map(|kv| kv.split_once('='))
        .find(|(k, _)| *k == name)
        .map(|(_, v)| v)
}

fn spec_from_body(body: &Value) -> Option<ContainerSpec> {
    let bind = body["HostConfig"]["Binds"][0].as_str()?;
    let mut parts = bind.rsplitn(3, ':');
    let mode = parts.next()?;
    let guest = parts.next()?;
    let host = parts.next()?;
    Some(ContainerSpec {
        image: body["Image"].as_str()?.to_string(),
        argv: body["Cmd"]
            .as_array()?
            .iter()
            .map(|v| v.as_str().map(str::to_string))
            .collect::<Option<_>>()?,
        bind: BindMount {
            host: host.into(),
            guest: guest.into(),
            read_write: mode == "rw",
        },
        memory_limit_bytes: body["HostConfig"]["Memory"].as_u64()?,
        gpu: body["HostConfig"].get("DeviceRequests").is_some(),
        timeout_s: DEFAULT_TIMEOUT_S,
    })
}

async fn handle(engine: Arc<FakeEngine>, req: Request<Incoming>) -> Response<Full<Bytes>> {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let query = req.uri().query().unwrap_or("").to_string();
    let body = req
        .into_body()
        .collect()
        .await
        .map(|b| b.to_bytes())
        .unwrap_or_default();
    let Some(path) = path.strip_prefix("/v1.41") else {
        return reply(StatusCode::BAD_REQUEST, json!({"message": "unsupported API version"}));
    };
    let segments: Vec<&str> = path.trim_start_matches('/').split('/').collect();

    match (&method, segments.as_slice()) {
        (&Method::GET, ["_ping"]) => match engine.ping().await {
            Ok(()) => Response::builder()
                .header(
                    "api-version",
                    engine.info().await.map(|i| i.api_version).unwrap_or_default(),
                )
                .body(Full::new(Bytes::from_static(b"OK")))
                .unwrap(),
            Err(e) => error_reply(e),
        },
        (&Method::GET, ["info"]) => match engine.info().await {
            Ok(info) => {
                let runtimes: serde_json::Map<String, Value> =
                    info.runtimes.iter().map(|r| (r.clone(), json!({"path": r}))).collect();
                reply(
                    StatusCode::OK,
                    json!({"ServerVersion": info.engine_version, "Runtimes": runtimes}),
                )
            }
            Err(e) => error_reply(e),
        },
        (&Method::POST, ["images", "create"]) => {
            let (Some(from), Some(tag)) = (query_param(&query, "fromImage"), query_param(&query, "tag")) else {
                return reply(
                    StatusCode::BAD_REQUEST,
                    json!({"message": "fromImage and tag required"}),
                );
            };
            let image: ImageRef = match format!("{from}:{tag}").parse() {
                Ok(i) => i,
                Err(e) => return reply(StatusCode::BAD_REQUEST, json!({"message": e.to_string()})),
            };
            match engine.pull(&image).await {
                Ok(layers) => {
                    let mut stream = format!("{}\n", json!({"status": format!("Pulling from {}", image.name())}));
                    for l in 0..layers {
                        stream.push_str(&format!(
                            "{}\n",
                            json!({"status": "Pulling fs layer", "id": format!("l{l}")})
                        ));
                        stream.push_str(&format!(
                            "{}\n",
                            json!({"status": "Pull complete", "id": format!("l{l}")})
                        ));
                    }
                    Response::new(Full::new(Bytes::from(stream)))
                }
                Err(e) => error_reply(e),
            }
        }
        (&Method::GET, ["images", rest @ .., "json"]) => match engine.inspect_image(&rest.join("/")).await {
            Ok(true) => reply(StatusCode::OK, json!({"Id": "sha256:fake"})),
            Ok(false) => reply(StatusCode::NOT_FOUND, json!({"message": "No such image"})),
            Err(e) => error_reply(e),
        },
        (&Method::POST, ["containers", "create"]) => {
            let Some(spec) = serde_json::from_slice::<Value>(&body)
                .ok()
                .as_ref()
                .and_then(spec_from_body)
            else {
                return reply(StatusCode::BAD_REQUEST, json!({"message": "bad create body"}));
            };
            match engine.create_container(&spec).await {
                Ok(id) => reply(StatusCode::CREATED, json!({"Id": id, "Warnings": []})),
                Err(e) => error_reply(e),
            }
        }
        (&Method::POST, ["containers", id, "start"]) => match engine.start_container(id).await {
            Ok(()) => Response::builder()
                .status(StatusCode::NO_CONTENT)
                .body(Full::default())
                .unwrap(),
            Err(e) => error_reply(e),
        },
        (&Method::POST, ["containers", id, "wait"]) => match engine.wait_container(id).await {
            Ok(code) => reply(StatusCode::OK, json!({"StatusCode": code})),
            Err(e) => error_reply(e),
        },
        (&Method::GET, ["containers", id, "logs"]) => match engine.container_logs(id).await {
            Ok((stdout, stderr)) => {
                let mut out = Vec::new();
                frames(1, &stdout, &mut out);
                frames(2, &stderr, &mut out);
                Response::new(Full::new(Bytes::from(out)))
            }
            Err(e) => error_reply(e),
        },
        (&Method::DELETE, ["containers", id]) => {
            if !engine.created().iter().any(|c| c.id == *id) {
                return error_reply(EngineError::NoSuchContainer(id.to_string()));
            }
            match engine.remove_container(id).await {
                Ok(()) => Response::builder()
                    .status(StatusCode::NO_CONTENT)
                    .body(Full::default())
                    .unwrap(),
                Err(e) => error_reply(e),
            }
        }
        _ => reply(
            StatusCode::NOT_FOUND,
            json!({"message": format!("no route for {method} {path}")}),
        ),
    }
}
