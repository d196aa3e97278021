use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use super::EngineError;

pub const DEFAULT_SOCKET: &str = "/var/run/docker.sock";
pub const DEFAULT_API_VERSION: &str = "v1.41";
pub const REPRO_HOST_ENV: &str = "REPRO_DOCKER_HOST";
pub const DOCKER_HOST_ENV: &str = "DOCKER_HOST";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    LocalSocket(PathBuf),
    /// `host:port`
    Tcp(String),
}

/// Where the container engine listens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineEndpoint {
    pub transport: Transport,
    pub api_version: String,
}

impl EngineEndpoint {
    pub fn local_socket(path: impl Into<PathBuf>) -> Self {
        Self {
            transport: Transport::LocalSocket(path.into()),
            api_version: DEFAULT_API_VERSION.into(),
        }
    }

    pub fn tcp(address: impl Into<String>) -> Self {
        Self {
            transport: Transport::Tcp(address.into()),
            api_version: DEFAULT_API_VERSION.into(),
        }
    }

    /// Resolution order: explicit value, `REPRO_DOCKER_HOST`, `DOCKER_HOST`,
    /// then the default local socket.
    pub fn resolve(explicit: Option<&str>) -> Result<Self, EngineError> {
        Self::resolve_with(explicit, |k| std::env::var(k).ok())
    }

    pub fn resolve_with(explicit: Option<&str>, env: impl Fn(&str) -> Option<String>) -> Result<Self, EngineError> {
        let chosen = explicit
            .map(str::to_string)
            .or_else(|| env(REPRO_HOST_ENV).filter(|v| !v.is_empty()))
            .or_else(|| env(DOCKER_HOST_ENV).filter(|v| !v.is_empty()));
        match chosen {
            Some(s) => s.parse(),
            None => Ok(Self::local_socket(DEFAULT_SOCKET)),
        }
    }
}

impl FromStr for EngineEndpoint {
    type Err = EngineError;

    /// Accepts `unix:///path`, a bare absolute socket path, `tcp://host:port`
    /// and `http://host:port`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |why: &str| EngineError::InvalidEndpoint(format!("`{s}`: {why}"));
        if let Some(path) = s.strip_prefix("unix://") {
            if !path.starts_with('/') {
                return Err(bad("socket path must be absolute"));
            }
            return Ok(Self::local_socket(path));
        }
        if s.starts_with('/') {
            return Ok(Self::local_socket(s));
        }
        let address = s
            .strip_prefix("tcp://")
            .or_else(|| s.strip_prefix("http://"))
            .ok_or_else(|| bad("expected unix://, tcp:// or an absolute socket path"))?
            .trim_end_matches('/');
        match address.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => Ok(Self::tcp(address)),
            _ => Err(bad("tcp address needs host:port")),
        }
    }
}

impl fmt::Display for EngineEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.transport {
            Transport::LocalSocket(p) => write!(f, "unix://{}", p.display()),
            Transport::Tcp(a) => write!(f, "tcp://{a}"),
        }
    }
}
