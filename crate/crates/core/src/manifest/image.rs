use std::fmt;
use std::str::FromStr;

pub const DEFAULT_REGISTRY: &str = "docker.io";
pub const DEFAULT_TAG: &str = "latest";

/// Reference to a container image: `registry/repository:tag[@sha256:<hex>]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageRef {
    pub registry: String,
    pub repository: String,
    pub tag: String,
    /// Full digest including the `sha256:` prefix.
    pub digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid image reference `{reference}`: {reason}")]
pub struct InvalidImageRef {
    pub reference: String,
    pub reason: &'static str,
}

impl ImageRef {
    pub fn new(repository: impl Into<String>) -> Self {
        Self {
            registry: DEFAULT_REGISTRY.into(),
            repository: repository.into(),
            tag: DEFAULT_TAG.into(),
            digest: None,
        }
    }

    pub fn with_registry(mut self, registry: impl Into<String>) -> Self {
        self.registry = registry.into();
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    pub fn with_digest(mut self, digest: impl Into<String>) -> Self {
        self.digest = Some(digest.into());
        self
    }

    /// `registry/repository`, the `fromImage` value for a pull.
    pub fn name(&self) -> String {
        format!("{}/{}", self.registry, self.repository)
    }

    pub fn canonical(&self) -> String {
        match &self.digest {
            Some(d) => format!("{}/{}:{}@{}", self.registry, self.repository, self.tag, d),
            None => format!("{}/{}:{}", self.registry, self.repository, self.tag),
        }
    }

    pub fn validate(&self) -> Result<(), InvalidImageRef> {
        let err = |reason| InvalidImageRef {
            reference: self.canonical(),
            reason,
        };
        if !valid_registry(&self.registry) {
            return Err(err("bad registry host"));
        }
        if !valid_repository(&self.repository) {
            return Err(err("bad repository path"));
        }
        if !valid_tag(&self.tag) {
            return Err(err("bad tag"));
        }
        if let Some(d) = &self.digest {
            let hex = d
                .strip_prefix("sha256:")
                .ok_or_else(|| err("digest must start with sha256:"))?;
            if hex.len() != 64 || !hex.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
                return Err(err("digest must be 64 lowercase hex characters"));
            }
        }
        Ok(())
    }
}

/// Canonical string form of an image reference.
pub fn canonical_image_ref(image: &ImageRef) -> String {
    image.canonical()
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

impl FromStr for ImageRef {
    type Err = InvalidImageRef;

    /// Accepts the canonical form and the usual shorthands: the registry is
    /// recognised when the first path component contains `.` or `:` or is
    /// `localhost`; a missing tag means `latest`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |reason| InvalidImageRef {
            reference: s.to_string(),
            reason,
        };
        if s.is_empty() {
            return Err(err("empty"));
        }
        let (rest, digest) = match s.split_once('@') {
            Some((r, d)) => (r, Some(d.to_string())),
            None => (s, None),
        };
        let (registry, path) = match rest.split_once('/') {
            Some((first, tail)) if first.contains('.') || first.contains(':') || first == "localhost" => {
                (first.to_string(), tail)
            }
            _ => (DEFAULT_REGISTRY.to_string(), rest),
        };
        let last_slash = path.rfind('/').map_or(0, |i| i + 1);
        let (repository, tag) = match path[last_slash..].rfind(':') {
            Some(i) => (&path[..last_slash + i], &path[last_slash + i + 1..]),
            None => (path, DEFAULT_TAG),
        };
        let image = ImageRef {
            registry,
            repository: repository.to_string(),
            tag: tag.to_string(),
            digest,
        };
        image.validate().map_err(|e| err(e.reason))?;
        Ok(image)
    }
}

fn valid_registry(host: &str) -> bool {
    let (name, port) = match host.rsplit_once(':') {
        Some((n, p)) => (n, Some(p)),
        None => (host, None),
    };
    let name_ok = !name.is_empty()
        && name.split('.').all(|label| {
            !label.is_empty()
                && label.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
                && !label.starts_with('-')
                && !label.ends_with('-')
        });
    let port_ok = port.is_none_or(|p| !p.is_empty() && p.len() <= 5 && p.bytes().all(|b| b.is_ascii_digit()));
    name_ok && port_ok
}

fn valid_repository(repo: &str) -> bool {
    !repo.is_empty()
        && repo.len() <= 255
        && repo.split('/').all(|component| {
            let bytes = component.as_bytes();
            let is_alnum = |b: u8| b.is_ascii_lowercase() || b.is_ascii_digit();
            !bytes.is_empty()
                && is_alnum(bytes[0])
                && is_alnum(bytes[bytes.len() - 1])
                && bytes.iter().all(|&b| is_alnum(b) || matches!(b, b'.' | b'_' | b'-'))
        })
}

fn valid_tag(tag: &str) -> bool {
    let bytes = tag.as_bytes();
    !bytes.is_empty()
        && bytes.len() <= 128
        && (bytes[0].is_ascii_alphanumeric() || bytes[0] == b'_')
        && bytes
            .iter()
            .all(|&b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}
