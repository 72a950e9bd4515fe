//! Capability object handed to app code. It is the app's only authority:
//! stdin, a connection to the package's KMS, and bounded scratch storage.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCRATCH_ROOT: &str = "/scratch/";
pub const DEFAULT_SCRATCH_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SandboxViolation {
    #[error("network access to {endpoint} denied")]
    Network { endpoint: String },
    #[error("filesystem access to {path} denied")]
    Filesystem { path: String },
    #[error("scratch space exhausted ({requested} bytes requested, {capacity} capacity)")]
    ScratchExhausted { requested: usize, capacity: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AppError {
    #[error("sandbox violation: {0}")]
    Violation(#[from] SandboxViolation),
    #[error("app failed: {0}")]
    Failed(String),
}

pub struct Sandbox<'a> {
    stdin: &'a [u8],
    kms_endpoint: &'a str,
    scratch: BTreeMap<String, Vec<u8>>,
    scratch_used: usize,
    scratch_capacity: usize,
    kms_connections: u32,
    violations: Vec<SandboxViolation>,
}

impl<'a> Sandbox<'a> {
    pub fn new(stdin: &'a [u8], kms_endpoint: &'a str, scratch_capacity: usize) -> Self {
        Self {
            stdin,
            kms_endpoint,
            scratch: BTreeMap::new(),
            scratch_used: 0,
            scratch_capacity,
            kms_connections: 0,
            violations: Vec::new(),
        }
    }

    pub fn stdin(&self) -> &[u8] {
        self.stdin
    }

    /// Only the package's KMS endpoint is reachable.
    pub fn connect(&mut self, endpoint: &str) -> Result<(), SandboxViolation> {
        if endpoint == self.kms_endpoint {
            self.kms_connections += 1;
            Ok(())
        } else {
            self.deny(SandboxViolation::Network {
                endpoint: endpoint.to_string(),
            })
        }
    }

    pub fn write_file(&mut self, path: &str, data: &[u8]) -> Result<(), SandboxViolation> {
        let key = self.scratch_key(path)?;
        let old = self.scratch.get(&key).map_or(0, Vec::len);
        let used = self.scratch_used - old + data.len();
        if used > self.scratch_capacity {
            return self.deny(SandboxViolation::ScratchExhausted {
                requested: data.len(),
                capacity: self.scratch_capacity,
            });
        }
        self.scratch_used = used;
        self.scratch.insert(key, data.to_vec());
        Ok(())
    }

    pub fn read_file(&mut self, path: &str) -> Result<Option<&[u8]>, SandboxViolation> {
        let key = self.scratch_key(path)?;
        Ok(self.scratch.get(&key).map(Vec::as_slice))
    }

    pub fn violations(&self) -> &[SandboxViolation] {
        &self.violations
    }

    pub fn kms_connections(&self) -> u32 {
        self.kms_connections
    }

    fn scratch_key(&mut self, path: &str) -> Result<String, SandboxViolation> {
        let inside = path
            .strip_prefix(SCRATCH_ROOT)
            .filter(|rest| !rest.is_empty() && rest.split('/').all(|c| !c.is_empty() && c != "." && c != ".."));
        match inside {
            Some(rest) => Ok(rest.to_string()),
            None => self.deny(SandboxViolation::Filesystem { path: path.to_string() }),
        }
    }

    fn deny<T>(&mut self, v: SandboxViolation) -> Result<T, SandboxViolation> {
        self.violations.push(v.clone());
        Err(v)
    }
}

type AppFn = dyn Fn(&mut Sandbox<'_>) -> Result<Vec<u8>, AppError> + Send + Sync;

/// Executable app behavior run inside a [`Sandbox`].
#[derive(Clone)]
pub struct AppBehavior(Arc<AppFn>);

impl AppBehavior {
    pub fn new(f: impl Fn(&mut Sandbox<'_>) -> Result<Vec<u8>, AppError> + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn run(&self, sandbox: &mut Sandbox<'_>) -> Result<Vec<u8>, AppError> {
        (self.0)(sandbox)
    }
}

impl fmt::Debug for AppBehavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("AppBehavior(..)")
    }
}

/// Adler-32 of `data`.
pub fn adler32(data: &[u8]) -> u32 {
    const MOD: u32 = 65521;
    // 5552 is the largest n with 255·n·(n+1)/2 + (n+1)·(MOD−1) < 2^32.
    let (mut a, mut b) = (1u32, 0u32);
    for chunk in data.chunks(5552) {
        for &byte in chunk {
            a += u32::from(byte);
            b += a;
        }
        a %= MOD;
        b %= MOD;
    }
    (b << 16) | a
}

/// Built-in native functions available to every platform.
pub fn builtin_natives() -> Vec<(&'static str, AppBehavior)> {
    vec![
        (
            "checksum",
            AppBehavior::new(|sb| {
                let input = sb.stdin();
                Ok(serde_json::json!({ "adler32": adler32(input), "len": input.len() })
                    .to_string()
                    .into_bytes())
            }),
        ),
        (
            "byte-count",
            AppBehavior::new(|sb| Ok(serde_json::json!({ "len": sb.stdin().len() }).to_string().into_bytes())),
        ),
        ("echo", AppBehavior::new(|sb| Ok(sb.stdin().to_vec()))),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adler32_known_vector() {
        assert_eq!(adler32(b"Wikipedia"), 0x11E6_0398);
        assert_eq!(adler32(b""), 1);
    }

    #[test]
    fn only_kms_is_reachable() {
        let mut sb = Sandbox::new(b"x", "https://kms:8443", 16);
        assert!(sb.connect("https://kms:8443").is_ok());
        assert!(sb.connect("https://evil.example").is_err());
        assert_eq!(sb.kms_connections(), 1);
        assert_eq!(sb.violations().len(), 1);
    }

    #[test]
    fn scratch_is_confined_and_bounded() {
        let mut sb = Sandbox::new(b"", "kms", 8);
        sb.write_file("/scratch/a", b"1234").unwrap();
        sb.write_file("/scratch/a", b"12345678").unwrap();
        assert_eq!(sb.read_file("/scratch/a").unwrap(), Some(&b"12345678"[..]));
        assert!(matches!(
            sb.write_file("/scratch/b", b"9"),
            Err(SandboxViolation::ScratchExhausted { .. })
        ));
        for bad in ["/etc/passwd", "/scratch/../etc/passwd", "/scratch/", "scratch/a", "/scratch//x"] {
            assert!(
                matches!(sb.write_file(bad, b""), Err(SandboxViolation::Filesystem { .. })),
                "{bad}"
            );
        }
    }
}
