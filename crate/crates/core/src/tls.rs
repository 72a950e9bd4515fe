//! TLS material for the HTTPS endpoints: self-signed certificates for desk
//! deployments, PEM loading and rustls server configuration.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rustls::pki_types::pem::PemObject;
use rustls::pki_types::{CertificateDer, PrivateKeyDer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TlsError {
    #[error("certificate generation failed: {0}")]
    Generate(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid PEM: {0}")]
    Pem(String),
    #[error("rustls configuration failed: {0}")]
    Config(String),
}

/// Makes ring the process-wide rustls provider. Safe to call repeatedly.
pub fn install_default_provider() {
    let _ = rustls::crypto::ring::default_provider().install_default();
}

#[derive(Clone)]
pub struct TlsMaterial {
    pub cert_pem: String,
    pub key_pem: String,
}

impl std::fmt::Debug for TlsMaterial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TlsMaterial").finish_non_exhaustive()
    }
}

impl TlsMaterial {
    pub fn self_signed(hosts: &[&str]) -> Result<Self, TlsError> {
        let names: Vec<String> = hosts.iter().map(|h| h.to_string()).collect();
        let ck = rcgen::generate_simple_self_signed(names).map_err(|e| TlsError::Generate(e.to_string()))?;
        Ok(Self {
            cert_pem: ck.cert.pem(),
            key_pem: ck.key_pair.serialize_pem(),
        })
    }

    /// Certificate valid for `localhost` and `127.0.0.1`.
    pub fn localhost() -> Result<Self, TlsError> {
        Self::self_signed(&["localhost", "127.0.0.1"])
    }

    pub fn load(cert: &Path, key: &Path) -> Result<Self, TlsError> {
        let read = |p: &Path| {
            fs::read_to_string(p).map_err(|source| TlsError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        Ok(Self {
            cert_pem: read(cert)?,
            key_pem: read(key)?,
        })
    }

    /// Loads the pair if both files exist, otherwise generates and writes a
    /// localhost certificate.
    pub fn load_or_create(cert: &Path, key: &Path) -> Result<Self, TlsError> {
        if cert.exists() && key.exists() {
            return Self::load(cert, key);
        }
        let m = Self::localhost()?;
        for (p, body) in [(cert, &m.cert_pem), (key, &m.key_pem)] {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir).map_err(|source| TlsError::Io {
                    path: dir.display().to_string(),
                    source,
                })?;
            }
            fs::write(p, body).map_err(|source| TlsError::Io {
                path: p.display().to_string(),
                source,
            })?;
        }
        Ok(m)
    }

    /// TLS 1.2 and 1.3 only, no client authentication.
    pub fn server_config(&self) -> Result<Arc<rustls::ServerConfig>, TlsError> {
        let certs = CertificateDer::pem_slice_iter(self.cert_pem.as_bytes())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| TlsError::Pem(e.to_string()))?;
        let key = PrivateKeyDer::from_pem_slice(self.key_pem.as_bytes()).map_err(|e| TlsError::Pem(e.to_string()))?;
        let provider = Arc::new(rustls::crypto::ring::default_provider());
        let mut cfg = rustls::ServerConfig::builder_with_provider(provider)
            .with_protocol_versions(&[&rustls::version::TLS13, &rustls::version::TLS12])
            .map_err(|e| TlsError::Config(e.to_string()))?
            .with_no_client_auth()
            .with_single_cert(certs, key)
            .map_err(|e| TlsError::Config(e.to_string()))?;
        cfg.alpn_protocols = vec![b"h2".to_vec(), b"http/1.1".to_vec()];
        Ok(Arc::new(cfg))
    }
}
