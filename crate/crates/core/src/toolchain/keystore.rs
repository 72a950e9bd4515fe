//! Hub key store: app key pairs encrypted at rest under a key derived from
//! the hub master secret.
//!
//! File layout (JSON): `{version, salt, entries: {app_id: {nonce, ciphertext}}}`.
//! Each entry is AES-256-GCM with the app id as associated data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use zeroize::Zeroizing;

use super::ToolchainError;
use crate::envelope::{b64, AppId, AppKeyPair};

const VERSION: u32 = 1;
const INFO: &[u8] = b"ssiot hub key store v1";

#[derive(Serialize, Deserialize)]
struct Entry {
    #[serde(with = "b64")]
    nonce: Vec<u8>,
    #[serde(with = "b64")]
    ciphertext: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct StoreFile {
    version: u32,
    #[serde(with = "b64")]
    salt: Vec<u8>,
    entries: BTreeMap<String, Entry>,
}

pub struct HubKeyStore {
    path: PathBuf,
    cipher: Aes256Gcm,
    file: StoreFile,
}

impl std::fmt::Debug for HubKeyStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HubKeyStore")
            .field("path", &self.path)
            .field("apps", &self.file.entries.keys().collect::<Vec<_>>())
            .finish()
    }
}

fn store_err(e: impl std::fmt::Display) -> ToolchainError {
    ToolchainError::KeyStore(e.to_string())
}

impl HubKeyStore {
    /// Opens `path`, creating an empty store if it does not exist. A wrong
    /// master secret is detected on the first `get`.
    pub fn open(path: &Path, master_secret: &[u8]) -> Result<Self, ToolchainError> {
        if master_secret.len() < 16 {
            return Err(store_err("master secret must be at least 16 bytes"));
        }
        let file = if path.exists() {
            let f: StoreFile = serde_json::from_slice(&fs::read(path)?).map_err(store_err)?;
            if f.version != VERSION {
                return Err(store_err(format!("unsupported key store version {}", f.version)));
            }
            f
        } else {
            let mut salt = vec![0u8; 16];
            OsRng.try_fill_bytes(&mut salt).map_err(store_err)?;
            StoreFile {
                version: VERSION,
                salt,
                entries: BTreeMap::new(),
            }
        };
        let mut key = Zeroizing::new([0u8; 32]);
        Hkdf::<Sha256>::new(Some(&file.salt), master_secret)
            .expand(INFO, &mut key[..])
            .map_err(store_err)?;
        let cipher = Aes256Gcm::new_from_slice(&key[..]).map_err(store_err)?;
        Ok(Self {
            path: path.to_path_buf(),
            cipher,
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, app_id: &AppId) -> bool {
        self.file.entries.contains_key(app_id.as_str())
    }

    pub fn app_ids(&self) -> Vec<String> {
        self.file.entries.keys().cloned().collect()
    }

    /// Adds or replaces the pair for its app and rewrites the file.
    pub fn put(&mut self, pair: &AppKeyPair) -> Result<(), ToolchainError> {
        let plaintext = Zeroizing::new(serde_json::to_vec(pair).map_err(store_err)?);
        let mut nonce = [0u8; 12];
        OsRng.try_fill_bytes(&mut nonce).map_err(store_err)?;
        let ciphertext = self
            .cipher
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: &plaintext,
                    aad: pair.app_id.as_str().as_bytes(),
                },
            )
            .map_err(store_err)?;
        self.file.entries.insert(
            pair.app_id.as_str().to_string(),
            Entry {
                nonce: nonce.to_vec(),
                ciphertext,
            },
        );
        self.flush()
    }

    pub fn get(&self, app_id: &AppId) -> Result<Option<AppKeyPair>, ToolchainError> {
        let Some(e) = self.file.entries.get(app_id.as_str()) else {
            return Ok(None);
        };
        if e.nonce.len() != 12 {
            return Err(store_err("bad nonce length"));
        }
        let plaintext = Zeroizing::new(
            self.cipher
                .decrypt(
                    Nonce::from_slice(&e.nonce),
                    Payload {
                        msg: &e.ciphertext,
                        aad: app_id.as_str().as_bytes(),
                    },
                )
                .map_err(|_| store_err("entry failed authentication (wrong master secret?)"))?,
        );
        Ok(Some(serde_json::from_slice(&plaintext).map_err(store_err)?))
    }

    fn flush(&self) -> Result<(), ToolchainError> {
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = self.path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&self.file).map_err(store_err)?)?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(&tmp, fs::Permissions::from_mode(0o600))?;
        }
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::generate_app_keypair;

    #[test]
    fn roundtrip_and_wrong_secret() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("keys.json");
        let pair = generate_app_keypair(&AppId::new("cam").unwrap()).unwrap();
        let mut s = HubKeyStore::open(&path, b"0123456789abcdef-master").unwrap();
        s.put(&pair).unwrap();
        let reopened = HubKeyStore::open(&path, b"0123456789abcdef-master").unwrap();
        assert_eq!(reopened.get(&pair.app_id).unwrap(), Some(pair.clone()));
        let wrong = HubKeyStore::open(&path, b"0123456789abcdef-other!").unwrap();
        assert!(wrong.get(&pair.app_id).is_err());
        assert!(HubKeyStore::open(&path, b"short").is_err());
    }

    #[test]
    fn file_holds_no_raw_key_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("keys.json");
        let pair = generate_app_keypair(&AppId::new("cam").unwrap()).unwrap();
        HubKeyStore::open(&path, b"0123456789abcdef").unwrap().put(&pair).unwrap();
        let raw = fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&raw);
        let secret = pair.private.to_bytes();
        assert!(!text.contains(&b64::encode(&secret[..])));
        assert!(!raw.windows(32).any(|w| w == &secret[..32] || w == &secret[32..]));
    }
}
