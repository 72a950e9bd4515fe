//! Append-only persistence for the KMS: one JSON line per event plus a key file.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AccessRecord, AppRegistration, KmsError};
use crate::clock::Millis;
use crate::envelope::{b64, AppId, KmsKeyPair};

const KEY_FILE: &str = "kms_key.json";
const LOG_FILE: &str = "kms_log.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event")]
pub(super) enum StoreEvent {
    Registered(Box<AppRegistration>),
    Revoked { app_id: AppId, at: Millis },
    Access(AccessRecord),
}

#[derive(Serialize, Deserialize)]
struct KeyFile {
    secret: String,
}

pub(super) struct KmsStore {
    log: Option<File>,
}

fn store_err(e: impl std::fmt::Display) -> KmsError {
    KmsError::Store { message: e.to_string() }
}

impl KmsStore {
    pub(super) fn memory() -> Self {
        Self { log: None }
    }

    pub(super) fn open(dir: &Path) -> Result<(KmsKeyPair, Self, Vec<StoreEvent>), KmsError> {
        fs::create_dir_all(dir).map_err(store_err)?;
        let keys = load_or_create_key(&dir.join(KEY_FILE))?;
        let log_path: PathBuf = dir.join(LOG_FILE);
        let mut events = Vec::new();
        if log_path.exists() {
            let reader = BufReader::new(File::open(&log_path).map_err(store_err)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(store_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let event = serde_json::from_str(&line)
                    .map_err(|e| store_err(format!("{}:{}: {e}", log_path.display(), n + 1)))?;
                events.push(event);
            }
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(store_err)?;
        Ok((keys, Self { log: Some(log) }, events))
    }

    pub(super) fn append(&mut self, event: &StoreEvent) -> Result<(), KmsError> {
        if let Some(f) = self.log.as_mut() {
            let mut line = serde_json::to_vec(event).map_err(store_err)?;
            line.push(b'\n');
            f.write_all(&line).map_err(store_err)?;
            f.flush().map_err(store_err)?;
        }
        Ok(())
    }
}

fn load_or_create_key(path: &Path) -> Result<KmsKeyPair, KmsError> {
    if path.exists() {
        let raw = fs::read_to_string(path).map_err(store_err)?;
        let kf: KeyFile = serde_json::from_str(&raw).map_err(store_err)?;
        let bytes = b64::decode(&kf.secret).map_err(store_err)?;
        let arr: [u8; 32] = bytes
            .as_slice()
            .try_into()
            .map_err(|_| store_err("KMS secret must be 32 bytes"))?;
        return Ok(KmsKeyPair::from_secret_bytes(arr));
    }
    let keys = KmsKeyPair::generate().map_err(store_err)?;
    let kf = KeyFile {
        secret: b64::encode(&keys.secret_bytes()[..]),
    };
    fs::write(path, serde_json::to_vec_pretty(&kf).map_err(store_err)?).map_err(store_err)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let _ = fs::set_permissions(path, fs::Permissions::from_mode(0o600));
    }
    Ok(keys)
}
