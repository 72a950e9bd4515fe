//! Notification sink: JSON-lines file plus an optional webhook.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::RuleError;
use crate::clock::Millis;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub at: Millis,
    pub text: String,
}

#[derive(Default)]
pub struct NotificationSink {
    file: Option<File>,
    webhook: Option<(String, reqwest::blocking::Client)>,
    entries: Vec<Notification>,
}

impl std::fmt::Debug for NotificationSink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NotificationSink")
            .field("entries", &self.entries.len())
            .field("webhook", &self.webhook.as_ref().map(|w| &w.0))
            .finish()
    }
}

impl NotificationSink {
    pub fn memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self, RuleError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| RuleError::Sink(format!("{}: {e}", path.display())))?;
        Ok(Self {
            file: Some(file),
            ..Self::default()
        })
    }

    pub fn with_webhook(mut self, url: &str) -> Result<Self, RuleError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(5))
            .build()
            .map_err(|e| RuleError::Sink(e.to_string()))?;
        self.webhook = Some((url.to_string(), client));
        Ok(self)
    }

    /// Records the notification; webhook delivery failures are logged only.
    pub fn push(&mut self, at: Millis, text: &str) -> Result<(), RuleError> {
        let n = Notification {
            at,
            text: text.to_string(),
        };
        if let Some(f) = self.file.as_mut() {
            let mut line = serde_json::to_vec(&n).map_err(|e| RuleError::Sink(e.to_string()))?;
            line.push(b'\n');
            f.write_all(&line).map_err(|e| RuleError::Sink(e.to_string()))?;
        }
        if let Some((url, client)) = &self.webhook {
            if let Err(e) = client.post(url).json(&n).send().and_then(|r| r.error_for_status()) {
                tracing::warn!(%url, error = %e, "webhook delivery failed");
            }
        }
        self.entries.push(n);
        Ok(())
    }

    pub fn entries(&self) -> &[Notification] {
        &self.entries
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_sink_appends_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.jsonl");
        let mut s = NotificationSink::to_file(&path).unwrap();
        s.push(5, "detected a person").unwrap();
        s.push(9, "again").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<Notification> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, s.entries());
    }
}
