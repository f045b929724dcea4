//! Project-level steering inbox: one JSON file per note under `inbox/`.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::storage::FileStore;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SteeringNote {
    pub text: String,
    pub created_at: DateTime<Utc>,
    pub consumed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consumed_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consumed_by: Option<String>,
}

static SEQ: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone)]
pub struct Inbox {
    dir: PathBuf,
    files: FileStore,
}

impl Inbox {
    pub fn new(dir: impl Into<PathBuf>, files: FileStore) -> Inbox {
        Inbox { dir: dir.into(), files }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_of(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    /// Store a new unconsumed note. Ids sort by creation time.
    pub fn add(&self, text: &str) -> Result<(String, SteeringNote)> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::Validation("steering note is empty".into()));
        }
        let now = Utc::now();
        let id = format!(
            "note_{}_{}_{}",
            now.format("%Y%m%dT%H%M%S%.9fZ").to_string().replace('.', ""),
            std::process::id(),
            SEQ.fetch_add(1, Ordering::Relaxed)
        );
        let note = SteeringNote {
            text: text.to_string(),
            created_at: now,
            ..Default::default()
        };
        self.files.write(self.path_of(&id), &note)?;
        Ok((id, note))
    }

    /// All notes sorted by id.
    pub fn list(&self) -> Result<Vec<(String, SteeringNote)>> {
        let entries = match std::fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&self.dir, e)),
        };
        let mut ids: Vec<String> = entries
            .flatten()
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                // skip temp files and lock files
                if name.starts_with('.') {
                    return None;
                }
                name.strip_suffix(".json").map(str::to_string)
            })
            .collect();
        ids.sort();
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let note: Option<SteeringNote> = self.files.read(self.path_of(&id), None)?;
            if let Some(note) = note {
                out.push((id, note));
            }
        }
        Ok(out)
    }

    pub fn pending(&self) -> Result<Vec<(String, SteeringNote)>> {
        Ok(self.list()?.into_iter().filter(|(_, n)| !n.consumed).collect())
    }

    pub fn has_pending(&self) -> Result<bool> {
        Ok(!self.pending()?.is_empty())
    }

    /// Mark one note consumed. Returns the note only if this call flipped
    /// the flag; a note already consumed yields `None`.
    pub fn consume(&self, id: &str, by: &str) -> Result<Option<SteeringNote>> {
        self.files.update(self.path_of(id), |slot: &mut Option<SteeringNote>| {
            let note = slot
                .as_mut()
                .ok_or_else(|| Error::Validation(format!("no steering note {id}")))?;
            if note.consumed {
                return Ok(None);
            }
            note.consumed = true;
            note.consumed_at = Some(Utc::now());
            note.consumed_by = Some(by.to_string());
            Ok(Some(note.clone()))
        })
    }

    /// Consume every pending note, oldest first.
    pub fn consume_pending(&self, by: &str) -> Result<Vec<SteeringNote>> {
        let mut out = Vec::new();
        for (id, _) in self.pending()? {
            if let Some(n) = self.consume(&id, by)? {
                out.push(n);
            }
        }
        Ok(out)
    }
}
