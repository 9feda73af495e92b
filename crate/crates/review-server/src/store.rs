//! File-backed review sessions.
//!
//! Layout under the data root:
//!
//! ```text
//! sessions/{id}/tasks.json       SessionManifest
//! sessions/{id}/decisions.jsonl  append-only ReviewEvent log
//! sessions/{id}/snapshot.json    ReviewState derived from the log
//! images/...                     crops, served under /images
//! ```
//!
//! The log is the source of truth. The snapshot is rewritten after every
//! change and on load, and is never read back.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use pathcot::review::{ReviewError, ReviewEvent, ReviewSession, TaskSpec};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "tasks.json";
pub const LOG_FILE: &str = "decisions.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    #[serde(default = "default_reviewer")]
    pub reviewer_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idle_timeout_ms: Option<u64>,
    pub tasks: Vec<TaskSpec>,
}

fn default_reviewer() -> String {
    "reviewer".into()
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("session `{0}` not found")]
    NotFound(String),
    #[error("invalid session id `{0}`")]
    InvalidId(String),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Ids become directory names, so only a conservative alphabet is allowed.
pub fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// A loaded session plus how many of its events are already on disk.
#[derive(Debug)]
pub struct StoredSession {
    pub session: ReviewSession,
    dir: PathBuf,
    persisted: usize,
}

impl StoredSession {
    /// Appends events not yet on disk, then refreshes the snapshot.
    pub fn persist(&mut self) -> Result<(), StoreError> {
        let events = &self.session.events()[self.persisted..];
        if !events.is_empty() {
            let path = self.dir.join(LOG_FILE);
            let mut buf = String::new();
            for e in events {
                buf.push_str(&serde_json::to_string(e).expect("events serialize"));
                buf.push('\n');
            }
            let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
            f.write_all(buf.as_bytes()).map_err(io_err(&path))?;
            f.sync_data().map_err(io_err(&path))?;
            self.persisted = self.session.events().len();
        }
        write_snapshot(&self.dir, &self.session)
    }
}

fn write_snapshot(dir: &Path, session: &ReviewSession) -> Result<(), StoreError> {
    let path = dir.join(SNAPSHOT_FILE);
    let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
    let body = serde_json::to_vec_pretty(session.state()).expect("state serializes");
    fs::write(&tmp, body).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &path).map_err(io_err(&path))
}

pub fn read_log(path: &Path) -> Result<Vec<ReviewEvent>, StoreError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut events = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line)
            .map_err(|e| StoreError::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() })?;
        events.push(event);
    }
    Ok(events)
}

/// Sessions are loaded lazily and kept in memory; each has its own lock so
/// requests within a session are serialized while sessions proceed in
/// parallel.
#[derive(Debug)]
pub struct SessionStore {
    root: PathBuf,
    sessions: Mutex<HashMap<String, Arc<Mutex<StoredSession>>>>,
}

impl SessionStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), sessions: Mutex::new(HashMap::new()) }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("images")
    }

    /// Writes a new session's manifest. Fails if the session already exists.
    pub fn create(&self, id: &str, manifest: &SessionManifest) -> Result<(), StoreError> {
        if !valid_session_id(id) {
            return Err(StoreError::InvalidId(id.into()));
        }
        let dir = self.session_dir(id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(MANIFEST_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(io_err(&path))?;
        f.write_all(&serde_json::to_vec_pretty(manifest).expect("manifest serializes")).map_err(io_err(&path))
    }

    pub fn get(&self, id: &str) -> Result<Arc<Mutex<StoredSession>>, StoreError> {
        if !valid_session_id(id) {
            return Err(StoreError::NotFound(id.into()));
        }
        let mut map = self.sessions.lock().expect("session map poisoned");
        if let Some(s) = map.get(id) {
            return Ok(s.clone());
        }
        let loaded = Arc::new(Mutex::new(self.load(id)?));
        map.insert(id.to_string(), loaded.clone());
        Ok(loaded)
    }

    fn load(&self, id: &str) -> Result<StoredSession, StoreError> {
        let dir = self.session_dir(id);
        let path = dir.join(MANIFEST_FILE);
        let raw = match fs::read(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::NotFound(id.into())),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let manifest: SessionManifest = serde_json::from_slice(&raw)
            .map_err(|e| StoreError::Parse { path: path.clone(), line: e.line(), message: e.to_string() })?;
        let events = read_log(&dir.join(LOG_FILE))?;
        let persisted = events.len();
        let session = ReviewSession::new(id, manifest.reviewer_id, manifest.tasks)
            .with_idle_timeout(manifest.idle_timeout_ms)
            .replay(events)?;
        write_snapshot(&dir, &session)?;
        tracing::debug!(session = id, events = persisted, "loaded review session");
        Ok(StoredSession { session, dir, persisted })
    }
}
