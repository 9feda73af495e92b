use std::fmt::Display;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

/// A command failure with its exit status: 2 for malformed input, 1 for
/// everything else.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn schema(message: impl Display) -> Self {
        Self { code: 2, message: message.to_string() }
    }

    pub fn failed(message: impl Display) -> Self {
        Self { code: 1, message: message.to_string() }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub fn read_text(path: &Path) -> CmdResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::failed(format!("{}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CmdResult<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Failure::schema(format!("{}: {e}", path.display())))
}

/// One JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CmdResult<Vec<T>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Failure::schema(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::failed(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::failed(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    write_text(path, &text)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> CmdResult {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("output serializes"));
        text.push('\n');
    }
    write_text(path, &text)
}

/// `*.json` (or `*.jsonl`) files directly in `dir`, sorted by name.
pub fn list_files(dir: &Path, ext: &str) -> CmdResult<Vec<std::path::PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::failed(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Failure::failed(format!("{}: {e}", dir.display())))?.path();
        if path.is_file() && path.extension().and_then(|e| e.to_str()) == Some(ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
