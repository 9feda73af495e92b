//! Canonical viewer session logs.
//!
//! A session is stored as line-delimited JSON: the first non-blank line is a
//! header carrying the session and slide metadata, every following line is
//! one timestamped viewport sample. Viewer-specific exports are expected to
//! be converted into this form before they reach the pipeline.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LogError {
    #[error("line {0}: malformed")]
    MalformedLine(usize),
    #[error("line {line}: {message}")]
    SchemaError { line: usize, message: String },
    #[error("session has no events")]
    EmptySession,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideMeta {
    pub slide_id: String,
    pub width_px: u64,
    pub height_px: u64,
    /// Objective power of the scan, e.g. 40.
    pub native_magnification: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub microns_per_pixel: Option<f64>,
}

impl SlideMeta {
    pub fn width(&self) -> f64 {
        self.width_px as f64
    }

    pub fn height(&self) -> f64 {
        self.height_px as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Pan,
    Zoom,
    Stay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewportEvent {
    /// Milliseconds since session start.
    pub t_ms: u64,
    pub center_x: f64,
    pub center_y: f64,
    /// Effective objective power (native power divided by the downsample).
    pub magnification: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<MotionKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub session_id: String,
    pub pathologist_id: String,
    pub slide: SlideMeta,
    pub events: Vec<ViewportEvent>,
    /// Final diagnostic labels recorded for the slide, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    session_id: String,
    pathologist_id: String,
    slide: SlideMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    annotations: Option<Vec<String>>,
}

/// Parses a JSONL session document. Events come back sorted by `t_ms`; ties
/// keep their input order.
pub fn parse_session_log(text: &str) -> Result<SessionLog, LogError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());

    let (header_no, header_line) = lines.next().ok_or(LogError::EmptySession)?;
    let header_value: Value =
        serde_json::from_str(header_line).map_err(|_| LogError::MalformedLine(header_no))?;
    let header = parse_header(header_no, header_value)?;

    let mut events = Vec::new();
    for (line_no, line) in lines {
        let value: Value =
            serde_json::from_str(line).map_err(|_| LogError::MalformedLine(line_no))?;
        events.push(parse_event(line_no, &value)?);
    }
    if events.is_empty() {
        return Err(LogError::EmptySession);
    }
    events.sort_by_key(|e| e.t_ms);

    Ok(SessionLog {
        session_id: header.session_id,
        pathologist_id: header.pathologist_id,
        slide: header.slide,
        events,
        annotations: header.annotations,
    })
}

fn parse_header(line: usize, value: Value) -> Result<Header, LogError> {
    let obj = value.as_object().ok_or(LogError::MalformedLine(line))?;
    for key in ["session_id", "pathologist_id", "slide"] {
        if !obj.contains_key(key) {
            return Err(LogError::SchemaError {
                line,
                message: format!("missing required field `{key}`"),
            });
        }
    }
    if let Some(slide) = obj.get("slide").and_then(Value::as_object) {
        for key in ["slide_id", "width_px", "height_px", "native_magnification"] {
            if !slide.contains_key(key) {
                return Err(LogError::SchemaError {
                    line,
                    message: format!("missing required field `slide.{key}`"),
                });
            }
        }
    }
    serde_json::from_value(value).map_err(|_| LogError::MalformedLine(line))
}

fn parse_event(line: usize, value: &Value) -> Result<ViewportEvent, LogError> {
    let obj = value.as_object().ok_or(LogError::MalformedLine(line))?;

    // Type errors on present fields take precedence over missing fields.
    let t_ms = typed(obj, "t_ms", line, Value::as_u64)?;
    let center_x = typed(obj, "center_x", line, Value::as_f64)?;
    let center_y = typed(obj, "center_y", line, Value::as_f64)?;
    let magnification = typed(obj, "magnification", line, Value::as_f64)?;
    let kind = match obj.get("kind") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            serde_json::from_value::<MotionKind>(v.clone())
                .map_err(|_| LogError::MalformedLine(line))?,
        ),
    };

    let missing = |key: &str| LogError::SchemaError {
        line,
        message: format!("missing required field `{key}`"),
    };
    Ok(ViewportEvent {
        t_ms: t_ms.ok_or_else(|| missing("t_ms"))?,
        center_x: center_x.ok_or_else(|| missing("center_x"))?,
        center_y: center_y.ok_or_else(|| missing("center_y"))?,
        magnification: magnification.ok_or_else(|| missing("magnification"))?,
        kind,
    })
}

fn typed<T>(
    obj: &Map<String, Value>,
    key: &str,
    line: usize,
    get: impl Fn(&Value) -> Option<T>,
) -> Result<Option<T>, LogError> {
    match obj.get(key) {
        None => Ok(None),
        Some(v) => get(v).map(Some).ok_or(LogError::MalformedLine(line)),
    }
}

/// Writes the canonical JSONL form of a session.
pub fn serialize_session_log(log: &SessionLog) -> String {
    let header = Header {
        session_id: log.session_id.clone(),
        pathologist_id: log.pathologist_id.clone(),
        slide: log.slide.clone(),
        annotations: log.annotations.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for event in &log.events {
        out.push_str(&serde_json::to_string(event).expect("event serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventField {
    CenterX,
    CenterY,
    Magnification,
    TMs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Violation {
    EmptySession,
    NonPositiveSlideDimension { field: String },
    NonPositiveNativeMagnification,
    OutOfBounds { event: usize, field: EventField },
    NonPositiveMagnification { event: usize },
    NonMonotonicTime { event: usize },
}

/// Checks every invariant of the log model. An empty result means the log
/// is valid.
pub fn validate_session(log: &SessionLog) -> Vec<Violation> {
    let mut out = Vec::new();
    let slide = &log.slide;
    if slide.width_px == 0 {
        out.push(Violation::NonPositiveSlideDimension { field: "width_px".into() });
    }
    if slide.height_px == 0 {
        out.push(Violation::NonPositiveSlideDimension { field: "height_px".into() });
    }
    if !(slide.native_magnification > 0.0) {
        out.push(Violation::NonPositiveNativeMagnification);
    }
    if log.events.is_empty() {
        out.push(Violation::EmptySession);
    }

    let (w, h) = (slide.width(), slide.height());
    let mut prev_t = None;
    for (i, e) in log.events.iter().enumerate() {
        if prev_t.is_some_and(|p| e.t_ms < p) {
            out.push(Violation::NonMonotonicTime { event: i });
        }
        prev_t = Some(e.t_ms);
        if !(0.0..=w).contains(&e.center_x) {
            out.push(Violation::OutOfBounds { event: i, field: EventField::CenterX });
        }
        if !(0.0..=h).contains(&e.center_y) {
            out.push(Violation::OutOfBounds { event: i, field: EventField::CenterY });
        }
        if !(e.magnification > 0.0) {
            out.push(Violation::NonPositiveMagnification { event: i });
        }
    }
    out
}
