use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("tag <{0}> not found")]
    TagNotFound(String),
    #[error("tag <{0}> is never closed")]
    UnclosedTag(String),
    #[error("field `{0}` missing")]
    FieldMissing(&'static str),
    #[error("field `{0}` could not be parsed")]
    FieldUnparseable(&'static str),
    #[error("no `|` delimiter between the two label lists")]
    MissingDelimiter,
}

/// Content of the first well-formed `<tag>…</tag>` span, trimmed. When an
/// opening tag is repeated before its close, the last opening wins.
pub fn parse_tagged(text: &str, tag: &str) -> Result<String, ParseError> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text
        .find(&open)
        .ok_or_else(|| ParseError::TagNotFound(tag.to_string()))?
        + open.len();
    let len = text[start..]
        .find(&close)
        .ok_or_else(|| ParseError::UnclosedTag(tag.to_string()))?;
    let mut content = &text[start..start + len];
    if let Some(stray) = content.rfind(&open) {
        content = &content[stray + open.len()..];
    }
    Ok(content.trim().to_string())
}

pub fn wrap_tagged(payload: &str, tag: &str) -> String {
    format!("<{tag}>{payload}</{tag}>")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SectionType {
    #[serde(rename = "PT")]
    PrimaryTumor,
    #[serde(rename = "LN")]
    LymphNode,
}

/// The structured block at the end of a final-summary answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticInfo {
    #[serde(rename = "PT_or_LN")]
    pub pt_or_ln: SectionType,
    pub t_stage: u8,
    pub lymph_node_positive: bool,
    pub positive_regions: Vec<u32>,
    pub suspicious_regions: Vec<u32>,
}

fn unquote(s: &str) -> &str {
    let s = s.trim().trim_end_matches([',', ';']).trim();
    s.trim_matches(|c| matches!(c, '"' | '\'' | '`' | '\u{201c}' | '\u{201d}' | '*'))
        .trim()
}

fn normalize_key(raw: &str) -> String {
    raw.trim()
        .trim_start_matches(['-', '*', '\u{2022}'])
        .trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '*') || c.is_whitespace())
        .to_ascii_lowercase()
}

fn parse_list(raw: &str, field: &'static str) -> Result<Vec<u32>, ParseError> {
    let bad = || ParseError::FieldUnparseable(field);
    let s = unquote(raw);
    let inner = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')).ok_or_else(bad)?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|item| unquote(item).parse::<u32>().map_err(|_| bad()))
        .collect()
}

/// Parses the `<diagnostic_info>` block of a final-summary answer.
///
/// Keys are matched case-insensitively, one `key: value` per line; values
/// may be quoted, booleans may use any case. Enum values are strict.
pub fn parse_diagnostic_info(text: &str) -> Result<DiagnosticInfo, ParseError> {
    let block = parse_tagged(text, "diagnostic_info")?;
    const KEYS: [&str; 5] = [
        "pt_or_ln",
        "t_stage",
        "lymph_node_positive",
        "positive_regions",
        "suspicious_regions",
    ];
    let mut values: [Option<&str>; 5] = [None; 5];
    for line in block.lines() {
        let Some((key, value)) = line.split_once(':') else { continue };
        let key = normalize_key(key);
        if let Some(slot) = KEYS.iter().position(|k| *k == key) {
            values[slot].get_or_insert(value);
        }
    }
    let get = |slot: usize, name: &'static str| values[slot].ok_or(ParseError::FieldMissing(name));

    let pt_or_ln = match unquote(get(0, "PT_or_LN")?).to_ascii_uppercase().as_str() {
        "PT" => SectionType::PrimaryTumor,
        "LN" => SectionType::LymphNode,
        _ => return Err(ParseError::FieldUnparseable("PT_or_LN")),
    };
    let t_stage: u8 = unquote(get(1, "t_stage")?)
        .parse()
        .ok()
        .filter(|t| *t <= 4)
        .ok_or(ParseError::FieldUnparseable("t_stage"))?;
    if pt_or_ln == SectionType::LymphNode && t_stage != 0 {
        return Err(ParseError::FieldUnparseable("t_stage"));
    }
    let lymph_node_positive = match unquote(get(2, "lymph_node_positive")?).to_ascii_lowercase().as_str() {
        "true" => true,
        "false" => false,
        _ => return Err(ParseError::FieldUnparseable("lymph_node_positive")),
    };
    let positive_regions = parse_list(get(3, "positive_regions")?, "positive_regions")?;
    if !lymph_node_positive && !positive_regions.is_empty() {
        return Err(ParseError::FieldUnparseable("positive_regions"));
    }
    let suspicious_regions = parse_list(get(4, "suspicious_regions")?, "suspicious_regions")?;

    Ok(DiagnosticInfo {
        pt_or_ln,
        t_stage,
        lymph_node_positive,
        positive_regions,
        suspicious_regions,
    })
}

/// A closed label set; `other` is always a member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    classes: Vec<String>,
}

pub const OTHER: &str = "other";

impl Taxonomy {
    pub fn new<I, S>(classes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut classes: Vec<String> = classes.into_iter().map(Into::into).collect();
        if !classes.iter().any(|c| c == OTHER) {
            classes.push(OTHER.to_string());
        }
        Self { classes }
    }

    /// Low-magnification (region-level) classes for lymph-node metastasis.
    pub fn box_level() -> Self {
        Self::new([
            "Tumor deposit",
            "Gland formation",
            "Tumor stroma",
            "Necrosis",
            "Germinal center",
            "Lymphoid follicle",
            "Medullary cord",
            "Sinus",
            "Paracortex",
            "Sinus histiocytosis",
            "Fibrosis",
            "Congestion",
            "Hemorrhage",
            "Fatty replacement",
            "other",
        ])
    }

    /// High-magnification (cell-level) classes.
    pub fn cell_level() -> Self {
        Self::new([
            "Tumor cell",
            "Mitotic figure",
            "Atypical glandular cell",
            "Signet ring cell",
            "Lymphocyte",
            "Plasma cell",
            "Macrophage",
            "Endothelial cell",
            "Fibroblast",
            "Erythrocyte",
            "Fat cell",
            "Extracellular matrix",
            "Apoptotic body",
            "Dead cell",
            "Inflammatory cell",
            "other",
        ])
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    fn canonical(&self, label: &str) -> Option<&str> {
        self.classes
            .iter()
            .find(|c| c.eq_ignore_ascii_case(label))
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Box,
    Cell,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnknownLabel {
    pub view: View,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultilabelResult {
    pub box_tags: Vec<String>,
    pub cell_tags: Vec<String>,
    /// Labels outside the taxonomy; each was mapped to `other`.
    pub unknown: Vec<UnknownLabel>,
}

fn classify_side(side: &str, taxonomy: &Taxonomy, view: View, unknown: &mut Vec<UnknownLabel>) -> Vec<String> {
    let mut tags: Vec<String> = Vec::new();
    for raw in side.split(',') {
        let label = unquote(raw);
        if label.is_empty() {
            continue;
        }
        let tag = match taxonomy.canonical(label) {
            Some(c) => c.to_string(),
            None => {
                unknown.push(UnknownLabel { view, label: label.to_string() });
                OTHER.to_string()
            }
        };
        if !tags.contains(&tag) {
            tags.push(tag);
        }
    }
    if tags.is_empty() {
        tags.push(OTHER.to_string());
    }
    tags
}

/// Parses a `box_labels|cell_labels` answer.
pub fn parse_multilabel(
    text: &str,
    box_taxonomy: &Taxonomy,
    cell_taxonomy: &Taxonomy,
) -> Result<MultilabelResult, ParseError> {
    let (boxes, cells) = text.trim().split_once('|').ok_or(ParseError::MissingDelimiter)?;
    let mut unknown = Vec::new();
    let box_tags = classify_side(boxes, box_taxonomy, View::Box, &mut unknown);
    let cell_tags = classify_side(cells, cell_taxonomy, View::Cell, &mut unknown);
    Ok(MultilabelResult { box_tags, cell_tags, unknown })
}
