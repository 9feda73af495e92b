use thiserror::Error;

use super::{ChatTurn, PromptStage, Taxonomy};
use crate::images::ImageRef;

const OVERVIEW: &str = include_str!("../../templates/overview.txt");
const ROI_ANALYSIS: &str = include_str!("../../templates/roi_analysis.txt");
const FINAL_SUMMARY: &str = include_str!("../../templates/final_summary.txt");
const MULTILABEL: &str = include_str!("../../templates/multilabel_classify.txt");

/// Case-level task text for colorectal lymph-node metastasis screening.
pub const CRC_LN_TASK: &str =
    "This is an H&E WSI of a CRC case. The task is to find all positive lymph nodes.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt context is missing `{0}`")]
    MissingContext(&'static str),
}

/// Everything a template may need. Each stage reads only its own fields.
#[derive(Debug, Clone, Default)]
pub struct PromptContext {
    pub task: Option<String>,
    pub thumbnail: Option<ImageRef>,
    pub roi_crop: Option<ImageRef>,
    pub cyto_crop: Option<ImageRef>,
    /// Zero-based; rendered one-based to match `positive_regions` numbering.
    pub roi_index: Option<usize>,
    /// `(analyzed, planned)` region counts for the summary prompt.
    pub region_counts: Option<(usize, usize)>,
    pub conversation_text: Option<String>,
    pub box_taxonomy: Option<Taxonomy>,
    pub cell_taxonomy: Option<Taxonomy>,
}

/// Replaces `{key}` placeholders in one pass; inserted values are never
/// re-scanned and unknown placeholders are left alone.
pub fn render_template(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let key = &after[..close];
            vars.iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| (*v, close))
        });
        match replaced {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn need<T: Clone>(value: &Option<T>, name: &'static str) -> Result<T, PromptError> {
    value.clone().ok_or(PromptError::MissingContext(name))
}

/// Renders the turns for one stage. Callers keep the running conversation
/// and append these turns to it.
pub fn build_prompt(stage: PromptStage, ctx: &PromptContext) -> Result<Vec<ChatTurn>, PromptError> {
    let turn = match stage {
        PromptStage::Overview => {
            let task = need(&ctx.task, "task")?;
            let thumbnail = need(&ctx.thumbnail, "thumbnail")?;
            ChatTurn::user(render_template(OVERVIEW, &[("task", &task)]), vec![thumbnail])
        }
        PromptStage::RoiAnalysis => {
            let task = need(&ctx.task, "task")?;
            let index = need(&ctx.roi_index, "roi_index")?;
            let roi = need(&ctx.roi_crop, "roi_crop")?;
            let cyto = need(&ctx.cyto_crop, "cyto_crop")?;
            let number = (index + 1).to_string();
            let text = render_template(ROI_ANALYSIS, &[("task", &task), ("roi_number", &number)]);
            ChatTurn::user(text, vec![roi, cyto])
        }
        PromptStage::FinalSummary => {
            let note = ctx
                .region_counts
                .map(|(done, planned)| format!("Regions analyzed: {done} of {planned}.\n\n"))
                .unwrap_or_default();
            ChatTurn::user(render_template(FINAL_SUMMARY, &[("region_note", &note)]), Vec::new())
        }
        PromptStage::MultilabelClassify => {
            let text = need(&ctx.conversation_text, "conversation_text")?;
            let boxes = ctx.box_taxonomy.clone().unwrap_or_else(Taxonomy::box_level);
            let cells = ctx.cell_taxonomy.clone().unwrap_or_else(Taxonomy::cell_level);
            let rendered = render_template(
                MULTILABEL,
                &[
                    ("box_classes", &boxes.classes().join(", ")),
                    ("cell_classes", &cells.classes().join(", ")),
                    ("text", &text),
                ],
            );
            ChatTurn::user(rendered, Vec::new())
        }
    };
    Ok(vec![turn])
}
