//! Prompting and response parsing for vision-language model calls.
//!
//! The gateway knows the four prompt stages, how to render them into chat
//! turns, how to parse the tagged answers that come back, and how to talk to
//! a backbone through the [`ModelEndpoint`] contract. Vendor adapters live
//! outside this crate.

mod endpoint;
mod parse;
mod prompt;

use serde::{Deserialize, Serialize};

use crate::images::ImageRef;

pub use endpoint::{
    account_call, send_with_retry, CallRecord, Completion, EndpointError, EndpointSettings,
    ModelEndpoint, Pricing, RetryPolicy, ScriptedEndpoint, TokenUsage, ENV_API_KEY,
    ENV_BASE_URL, ENV_MODEL,
};
pub use parse::{
    parse_diagnostic_info, parse_multilabel, parse_tagged, wrap_tagged, DiagnosticInfo,
    MultilabelResult, ParseError, SectionType, Taxonomy, UnknownLabel, View,
};
pub use prompt::{build_prompt, render_template, PromptContext, PromptError, CRC_LN_TASK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStage {
    Overview,
    RoiAnalysis,
    FinalSummary,
    MultilabelClassify,
}

impl PromptStage {
    pub const ALL: [PromptStage; 4] = [
        PromptStage::Overview,
        PromptStage::RoiAnalysis,
        PromptStage::FinalSummary,
        PromptStage::MultilabelClassify,
    ];

    /// A phrase every rendered prompt of this stage contains.
    pub fn anchor(self) -> &'static str {
        match self {
            PromptStage::Overview => "What is your initial impression of the overall image?",
            PromptStage::RoiAnalysis => "What is your impression on this region?",
            PromptStage::FinalSummary => "Please provide a comprehensive final pathological impression",
            PromptStage::MultilabelClassify => "This is a MULTI-LABEL classification",
        }
    }

    /// Recognizes the stage of a rendered prompt by its anchor phrase.
    pub fn detect(text: &str) -> Option<PromptStage> {
        Self::ALL.into_iter().find(|s| text.contains(s.anchor()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Model,
}

/// One chat message. Only user turns carry images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTurn")]
pub struct ChatTurn {
    role: Role,
    text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    images: Vec<ImageRef>,
}

#[derive(Deserialize)]
struct RawTurn {
    role: Role,
    text: String,
    #[serde(default)]
    images: Vec<ImageRef>,
}

impl TryFrom<RawTurn> for ChatTurn {
    type Error = String;

    fn try_from(raw: RawTurn) -> Result<Self, Self::Error> {
        if raw.role != Role::User && !raw.images.is_empty() {
            return Err(format!("{:?} turn cannot carry images", raw.role));
        }
        Ok(ChatTurn { role: raw.role, text: raw.text, images: raw.images })
    }
}

impl ChatTurn {
    pub fn system(text: impl Into<String>) -> Self {
        Self { role: Role::System, text: text.into(), images: Vec::new() }
    }

    pub fn user(text: impl Into<String>, images: Vec<ImageRef>) -> Self {
        Self { role: Role::User, text: text.into(), images }
    }

    pub fn model(text: impl Into<String>) -> Self {
        Self { role: Role::Model, text: text.into(), images: Vec::new() }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn images(&self) -> &[ImageRef] {
        &self.images
    }
}
