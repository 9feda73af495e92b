use std::fmt;
use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ChatTurn, PromptStage, Role};

pub const ENV_BASE_URL: &str = "PATHCOT_VLM_BASE_URL";
pub const ENV_API_KEY: &str = "PATHCOT_VLM_API_KEY";
pub const ENV_MODEL: &str = "PATHCOT_VLM_MODEL";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: TokenUsage,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EndpointError {
    /// Worth retrying: timeouts, rate limits, 5xx.
    #[error("transient endpoint failure: {0}")]
    Transient(String),
    #[error("endpoint failure: {0}")]
    Permanent(String),
}

/// A chat backbone. Implementations must be safe to call from several
/// threads at once.
pub trait ModelEndpoint: Send + Sync {
    fn send(&self, turns: &[ChatTurn]) -> Result<Completion, EndpointError>;

    fn model_name(&self) -> &str;
}

/// Unit prices in USD per million tokens. Images are billed as a fixed token
/// equivalent each, at the standard 1024x1024 crop size.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Pricing {
    pub input_per_mtok: f64,
    pub output_per_mtok: f64,
    pub image_token_equivalent: u64,
}

/// Accounting for one logical call (all retry attempts included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub stage: PromptStage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roi_index: Option<usize>,
    pub attempts: u32,
    pub input_tokens: u64,
    pub image_count: u64,
    pub image_tokens: u64,
    pub output_tokens: u64,
    pub cost_usd: f64,
}

pub fn account_call(
    stage: PromptStage,
    roi_index: Option<usize>,
    attempts: u32,
    turns: &[ChatTurn],
    usage: TokenUsage,
    pricing: &Pricing,
) -> CallRecord {
    let image_count: u64 = turns.iter().map(|t| t.images().len() as u64).sum();
    let image_tokens = image_count * pricing.image_token_equivalent;
    let cost_usd = ((usage.input_tokens + image_tokens) as f64 * pricing.input_per_mtok
        + usage.output_tokens as f64 * pricing.output_per_mtok)
        / 1e6;
    CallRecord {
        stage,
        roi_index,
        attempts,
        input_tokens: usage.input_tokens,
        image_count,
        image_tokens,
        output_tokens: usage.output_tokens,
        cost_usd,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubled for each further one.
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay_ms: 500 }
    }
}

/// Sends with exponential backoff on transient failures. Returns the
/// completion and the number of attempts used.
pub fn send_with_retry(
    endpoint: &dyn ModelEndpoint,
    turns: &[ChatTurn],
    policy: &RetryPolicy,
) -> Result<(Completion, u32), EndpointError> {
    let max = policy.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        match endpoint.send(turns) {
            Ok(c) => return Ok((c, attempt)),
            Err(EndpointError::Transient(msg)) if attempt < max => {
                tracing::warn!(attempt, error = %msg, "transient endpoint failure, retrying");
                let delay = policy.base_delay_ms.saturating_mul(1 << (attempt - 1).min(16));
                if delay > 0 {
                    std::thread::sleep(Duration::from_millis(delay));
                }
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

fn word_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Region number announced in an ROI prompt ("Region 3.").
fn region_number(text: &str) -> Option<usize> {
    let rest = &text[text.find("Region ")? + "Region ".len()..];
    let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

/// Deterministic endpoint answering by prompt stage. The ROI answer may use
/// `{region}`, replaced by the region number of the prompt. Token usage is
/// whitespace word counts of the request and the answer.
#[derive(Debug, Default)]
pub struct ScriptedEndpoint {
    model: String,
    responses: Vec<(PromptStage, String)>,
    failing_regions: Vec<usize>,
    transient_failures: AtomicU32,
    calls: AtomicUsize,
}

impl ScriptedEndpoint {
    pub fn new(model: impl Into<String>) -> Self {
        Self { model: model.into(), ..Default::default() }
    }

    pub fn respond(mut self, stage: PromptStage, text: impl Into<String>) -> Self {
        self.responses.retain(|(s, _)| *s != stage);
        self.responses.push((stage, text.into()));
        self
    }

    /// ROI prompts for these one-based region numbers fail permanently.
    pub fn fail_regions(mut self, regions: impl IntoIterator<Item = usize>) -> Self {
        self.failing_regions.extend(regions);
        self
    }

    /// The next `n` calls fail with a transient error.
    pub fn fail_transiently(self, n: u32) -> Self {
        self.transient_failures.store(n, Ordering::SeqCst);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ModelEndpoint for ScriptedEndpoint {
    fn send(&self, turns: &[ChatTurn]) -> Result<Completion, EndpointError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let pending = self
            .transient_failures
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1));
        if pending.is_ok() {
            return Err(EndpointError::Transient("scripted transient failure".into()));
        }
        let last = turns
            .iter()
            .rev()
            .find(|t| t.role() == Role::User)
            .ok_or_else(|| EndpointError::Permanent("no user turn".into()))?;
        let stage = PromptStage::detect(last.text())
            .ok_or_else(|| EndpointError::Permanent("unrecognized prompt".into()))?;
        let region = region_number(last.text());
        if stage == PromptStage::RoiAnalysis && region.is_some_and(|r| self.failing_regions.contains(&r)) {
            return Err(EndpointError::Permanent(format!("scripted failure for region {}", region.unwrap_or(0))));
        }
        let template = self
            .responses
            .iter()
            .find(|(s, _)| *s == stage)
            .map(|(_, t)| t.as_str())
            .ok_or_else(|| EndpointError::Permanent(format!("no scripted response for {stage:?}")))?;
        let text = match region {
            Some(r) if stage == PromptStage::RoiAnalysis => template.replace("{region}", &r.to_string()),
            _ => template.to_string(),
        };
        let usage = TokenUsage {
            input_tokens: turns.iter().map(|t| word_count(t.text())).sum(),
            output_tokens: word_count(&text),
        };
        Ok(Completion { text, usage })
    }

    fn model_name(&self) -> &str {
        &self.model
    }
}

/// Connection settings for a hosted backbone, read from the environment.
/// The key is never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct EndpointSettings {
    pub base_url: String,
    pub api_key: String,
    pub model: String,
}

impl fmt::Debug for EndpointSettings {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EndpointSettings")
            .field("base_url", &self.base_url)
            .field("api_key", &"<redacted>")
            .field("model", &self.model)
            .finish()
    }
}

impl EndpointSettings {
    /// `Err` names the first unset variable.
    pub fn from_env() -> Result<Self, &'static str> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, &'static str> {
        let read = |name: &'static str| get(name).filter(|v| !v.is_empty()).ok_or(name);
        Ok(Self { base_url: read(ENV_BASE_URL)?, api_key: read(ENV_API_KEY)?, model: read(ENV_MODEL)? })
    }
}
