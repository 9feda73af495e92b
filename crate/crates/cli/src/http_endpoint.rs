//! Adapter for chat-completions style HTTP backbones.
//!
//! Connection settings come from the environment (see
//! [`EndpointSettings`]); the key goes into the request header only and
//! never into logs or error messages.

use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use base64::Engine;
use pathcot::gateway::{ChatTurn, Completion, EndpointError, EndpointSettings, ModelEndpoint, Role, TokenUsage};
use serde_json::{json, Value};

pub struct HttpEndpoint {
    settings: EndpointSettings,
    agent: ureq::Agent,
    image_root: PathBuf,
    max_tokens: Option<u32>,
}

impl HttpEndpoint {
    pub fn new(settings: EndpointSettings, image_root: PathBuf, timeout: Duration, max_tokens: Option<u32>) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self { settings, agent, image_root, max_tokens }
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.settings.base_url.trim_end_matches('/'))
    }

    fn message(&self, turn: &ChatTurn) -> Result<Value, EndpointError> {
        let role = match turn.role() {
            Role::System => "system",
            Role::User => "user",
            Role::Model => "assistant",
        };
        if turn.images().is_empty() {
            return Ok(json!({ "role": role, "content": turn.text() }));
        }
        let mut content = vec![json!({ "type": "text", "text": turn.text() })];
        for image in turn.images() {
            let path = self.image_root.join(&image.path);
            let bytes = fs::read(&path)
                .map_err(|e| EndpointError::Permanent(format!("{}: {e}", path.display())))?;
            let data = base64::engine::general_purpose::STANDARD.encode(bytes);
            content.push(json!({ "type": "image_url", "image_url": { "url": format!("data:image/png;base64,{data}") } }));
        }
        Ok(json!({ "role": role, "content": content }))
    }
}

fn parse_reply(body: &Value) -> Result<Completion, EndpointError> {
    let text = body["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| EndpointError::Permanent("reply has no message content".into()))?;
    let usage = TokenUsage {
        input_tokens: body["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
        output_tokens: body["usage"]["completion_tokens"].as_u64().unwrap_or(0),
    };
    Ok(Completion { text: text.to_string(), usage })
}

impl ModelEndpoint for HttpEndpoint {
    fn send(&self, turns: &[ChatTurn]) -> Result<Completion, EndpointError> {
        let messages = turns.iter().map(|t| self.message(t)).collect::<Result<Vec<_>, _>>()?;
        let mut body = json!({ "model": self.settings.model, "messages": messages });
        if let Some(n) = self.max_tokens {
            body["max_tokens"] = json!(n);
        }
        let reply = self
            .agent
            .post(&self.url())
            .set("Authorization", &format!("Bearer {}", self.settings.api_key))
            .send_json(body);
        match reply {
            Ok(resp) => {
                let value: Value = resp
                    .into_json()
                    .map_err(|e| EndpointError::Transient(format!("reading reply: {e}")))?;
                parse_reply(&value)
            }
            Err(ureq::Error::Status(code, _)) if code == 429 || code >= 500 => {
                Err(EndpointError::Transient(format!("HTTP {code}")))
            }
            Err(ureq::Error::Status(code, _)) => Err(EndpointError::Permanent(format!("HTTP {code}"))),
            Err(ureq::Error::Transport(t)) => Err(EndpointError::Transient(t.kind().to_string())),
        }
    }

    fn model_name(&self) -> &str {
        &self.settings.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reply_parsing() {
        let ok = json!({"choices":[{"message":{"content":"hi"}}],"usage":{"prompt_tokens":7,"completion_tokens":1}});
        let c = parse_reply(&ok).unwrap();
        assert_eq!((c.text.as_str(), c.usage.input_tokens, c.usage.output_tokens), ("hi", 7, 1));
        assert!(parse_reply(&json!({"choices":[]})).is_err());
    }
}
