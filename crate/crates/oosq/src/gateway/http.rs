use std::time::Duration;

use oosq_core::gateway::BackendKind;
use oosq_core::{ChatRequest, GatewayError};
use serde::{Deserialize, Serialize};

use super::{Backend, BackendFailure};

/// Chat-completions client speaking the common `messages` schema.
pub struct HttpBackend {
    endpoint: String,
    api_key_env: String,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct Body<'a> {
    model: &'a str,
    messages: Vec<Message<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct Reply {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

impl HttpBackend {
    /// `base_url` is the API root; `/chat/completions` is appended.
    pub fn new(base_url: &str, api_key_env: &str, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        HttpBackend {
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key_env: api_key_env.into(),
            agent: ureq::Agent::new_with_config(config),
        }
    }

    fn body(req: &ChatRequest) -> String {
        let mut messages = Vec::with_capacity(2);
        if !req.system_text.is_empty() {
            messages.push(Message { role: "system", content: &req.system_text });
        }
        messages.push(Message { role: "user", content: &req.user_text });
        serde_json::to_string(&Body {
            model: &req.model_id,
            messages,
            temperature: req.temperature,
            max_tokens: req.max_tokens,
        })
        .expect("request body serializes")
    }
}

/// 429 and 5xx are worth retrying; other failures are final.
pub fn is_transient_status(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

impl Backend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Live
    }

    fn call(&self, req: &ChatRequest) -> Result<String, BackendFailure> {
        let key = std::env::var(&self.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| BackendFailure::Fatal(GatewayError::AuthMissing { variable: self.api_key_env.clone() }))?;
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", format!("Bearer {key}"))
            .header("Content-Type", "application/json")
            .send(Self::body(req))
            .map_err(|e| BackendFailure::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| BackendFailure::Transient(e.to_string()))?;
        if is_transient_status(status) {
            return Err(BackendFailure::Transient(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            let snippet: String = text.chars().take(200).collect();
            return Err(BackendFailure::Fatal(GatewayError::Rejected(format!("HTTP {status}: {snippet}"))));
        }
        let reply: Reply = serde_json::from_str(&text)
            .map_err(|e| BackendFailure::Fatal(GatewayError::Rejected(format!("malformed reply: {e}"))))?;
        Ok(reply.choices.into_iter().next().and_then(|c| c.message.content).unwrap_or_default())
    }
}
