use std::collections::HashMap;
use std::path::Path;

use oosq_core::{ChatRequest, GatewayError};
use serde::{Deserialize, Serialize};

use super::cache::cache_key;
use super::{Backend, BackendFailure};
use crate::datastore::{read_records, Schema, StoreError, Violation};
use oosq_core::gateway::BackendKind;

/// One scripted completion. A fixture matches either by the full request
/// (`user_text` set) or, when prefix fallback is on, by `user_prefix`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockFixture {
    pub model_id: String,
    pub system_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_prefix: Option<String>,
    pub temperature: f64,
    pub sample_index: u32,
    pub response: String,
}

impl MockFixture {
    pub fn exact(req: &ChatRequest, response: &str) -> Self {
        MockFixture {
            model_id: req.model_id.clone(),
            system_text: req.system_text.clone(),
            user_text: Some(req.user_text.clone()),
            user_prefix: None,
            temperature: req.temperature,
            sample_index: req.sample_index,
            response: response.into(),
        }
    }

    fn request(&self) -> Option<ChatRequest> {
        let user = self.user_text.clone()?;
        Some(ChatRequest::new(&self.model_id, self.system_text.clone(), user).with_sample(self.temperature, self.sample_index))
    }
}

impl Schema for MockFixture {
    fn validate(&self) -> Result<(), Violation> {
        if self.user_text.is_some() == self.user_prefix.is_some() {
            return Err(Violation::new("user_text", "exactly one of user_text and user_prefix must be set"));
        }
        if self.response.is_empty() {
            return Err(Violation::new("response", "is empty"));
        }
        Ok(())
    }
}

/// Read-only fixture table.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    exact: HashMap<String, String>,
    prefixes: Vec<MockFixture>,
    prefix_fallback: bool,
}

impl MockBackend {
    pub fn from_fixtures(fixtures: Vec<MockFixture>, prefix_fallback: bool) -> Self {
        let mut backend = MockBackend { prefix_fallback, ..Default::default() };
        for f in fixtures {
            match f.request() {
                Some(req) => {
                    backend.exact.insert(cache_key(&req), f.response);
                }
                None => backend.prefixes.push(f),
            }
        }
        // longest prefix first
        backend.prefixes.sort_by_key(|f| std::cmp::Reverse(f.user_prefix.as_ref().map_or(0, String::len)));
        backend
    }

    pub fn load(path: &Path, prefix_fallback: bool) -> Result<Self, StoreError> {
        Ok(Self::from_fixtures(read_records::<MockFixture>(path)?.records, prefix_fallback))
    }

    pub fn len(&self) -> usize {
        self.exact.len() + self.prefixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lookup(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let key = cache_key(req);
        if let Some(text) = self.exact.get(&key) {
            return Ok(text.clone());
        }
        if self.prefix_fallback {
            let hit = self.prefixes.iter().find(|f| {
                f.model_id == req.model_id
                    && f.system_text == req.system_text
                    && f.sample_index == req.sample_index
                    && f.temperature == req.temperature
                    && f.user_prefix.as_deref().is_some_and(|p| req.user_text.starts_with(p))
            });
            if let Some(f) = hit {
                log::warn!("mock fixture matched by prefix for key {key}");
                return Ok(f.response.clone());
            }
        }
        Err(GatewayError::MockMiss { key })
    }
}

impl Backend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn call(&self, req: &ChatRequest) -> Result<String, BackendFailure> {
        self.lookup(req).map_err(BackendFailure::Fatal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_and_prefix_lookup() {
        let req = ChatRequest::new("m", "s".into(), "hello world".into());
        let mut prefix = MockFixture::exact(&req, "by prefix");
        prefix.user_text = None;
        prefix.user_prefix = Some("hello".into());
        let strict = MockBackend::from_fixtures(vec![MockFixture::exact(&req, "exact"), prefix.clone()], false);
        assert_eq!(strict.lookup(&req).unwrap(), "exact");
        let other = ChatRequest::new("m", "s".into(), "hello there".into());
        assert!(matches!(strict.lookup(&other), Err(GatewayError::MockMiss { .. })));
        let loose = MockBackend::from_fixtures(vec![prefix], true);
        assert_eq!(loose.lookup(&other).unwrap(), "by prefix");
        assert!(loose.lookup(&other.clone().with_sample(0.0, 1)).is_err());
    }

    #[test]
    fn fixture_validation() {
        let req = ChatRequest::new("m", "s".into(), "u".into());
        let mut f = MockFixture::exact(&req, "r");
        assert!(f.validate().is_ok());
        f.user_prefix = Some("u".into());
        assert!(f.validate().is_err());
    }
}
