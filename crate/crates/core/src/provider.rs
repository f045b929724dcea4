//! Structured-completion interface shared by every model role.
//!
//! A [`Provider`] turns a [`StructuredRequest`] into raw JSON.
//! [`complete_structured`] guards the context limit, parses the JSON into the
//! requested schema type, and re-asks with the validation error appended when
//! the output does not fit. [`MockProvider`] plays back a fixed script and
//! records every request it receives.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const DEFAULT_SCHEMA_RETRIES: usize = 2;
pub const DEFAULT_CONTEXT_LIMIT: usize = 128_000;

/// `ceil(bytes / 4)`.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemaId {
    GraphDiscovery,
    GraphUpdate,
    AgentAction,
    InvestigationBatch,
    HypothesisBatch,
    Critique,
    Verdict,
    MemoryNote,
}

impl fmt::Display for SchemaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Scout,
    Strategist,
    Finalizer,
    Graph,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    pub role: Role,
    pub context_limit: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_reasoning_effort: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesize_reasoning_effort: Option<String>,
}

impl ModelProfile {
    pub fn new(role: Role, name: impl Into<String>, context_limit: usize) -> ModelProfile {
        ModelProfile {
            name: name.into(),
            role,
            context_limit,
            plan_reasoning_effort: None,
            hypothesize_reasoning_effort: None,
        }
    }

    pub fn mock(role: Role) -> ModelProfile {
        ModelProfile::new(role, "mock", DEFAULT_CONTEXT_LIMIT)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ProfileEntry {
    name: String,
    #[serde(rename = "B")]
    context_limit: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    plan_reasoning_effort: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hypothesize_reasoning_effort: Option<String>,
}

/// Role-keyed profiles as stored in `models.json`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelsConfig {
    pub profiles: BTreeMap<Role, ModelProfile>,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        ModelsConfig {
            profiles: [Role::Scout, Role::Strategist, Role::Finalizer, Role::Graph]
                .into_iter()
                .map(|r| (r, ModelProfile::mock(r)))
                .collect(),
        }
    }
}

impl ModelsConfig {
    pub fn profile(&self, role: Role) -> ModelProfile {
        self.profiles
            .get(&role)
            .cloned()
            .unwrap_or_else(|| ModelProfile::mock(role))
    }

    pub fn from_json(text: &str) -> Result<ModelsConfig> {
        let raw: BTreeMap<Role, ProfileEntry> = serde_json::from_str(text)?;
        let mut cfg = ModelsConfig::default();
        for (role, e) in raw {
            if e.context_limit == 0 {
                return Err(Error::Validation(format!("profile {role:?} has B = 0")));
            }
            cfg.profiles.insert(
                role,
                ModelProfile {
                    name: e.name,
                    role,
                    context_limit: e.context_limit,
                    plan_reasoning_effort: e.plan_reasoning_effort,
                    hypothesize_reasoning_effort: e.hypothesize_reasoning_effort,
                },
            );
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        let raw: BTreeMap<Role, ProfileEntry> = self
            .profiles
            .iter()
            .map(|(r, p)| {
                (
                    *r,
                    ProfileEntry {
                        name: p.name.clone(),
                        context_limit: p.context_limit,
                        plan_reasoning_effort: p.plan_reasoning_effort.clone(),
                        hypothesize_reasoning_effort: p.hypothesize_reasoning_effort.clone(),
                    },
                )
            })
            .collect();
        Ok(serde_json::to_string_pretty(&raw)?)
    }

    /// Load `models.json`, falling back to mock profiles when absent.
    pub fn load(path: impl AsRef<Path>) -> Result<ModelsConfig> {
        let path = path.as_ref();
        match std::fs::read_to_string(path) {
            Ok(text) => ModelsConfig::from_json(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(ModelsConfig::default()),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSection {
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredRequest {
    pub schema_id: SchemaId,
    pub prompt_sections: Vec<PromptSection>,
    pub profile: ModelProfile,
}

impl StructuredRequest {
    pub fn new(schema_id: SchemaId, profile: ModelProfile) -> StructuredRequest {
        StructuredRequest {
            schema_id,
            prompt_sections: Vec::new(),
            profile,
        }
    }

    pub fn section(mut self, title: impl Into<String>, body: impl Into<String>) -> Self {
        self.prompt_sections.push(PromptSection {
            title: title.into(),
            body: body.into(),
        });
        self
    }

    pub fn render(&self) -> String {
        let mut out = format!("# Respond with a single JSON object of schema {}\n", self.schema_id);
        for s in &self.prompt_sections {
            out.push_str("\n## ");
            out.push_str(&s.title);
            out.push('\n');
            out.push_str(&s.body);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawResponse {
    pub value: Value,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredResponse<T> {
    pub value: T,
    pub usage: Usage,
    pub attempts: usize,
}

pub trait Provider: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, req: &StructuredRequest) -> Result<RawResponse>;
}

/// A response type bound to one schema id, with semantic checks beyond
/// what deserialization enforces.
pub trait Schema: DeserializeOwned {
    const ID: SchemaId;

    fn validate(&self) -> std::result::Result<(), String> {
        Ok(())
    }
}

/// Request `T` from `provider`, retrying malformed output up to `retries`
/// times with the validation error fed back as an extra prompt section.
pub fn complete_structured<T: Schema>(
    provider: &dyn Provider,
    req: &StructuredRequest,
    retries: usize,
) -> Result<StructuredResponse<T>> {
    complete_structured_with(provider, req, retries, |_: &T| Ok(()))
}

/// Like [`complete_structured`] with an extra caller-side check that
/// depends on call context (expected counts, target names).
pub fn complete_structured_with<T: Schema>(
    provider: &dyn Provider,
    req: &StructuredRequest,
    retries: usize,
    check: impl Fn(&T) -> std::result::Result<(), String>,
) -> Result<StructuredResponse<T>> {
    debug_assert_eq!(req.schema_id, T::ID);
    let estimated = estimate_tokens(&req.render());
    let limit = req.profile.context_limit;
    if estimated > limit {
        return Err(Error::ContextOverflow { estimated, limit });
    }
    if estimated * 10 > limit * 9 {
        tracing::warn!(schema = %T::ID, estimated, limit, "prompt close to context limit");
    }
    let mut current = req.clone();
    let mut last_reason = String::new();
    for attempt in 1..=retries + 1 {
        let raw = provider.complete(&current)?;
        tracing::info!(
            provider = provider.name(),
            schema = %T::ID,
            attempt,
            prompt_tokens = raw.usage.prompt_tokens,
            completion_tokens = raw.usage.completion_tokens,
            "structured completion"
        );
        let parsed = serde_json::from_value::<T>(raw.value)
            .map_err(|e| e.to_string())
            .and_then(|v| v.validate().and_then(|_| check(&v)).map(|_| v));
        match parsed {
            Ok(value) => {
                return Ok(StructuredResponse {
                    value,
                    usage: raw.usage,
                    attempts: attempt,
                })
            }
            Err(reason) => {
                last_reason = reason;
                current = current.section(
                    "Validation error in previous response",
                    format!("{last_reason}\nReturn a corrected {} object.", T::ID),
                );
            }
        }
    }
    Err(Error::ProviderSchema {
        schema: T::ID.to_string(),
        attempts: retries + 1,
        reason: last_reason,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub schema: SchemaId,
    pub response: Value,
}

/// Deterministic playback provider.
#[derive(Debug, Default)]
pub struct MockProvider {
    script: Mutex<VecDeque<ScriptEntry>>,
    log: Mutex<Vec<StructuredRequest>>,
}

impl MockProvider {
    pub fn new(script: impl IntoIterator<Item = (SchemaId, Value)>) -> MockProvider {
        MockProvider {
            script: Mutex::new(
                script
                    .into_iter()
                    .map(|(schema, response)| ScriptEntry { schema, response })
                    .collect(),
            ),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn from_entries(entries: Vec<ScriptEntry>) -> MockProvider {
        MockProvider::new(entries.into_iter().map(|e| (e.schema, e.response)))
    }

    /// One `{"schema": ..., "response": ...}` object per line.
    pub fn from_jsonl(text: &str) -> Result<MockProvider> {
        let mut entries = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            entries.push(serde_json::from_str::<ScriptEntry>(line)?);
        }
        Ok(MockProvider::from_entries(entries))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MockProvider> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        MockProvider::from_jsonl(&text)
    }

    pub fn push(&self, schema: SchemaId, response: Value) {
        self.script
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .push_back(ScriptEntry { schema, response });
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn replay_log(&self) -> Vec<StructuredRequest> {
        self.log.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn calls(&self) -> usize {
        self.log.lock().unwrap_or_else(|p| p.into_inner()).len()
    }
}

impl Provider for MockProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, req: &StructuredRequest) -> Result<RawResponse> {
        let mut script = self.script.lock().unwrap_or_else(|p| p.into_inner());
        self.log
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .push(req.clone());
        let next = script
            .front()
            .ok_or_else(|| Error::Transport(format!("mock script exhausted at {} request", req.schema_id)))?;
        if next.schema != req.schema_id {
            return Err(Error::ScriptMismatch {
                expected: next.schema.to_string(),
                requested: req.schema_id.to_string(),
            });
        }
        let entry = script.pop_front().expect("front checked");
        let completion = serde_json::to_string(&entry.response)?;
        Ok(RawResponse {
            usage: Usage {
                prompt_tokens: estimate_tokens(&req.render()),
                completion_tokens: estimate_tokens(&completion),
            },
            value: entry.response,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[derive(Debug, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Note {
        text: String,
    }

    impl Schema for Note {
        const ID: SchemaId = SchemaId::MemoryNote;
        fn validate(&self) -> std::result::Result<(), String> {
            if self.text.is_empty() {
                Err("text must be non-empty".into())
            } else {
                Ok(())
            }
        }
    }

    fn req() -> StructuredRequest {
        StructuredRequest::new(SchemaId::MemoryNote, ModelProfile::mock(Role::Scout)).section("history", "a, b, c")
    }

    #[test]
    fn token_estimate() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abcd"), 1);
        assert_eq!(estimate_tokens("abcdefghi"), 3);
    }

    #[test]
    fn valid_playback_verbatim() {
        let mock = MockProvider::new([(SchemaId::MemoryNote, json!({"text": "summary"}))]);
        let r: StructuredResponse<Note> = complete_structured(&mock, &req(), 2).unwrap();
        assert_eq!(r.value.text, "summary");
        assert_eq!(r.attempts, 1);
    }

    #[test]
    fn invalid_then_valid_retries_once() {
        let mock = MockProvider::new([
            (SchemaId::MemoryNote, json!({"text": ""})),
            (SchemaId::MemoryNote, json!({"text": "ok"})),
        ]);
        let r: StructuredResponse<Note> = complete_structured(&mock, &req(), 2).unwrap();
        assert_eq!(r.attempts, 2);
        let log = mock.replay_log();
        assert_eq!(log.len(), 2);
        assert!(log[1].render().contains("text must be non-empty"));
    }

    #[test]
    fn retries_exhausted() {
        let mock = MockProvider::new((0..3).map(|_| (SchemaId::MemoryNote, json!({"bogus": 1}))));
        let err = complete_structured::<Note>(&mock, &req(), 2).unwrap_err();
        assert!(matches!(err, Error::ProviderSchema { attempts: 3, .. }), "{err}");
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn overflow_before_any_call() {
        let mock = MockProvider::default();
        let mut r = req();
        r.profile.context_limit = 4;
        assert!(matches!(
            complete_structured::<Note>(&mock, &r, 2),
            Err(Error::ContextOverflow { .. })
        ));
        assert_eq!(mock.calls(), 0);
    }

    #[test]
    fn playback_contract() {
        let mock = MockProvider::new([
            (SchemaId::MemoryNote, json!({"text": "1"})),
            (SchemaId::MemoryNote, json!({"text": "2"})),
        ]);
        assert!(mock.complete(&req()).is_ok());
        assert!(mock.complete(&req()).is_ok());
        assert!(matches!(mock.complete(&req()), Err(Error::Transport(_))));
        assert_eq!(mock.replay_log().len(), 3);
    }

    #[test]
    fn mismatch_reported() {
        let mock = MockProvider::new([(SchemaId::Verdict, json!({}))]);
        let r = StructuredRequest::new(SchemaId::GraphUpdate, ModelProfile::mock(Role::Graph));
        assert!(matches!(mock.complete(&r), Err(Error::ScriptMismatch { .. })));
        assert_eq!(mock.remaining(), 1);
    }

    #[test]
    fn jsonl_and_models_config() {
        let mock = MockProvider::from_jsonl(
            "{\"schema\":\"MemoryNote\",\"response\":{\"text\":\"x\"}}\n\n{\"schema\":\"Verdict\",\"response\":{}}\n",
        )
        .unwrap();
        assert_eq!(mock.remaining(), 2);
        let cfg = ModelsConfig::from_json(
            r#"{"strategist": {"name": "big", "B": 200000, "plan_reasoning_effort": "high"}}"#,
        )
        .unwrap();
        let p = cfg.profile(Role::Strategist);
        assert_eq!(p.context_limit, 200_000);
        assert_eq!(p.plan_reasoning_effort.as_deref(), Some("high"));
        assert_eq!(cfg.profile(Role::Scout).name, "mock");
        assert_eq!(ModelsConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
        assert!(ModelsConfig::from_json(r#"{"scout": {"name": "x", "B": 0}}"#).is_err());
    }
}
