//! Pluggable semantic backend: a deterministic rule-table mock (default)
//! and an HTTP client for a chat-completion endpoint. Serves label
//! generation and constraint entity extraction.

use std::collections::BTreeMap;
use std::time::Duration;

use regex::Regex;
use serde::Deserialize;
use serde_json::json;
use thiserror::Error;

use crate::env::EntityRegistry;
use crate::skills::SemanticLabel;
use crate::symbolic::SymbolicState;

pub const MOCK_RULES: &str = include_str!("../data/mock_annotator.json");
pub const LABEL_PROMPT_TEMPLATE: &str = include_str!("../data/prompts/label_transition.txt");
pub const EXTRACT_PROMPT_TEMPLATE: &str = include_str!("../data/prompts/extract_entities.txt");

pub const API_KEY_ENV: &str = "SOARL_API_KEY";

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum RequestKind {
    LabelTransition,
    ExtractEntities,
}

#[derive(Clone, Debug)]
pub struct AnnotatorRequest {
    pub kind: RequestKind,
    pub prompt: String,
    /// (world id, episode)
    pub metadata: (String, u64),
}

impl AnnotatorRequest {
    pub fn new(kind: RequestKind, prompt: String, world: &str, episode: u64) -> Self {
        assert!(!prompt.is_empty(), "prompt must be non-empty");
        AnnotatorRequest { kind, prompt, metadata: (world.to_string(), episode) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Parsed {
    Label(SemanticLabel),
    Entities(Vec<String>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatorResponse {
    pub raw: String,
    /// Present iff `raw` matched the response grammar for the request kind.
    pub parsed: Option<Parsed>,
}

#[derive(Error, Debug)]
pub enum AnnotatorError {
    #[error("annotator request timed out")]
    Timeout,
    #[error("annotator http error: {0}")]
    Http(String),
    #[error("annotator response did not match the expected grammar: `{raw}`")]
    ParseFailure { raw: String },
    #[error("annotator backend unavailable")]
    Unavailable,
}

pub trait AnnotatorBackend {
    fn complete(&self, request: &AnnotatorRequest) -> Result<AnnotatorResponse, AnnotatorError>;
}

/// Substitutes `{{key}}` placeholders.
pub fn render_template(template: &str, bindings: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in bindings {
        out = out.replace(&format!("{{{{{key}}}}}"), value);
    }
    out
}

/// Extracts the first balanced `predicate(arg, ...)` match, stripping any
/// surrounding prose, and canonicalizes case and whitespace.
pub fn parse_label(raw: &str) -> Result<SemanticLabel, AnnotatorError> {
    let re = Regex::new(r"([A-Za-z_][A-Za-z0-9_]*)\s*\(([^()]*)\)").unwrap();
    let caps = re
        .captures(raw)
        .ok_or_else(|| AnnotatorError::ParseFailure { raw: raw.to_string() })?;
    let predicate = caps[1].to_string();
    let args: Vec<String> = if caps[2].trim().is_empty() {
        Vec::new()
    } else {
        caps[2].split(',').map(|a| a.trim().to_string()).collect()
    };
    if args.iter().any(|a| a.is_empty() || a.chars().any(char::is_whitespace)) {
        return Err(AnnotatorError::ParseFailure { raw: raw.to_string() });
    }
    Ok(SemanticLabel::new(&predicate, &args.iter().map(String::as_str).collect::<Vec<_>>()))
}

fn fold_plural<'a>(word: &'a str, known: impl Fn(&str) -> bool) -> Option<String> {
    if known(word) {
        return Some(word.to_string());
    }
    if let Some(stem) = word.strip_suffix("es") {
        if known(stem) {
            return Some(stem.to_string());
        }
    }
    if let Some(stem) = word.strip_suffix('s') {
        if known(stem) {
            return Some(stem.to_string());
        }
    }
    None
}

/// Keeps the candidate nouns that name registered entities (case-insensitive,
/// singular/plural folded); unknown candidates are dropped with a warning.
pub fn parse_entities(raw: &str, registry: &EntityRegistry) -> Vec<String> {
    let mut out = Vec::new();
    for token in raw.split(|c: char| !c.is_alphanumeric()) {
        if token.is_empty() {
            continue;
        }
        let word = token.to_lowercase();
        match fold_plural(&word, |w| registry.contains(w)) {
            Some(name) => {
                if !out.contains(&name) {
                    out.push(name);
                }
            }
            None => log::warn!("dropping unknown entity candidate `{word}`"),
        }
    }
    out
}

#[derive(Deserialize)]
struct MockRules {
    version: u32,
    labels: BTreeMap<String, String>,
    entities: BTreeMap<String, String>,
}

/// Deterministic rule-table backend: a pure function of the request.
pub struct MockBackend {
    rules: MockRules,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl MockBackend {
    pub fn new() -> Self {
        let rules: MockRules = serde_json::from_str(MOCK_RULES).expect("bundled rule table parses");
        assert_eq!(rules.version, 1);
        MockBackend { rules }
    }

    fn parse_state_line(prompt: &str, prefix: &str) -> Option<Vec<String>> {
        let line = prompt.lines().find(|l| l.starts_with(prefix))?;
        let body = line[prefix.len()..].trim();
        let inner = body.strip_prefix('{')?.strip_suffix('}')?;
        if inner.trim().is_empty() {
            return Some(Vec::new());
        }
        Some(inner.split(',').map(|p| p.trim().to_lowercase()).collect())
    }

    /// Diff signature: added props prefixed `+`, removed prefixed `-`,
    /// lowercase, sorted, comma-joined. Transitions differing only in
    /// propositions outside the diff share a signature, which is what makes
    /// orthogonal-state variants of the same skill map to the same label.
    fn diff_signature(before: &[String], after: &[String]) -> String {
        let mut parts: Vec<String> = after
            .iter()
            .filter(|p| !before.contains(p))
            .map(|p| format!("+{p}"))
            .chain(before.iter().filter(|p| !after.contains(p)).map(|p| format!("-{p}")))
            .collect();
        parts.sort();
        parts.join(",")
    }
}

impl AnnotatorBackend for MockBackend {
    fn complete(&self, request: &AnnotatorRequest) -> Result<AnnotatorResponse, AnnotatorError> {
        match request.kind {
            RequestKind::LabelTransition => {
                let before = Self::parse_state_line(&request.prompt, "Current state:")
                    .ok_or(AnnotatorError::Unavailable)?;
                let after = Self::parse_state_line(&request.prompt, "Goal state:")
                    .ok_or(AnnotatorError::Unavailable)?;
                let sig = Self::diff_signature(&before, &after);
                match self.rules.labels.get(&sig) {
                    Some(text) => {
                        let label = parse_label(text)?;
                        Ok(AnnotatorResponse { raw: text.clone(), parsed: Some(Parsed::Label(label)) })
                    }
                    // unknown transition: the mock produces no usable label,
                    // exercising the caller's fallback path
                    None => Ok(AnnotatorResponse {
                        raw: format!("no label rule for transition {sig}"),
                        parsed: None,
                    }),
                }
            }
            RequestKind::ExtractEntities => {
                let line = request
                    .prompt
                    .lines()
                    .find(|l| l.starts_with("Instruction:"))
                    .map(|l| l["Instruction:".len()..].trim().to_string())
                    .unwrap_or_default();
                let mut found: Vec<String> = Vec::new();
                for token in line.split(|c: char| !c.is_alphanumeric()) {
                    if token.is_empty() {
                        continue;
                    }
                    if let Some(entity) = self.rules.entities.get(&token.to_lowercase()) {
                        if !found.contains(entity) {
                            found.push(entity.clone());
                        }
                    }
                }
                let raw = found.join(", ");
                Ok(AnnotatorResponse { raw, parsed: Some(Parsed::Entities(found)) })
            }
        }
    }
}

/// Minimal chat-completion HTTP client; opt-in via configuration.
pub struct HttpBackend {
    pub endpoint: String,
    pub model: String,
    pub timeout: Duration,
    pub max_retries: u32,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(endpoint: &str, model: &str, timeout: Duration, max_retries: u32) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("http client builds");
        HttpBackend {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            timeout,
            max_retries,
            client,
        }
    }

    fn request_once(&self, prompt: &str) -> Result<String, AnnotatorError> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() {
                AnnotatorError::Timeout
            } else {
                AnnotatorError::Http(e.to_string())
            }
        })?;
        if !resp.status().is_success() {
            return Err(AnnotatorError::Http(format!("status {}", resp.status())));
        }
        let value: serde_json::Value =
            resp.json().map_err(|e| AnnotatorError::Http(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| AnnotatorError::Http("missing choices[0].message.content".into()))
    }
}

impl AnnotatorBackend for HttpBackend {
    fn complete(&self, request: &AnnotatorRequest) -> Result<AnnotatorResponse, AnnotatorError> {
        let mut last_err = AnnotatorError::Unavailable;
        for _ in 0..=self.max_retries {
            match self.request_once(&request.prompt) {
                Ok(raw) => {
                    let parsed = match request.kind {
                        RequestKind::LabelTransition => {
                            parse_label(&raw).ok().map(Parsed::Label)
                        }
                        RequestKind::ExtractEntities => Some(Parsed::Entities(
                            raw.split(',')
                                .map(|t| t.trim().to_lowercase())
                                .filter(|t| !t.is_empty())
                                .collect(),
                        )),
                    };
                    return Ok(AnnotatorResponse { raw, parsed });
                }
                Err(e) => last_err = e,
            }
        }
        Err(last_err)
    }
}

/// Test/diagnostic wrapper: deterministically fails a fraction of label
/// requests with a `ParseFailure`, leaving extraction untouched.
pub struct FailureInjectingBackend<B> {
    inner: B,
    /// Failure rate in percent (0..=100).
    rate_percent: u8,
}

impl<B: AnnotatorBackend> FailureInjectingBackend<B> {
    pub fn new(inner: B, rate_percent: u8) -> Self {
        FailureInjectingBackend { inner, rate_percent }
    }
}

/// FNV-1a over the prompt bytes: the failure decision is a pure function of
/// the request, so retrying the same request fails the same way.
fn prompt_bucket(prompt: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for byte in prompt.bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash % 100
}

impl<B: AnnotatorBackend> AnnotatorBackend for FailureInjectingBackend<B> {
    fn complete(&self, request: &AnnotatorRequest) -> Result<AnnotatorResponse, AnnotatorError> {
        if request.kind == RequestKind::LabelTransition
            && prompt_bucket(&request.prompt) < self.rate_percent as u64
        {
            return Ok(AnnotatorResponse { raw: "injected malformed output".into(), parsed: None });
        }
        self.inner.complete(request)
    }
}

/// Renders the label-generation prompt for a symbolic transition.
pub fn label_prompt(
    domain_info: &str,
    before: &SymbolicState,
    after: &SymbolicState,
    last_label: Option<&SemanticLabel>,
) -> String {
    render_template(
        LABEL_PROMPT_TEMPLATE,
        &[
            ("domain_info", domain_info),
            ("state_before", &before.to_string()),
            ("state_after", &after.to_string()),
            (
                "last_label",
                &last_label.map(|l| l.to_string()).unwrap_or_else(|| "none".into()),
            ),
        ],
    )
}

/// Renders the entity-extraction prompt for a constraint sentence.
pub fn extract_prompt(registry: &EntityRegistry, constraint: &str) -> String {
    let known: Vec<&str> = registry.names().collect();
    render_template(
        EXTRACT_PROMPT_TEMPLATE,
        &[("domain_info", &known.join(", ") as &str), ("constraint", constraint)],
    )
}
