//! Prompt construction, answering backends and label decoding.
//!
//! Two backends answer a prompt. [`Backend::Mock`] ignores the text and
//! takes a similarity-weighted vote over the in-context examples, which makes
//! whole pipelines testable offline. [`Backend::Http`] sends the prompt to an
//! OpenAI-compatible completions endpoint and decodes the generated text by
//! verbalizer match.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::LabelSpace;
use crate::error::{Error, Result};
use crate::retrieval::{Neighbor, RankedSet};

/// Offset added to distances in the mock vote weight `1 / (offset + d)`.
pub const MOCK_DISTANCE_OFFSET: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IceOrder {
    /// Farthest first, so the nearest example sits next to the query.
    #[default]
    DescendingDistance,
    AscendingDistance,
}

impl IceOrder {
    /// Arrange a ranked set (ascending by distance) in prompt order.
    pub fn arrange(self, ranked: &RankedSet) -> Vec<Neighbor> {
        let mut v = ranked.entries().to_vec();
        if self == IceOrder::DescendingDistance {
            v.reverse();
        }
        v
    }
}

/// How a prompt is assembled from examples and a query.
///
/// `example_format` must contain `{text}` and `{label}` exactly once each,
/// `query_format` must contain `{text}` exactly once, and `instruction` may
/// contain `{labels}` (the comma-separated verbalizers) at most once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    #[serde(default)]
    pub instruction: String,
    pub example_format: String,
    pub query_format: String,
    #[serde(default = "default_joiner")]
    pub joiner: String,
    #[serde(default)]
    pub ice_order: IceOrder,
}

fn default_joiner() -> String {
    "\n".into()
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            instruction: String::new(),
            example_format: "Input: {text}\nOutput: {label}\n".into(),
            query_format: "Input: {text}\nOutput:".into(),
            joiner: default_joiner(),
            ice_order: IceOrder::default(),
        }
    }
}

const PLACEHOLDERS: [&str; 3] = ["{text}", "{label}", "{labels}"];

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        let check = |field: &str, s: &str, required: &[&str]| -> Result<()> {
            for p in PLACEHOLDERS {
                let n = count_placeholder(s, p);
                let want = usize::from(required.contains(&p));
                let ok = if field == "instruction" && p == "{labels}" { n <= 1 } else { n == want };
                if !ok {
                    return Err(Error::InvalidSpec(format!(
                        "prompt template {field}: placeholder {p} appears {n} times"
                    )));
                }
            }
            Ok(())
        };
        check("instruction", &self.instruction, &[])?;
        check("example_format", &self.example_format, &["{text}", "{label}"])?;
        check("query_format", &self.query_format, &["{text}"])
    }
}

fn count_placeholder(s: &str, p: &str) -> usize {
    tokens(s).filter(|t| *t == Token::Slot(p)).count()
}

#[derive(Debug, PartialEq, Eq)]
enum Token<'a> {
    Lit(&'a str),
    Slot(&'a str),
}

/// Split a format string into literal runs and placeholders.
fn tokens(s: &str) -> impl Iterator<Item = Token<'_>> {
    let mut rest = s;
    std::iter::from_fn(move || {
        if rest.is_empty() {
            return None;
        }
        let next = PLACEHOLDERS
            .iter()
            .filter_map(|p| rest.find(p).map(|i| (i, *p)))
            .min_by_key(|(i, p)| (*i, std::cmp::Reverse(p.len())));
        match next {
            Some((0, p)) => {
                rest = &rest[p.len()..];
                Some(Token::Slot(p))
            }
            Some((i, _)) => {
                let lit = &rest[..i];
                rest = &rest[i..];
                Some(Token::Lit(lit))
            }
            None => {
                let lit = rest;
                rest = "";
                Some(Token::Lit(lit))
            }
        }
    })
}

/// Substitute placeholders in one pass, so values are never re-expanded.
fn render(fmt: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(fmt.len());
    for t in tokens(fmt) {
        match t {
            Token::Lit(s) => out.push_str(s),
            Token::Slot(p) => match values.iter().find(|(k, _)| *k == p) {
                Some((_, v)) => out.push_str(v),
                None => out.push_str(p),
            },
        }
    }
    out
}

/// Render `(text, label)` examples, in the order given, followed by the query.
pub fn build_prompt(
    ices: &[(&str, usize)],
    query_text: &str,
    template: &PromptTemplate,
    labels: &LabelSpace,
) -> Result<String> {
    template.validate()?;
    let label_list = labels.verbalizers().join(", ");
    let mut parts = Vec::with_capacity(ices.len() + 2);
    if !template.instruction.is_empty() {
        parts.push(render(&template.instruction, &[("{labels}", &label_list)]));
    }
    for (text, label) in ices {
        let verbalizer = labels.verbalizer(*label).ok_or_else(|| {
            Error::Validation(format!("example label {label} outside {} labels", labels.count()))
        })?;
        parts.push(render(
            &template.example_format,
            &[("{text}", text), ("{label}", verbalizer)],
        ));
    }
    parts.push(render(&template.query_format, &[("{text}", query_text)]));
    Ok(parts.join(&template.joiner))
}

/// Similarity-weighted vote over `(label, distance)` pairs.
///
/// Each example contributes `1 / (1e-6 + distance)` to its label; the heaviest
/// label wins, ties go to the lowest label, and no examples means label 0.
pub fn answer_mock(ices: &[(usize, f64)], num_labels: usize) -> usize {
    let width = ices.iter().map(|(l, _)| l + 1).max().unwrap_or(0).max(num_labels);
    let mut weight = vec![0.0f64; width];
    for (label, d) in ices {
        weight[*label] += 1.0 / (MOCK_DISTANCE_OFFSET + d);
    }
    let mut best = 0;
    for (l, w) in weight.iter().enumerate() {
        if *w > weight[best] {
            best = l;
        }
    }
    best
}

/// Label whose verbalizer occurs first in `completion`, case-insensitively.
/// At equal positions the longer verbalizer wins.
pub fn decode_label(completion: &str, labels: &LabelSpace) -> Option<usize> {
    let hay = completion.to_lowercase();
    labels
        .verbalizers()
        .iter()
        .enumerate()
        .filter_map(|(i, v)| {
            let needle = v.to_lowercase();
            if needle.is_empty() {
                return None;
            }
            hay.find(&needle).map(|pos| (pos, std::cmp::Reverse(needle.len()), i))
        })
        .min()
        .map(|(_, _, i)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    /// Base URL; requests go to `{endpoint}/completions`.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "HttpConfig::default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "HttpConfig::default_retries")]
    pub max_retries: u32,
    #[serde(default = "HttpConfig::default_backoff")]
    pub initial_backoff_ms: u64,
    #[serde(default = "HttpConfig::default_max_tokens")]
    pub max_tokens: u32,
    /// JSON pointer to the generated text in the response body.
    #[serde(default = "HttpConfig::default_response_pointer")]
    pub response_pointer: String,
}

impl HttpConfig {
    fn default_timeout() -> u64 {
        60
    }
    fn default_retries() -> u32 {
        3
    }
    fn default_backoff() -> u64 {
        500
    }
    fn default_max_tokens() -> u32 {
        8
    }
    fn default_response_pointer() -> String {
        "/choices/0/text".into()
    }

    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: None,
            timeout_secs: Self::default_timeout(),
            max_retries: Self::default_retries(),
            initial_backoff_ms: Self::default_backoff(),
            max_tokens: Self::default_max_tokens(),
            response_pointer: Self::default_response_pointer(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let uri: ureq::http::Uri = self
            .endpoint
            .parse()
            .map_err(|e| Error::Config(format!("endpoint {:?}: {e}", self.endpoint)))?;
        let scheme_ok = matches!(uri.scheme_str(), Some("http") | Some("https"));
        if !scheme_ok || uri.host().is_none() {
            return Err(Error::Config(format!(
                "endpoint {:?} must be an absolute http(s) URL",
                self.endpoint
            )));
        }
        if self.model.is_empty() {
            return Err(Error::Config("http backend needs a model name".into()));
        }
        Ok(())
    }

    fn url(&self) -> String {
        format!("{}/completions", self.endpoint.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    #[default]
    Mock,
    Http(HttpConfig),
}

/// A configured answering backend.
#[derive(Clone)]
pub enum Backend {
    Mock,
    Http(HttpClient),
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Backend::Mock => f.write_str("Mock"),
            Backend::Http(c) => f.debug_tuple("Http").field(&c.config).finish(),
        }
    }
}

impl Backend {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self> {
        Ok(match cfg {
            BackendConfig::Mock => Backend::Mock,
            BackendConfig::Http(h) => Backend::Http(HttpClient::new(h.clone())?),
        })
    }

    pub fn is_mock(&self) -> bool {
        matches!(self, Backend::Mock)
    }
}

/// Outcome of answering one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    /// `None` when the completion matched no verbalizer.
    pub label: Option<usize>,
    pub raw_completion: Option<String>,
}

impl Backend {
    /// Answer one query. The mock reads the `(label, distance)` pairs of the
    /// examples; the HTTP backend reads only the prompt.
    pub fn answer(&self, prompt: &str, ices: &[(usize, f64)], labels: &LabelSpace) -> Result<Answer> {
        match self {
            Backend::Mock => Ok(Answer {
                label: Some(answer_mock(ices, labels.count())),
                raw_completion: None,
            }),
            Backend::Http(client) => {
                let raw = client.complete(prompt)?;
                Ok(Answer {
                    label: decode_label(&raw, labels),
                    raw_completion: Some(raw),
                })
            }
        }
    }
}

/// Send `prompt` to an HTTP backend and decode the label.
pub fn answer_http(prompt: &str, client: &HttpClient, labels: &LabelSpace) -> Result<usize> {
    let raw = client.complete(prompt)?;
    decode_label(&raw, labels).ok_or(Error::Decode { raw })
}

#[derive(Clone)]
pub struct HttpClient {
    config: HttpConfig,
    agent: ureq::Agent,
    token: Option<String>,
}

impl HttpClient {
    pub fn new(config: HttpConfig) -> Result<Self> {
        config.validate()?;
        let token = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| Error::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpClient { config, agent, token })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    /// POST a completion request, retrying transport failures, 429 and 5xx
    /// responses with exponential backoff.
    pub fn complete(&self, prompt: &str) -> Result<String> {
        let body = json!({
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": self.config.max_tokens,
            "temperature": 0,
        });
        let url = self.config.url();
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let wait = self.config.initial_backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                thread::sleep(Duration::from_millis(wait));
            }
            let mut req = self.agent.post(&url);
            if let Some(t) = &self.token {
                req = req.header("Authorization", format!("Bearer {t}"));
            }
            let mut resp = match req.send_json(&body) {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status().as_u16();
            if status == 429 || status >= 500 {
                last = format!("HTTP {status}");
                continue;
            }
            if status >= 400 {
                let text = resp.body_mut().read_to_string().unwrap_or_default();
                return Err(Error::Backend(format!("HTTP {status}: {text}")));
            }
            let value: Value = resp
                .body_mut()
                .read_json()
                .map_err(|e| Error::Backend(format!("unreadable response: {e}")))?;
            return value
                .pointer(&self.config.response_pointer)
                .and_then(Value::as_str)
                .map(str::to_owned)
                .ok_or_else(|| {
                    Error::Backend(format!(
                        "response has no text at {}: {value}",
                        self.config.response_pointer
                    ))
                });
        }
        Err(Error::Backend(format!(
            "{url} failed after {} attempts: {last}",
            self.config.max_retries + 1
        )))
    }
}

/// Few-shot paraphrase instruction; `{}` marks where the input goes.
pub const PARAPHRASE_TEMPLATE: &str = include_str!("../../../configs/prompts/paraphrase.txt");

pub fn paraphrase_prompt(text: &str, template: &str) -> Result<String> {
    if template.matches("{}").count() != 1 {
        return Err(Error::InvalidSpec("paraphrase template needs exactly one {} slot".into()));
    }
    Ok(template.trim_end().replacen("{}", text, 1))
}

/// Rewrite `text` with the backend. The mock returns it unchanged.
pub fn paraphrase(text: &str, backend: &Backend, template: &str) -> Result<String> {
    if text.trim().is_empty() {
        return Err(Error::Validation("cannot paraphrase empty text".into()));
    }
    let prompt = paraphrase_prompt(text, template)?;
    match backend {
        Backend::Mock => Ok(text.to_string()),
        Backend::Http(client) => {
            let raw = client.complete(&prompt)?;
            Ok(raw.trim_start().lines().next().unwrap_or("").trim().to_string())
        }
    }
}
