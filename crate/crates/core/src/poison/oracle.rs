//! Oracle ports: a deterministic mock for hermetic runs and an
//! OpenAI-compatible chat-completions client with retries.

use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;
use serde::Serialize;
use serde_json::json;

use super::PoisonError;
use crate::metrics::fnv1a;
use crate::numerics::RandomStream;

pub const DEFAULT_TEMPERATURE: f64 = 0.7;

/// Environment variable holding the remote oracle credential. Never a
/// flag: process lists leak flags.
pub const ORACLE_KEY_ENV: &str = "STEGOLAB_ORACLE_API_KEY";

/// A chat-completion endpoint. The mock is a pure function of its
/// inputs; the HTTP port records every request/response exchange.
pub trait OraclePort {
    fn name(&self) -> &str;
    fn complete(
        &self,
        system: Option<&str>,
        user: &str,
        temperature: f64,
        stream: &RandomStream,
    ) -> Result<String, PoisonError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParaphraseMode {
    Identity,
    RotateWords,
}

/// Offline oracle. It recognizes the three pipeline prompts by their
/// instruction text and answers deterministically from the rendered
/// placeholder values plus the stream.
#[derive(Debug, Clone)]
pub struct MockOracle {
    paraphrase: ParaphraseMode,
}

impl Default for MockOracle {
    fn default() -> Self {
        Self { paraphrase: ParaphraseMode::Identity }
    }
}

impl MockOracle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mock whose paraphrases visibly rewrite the text (first word
    /// moves to the end) instead of echoing it.
    pub fn rewriting() -> Self {
        Self { paraphrase: ParaphraseMode::RotateWords }
    }
}

/// Value between `label ... "` and the next `"`, searching from the
/// end so the instruction section wins over the in-context example.
fn quoted_after<'t>(text: &'t str, label: &str) -> Option<&'t str> {
    let at = text.rfind(label)? + label.len();
    let rest = &text[at..];
    let open = rest.find('"')? + 1;
    let rest = &rest[open..];
    let close = rest.find('"')?;
    Some(&rest[..close])
}

fn topic_head(anchor: &str) -> String {
    anchor.split_whitespace().take(6).collect::<Vec<_>>().join(" ")
}

fn tag_for(parts: &[&str]) -> String {
    let mut h = 0u64;
    for part in parts {
        h = h.rotate_left(17) ^ fnv1a(part.as_bytes());
    }
    format!("{:08x}", h as u32)
}

const OPENERS: [&str; 4] = ["Consider", "Notice", "Observe", "Recall"];

impl OraclePort for MockOracle {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(
        &self,
        _system: Option<&str>,
        user: &str,
        _temperature: f64,
        stream: &RandomStream,
    ) -> Result<String, PoisonError> {
        if user.starts_with("Paraphrase the following text") {
            let text = user
                .split_once("[TEXT]\n")
                .map(|(_, t)| t.trim())
                .ok_or(PoisonError::UnrecognizedPrompt)?;
            return Ok(match self.paraphrase {
                ParaphraseMode::Identity => text.to_string(),
                ParaphraseMode::RotateWords => {
                    let words: Vec<&str> = text.split_whitespace().collect();
                    match words.split_first() {
                        Some((first, rest)) if !rest.is_empty() => {
                            format!("{} {}", rest.join(" "), first)
                        }
                        _ => text.to_string(),
                    }
                }
            });
        }
        if user.contains("The stegotext is \"") {
            let message = quoted_after(user, "The plaintext is ")
                .ok_or(PoisonError::UnrecognizedPrompt)?;
            let anchor = quoted_after(user, "The shared knowledge is ")
                .ok_or(PoisonError::UnrecognizedPrompt)?;
            let stegotext = quoted_after(user, "The stegotext is ")
                .ok_or(PoisonError::UnrecognizedPrompt)?;
            let tag = tag_for(&[message, anchor, stegotext]);
            let head = topic_head(anchor);
            return Ok(format!(
                "Encode Reasoning: Starting from the shared account ({head}), recast each \
                 word of the plaintext as an image the topic already invites; the drift \
                 labelled {tag} fixes where each borrowed figure sits in the final text.\n\
                 Decode Reasoning: Set the received text beside the shared account and list \
                 what the account does not predict; the surplus imagery labelled {tag} reads \
                 back, image by image, to the hidden plaintext."
            ));
        }
        if user.contains("Generate corresponding long Stegotext") {
            let message = quoted_after(user, "The plaintext is ")
                .ok_or(PoisonError::UnrecognizedPrompt)?;
            let anchor = quoted_after(user, "The shared knowledge is ")
                .ok_or(PoisonError::UnrecognizedPrompt)?;
            let tag = tag_for(&[message, anchor]);
            let head = topic_head(anchor);
            let opener = OPENERS[stream.rng().gen_range(0..OPENERS.len())];
            return Ok(format!(
                "{opener} how {head} keeps its familiar outline while a quiet current runs \
                 beneath it. Attentive readers will sense an undertow pointing toward {tag}, \
                 a drift the casual eye reads as ordinary colour. Every borrowed image here \
                 answers one word of the hidden note, settled gently into the shared account."
            ));
        }
        Err(PoisonError::UnrecognizedPrompt)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleExchange {
    pub request: serde_json::Value,
    pub response: Option<String>,
    pub error: Option<String>,
}

const MAX_ATTEMPTS: u32 = 3;

/// Blocking client for an OpenAI-compatible chat-completions endpoint.
/// Credential comes from [`ORACLE_KEY_ENV`] when set; absent means
/// unauthenticated (local endpoints).
pub struct HttpOracle {
    url: String,
    model: String,
    api_key: Option<String>,
    backoff_base: Duration,
    client: reqwest::blocking::Client,
    transcript: Mutex<Vec<OracleExchange>>,
}

impl HttpOracle {
    pub fn new(url: &str, model: &str) -> Result<Self, PoisonError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| PoisonError::OracleSetup { detail: e.to_string() })?;
        Ok(Self {
            url: url.to_string(),
            model: model.to_string(),
            api_key: std::env::var(ORACLE_KEY_ENV).ok(),
            backoff_base: Duration::from_secs(1),
            client,
            transcript: Mutex::new(Vec::new()),
        })
    }

    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    pub fn transcript(&self) -> Vec<OracleExchange> {
        self.transcript.lock().expect("transcript poisoned").clone()
    }

    fn record(&self, request: serde_json::Value, response: Option<String>, error: Option<String>) {
        self.transcript
            .lock()
            .expect("transcript poisoned")
            .push(OracleExchange { request, response, error });
    }
}

fn parse_chat_content(text: &str) -> Result<String, PoisonError> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| PoisonError::OracleProtocol { detail: format!("reply not JSON: {e}") })?;
    value["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or(PoisonError::OracleProtocol {
            detail: "missing choices[0].message.content".into(),
        })
}

impl OraclePort for HttpOracle {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(
        &self,
        system: Option<&str>,
        user: &str,
        temperature: f64,
        _stream: &RandomStream,
    ) -> Result<String, PoisonError> {
        let mut messages = Vec::new();
        if let Some(system) = system {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": user}));
        let body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": temperature,
        });

        let mut last_error = String::new();
        for attempt in 0..MAX_ATTEMPTS {
            if attempt > 0 {
                std::thread::sleep(self.backoff_base * 2u32.pow(attempt - 1));
            }
            let mut request = self.client.post(&self.url).json(&body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            match request.send() {
                Ok(response) if response.status().is_success() => {
                    let text = response
                        .text()
                        .map_err(|e| PoisonError::OracleTransport {
                            attempts: attempt + 1,
                            detail: e.to_string(),
                        })?;
                    let content = parse_chat_content(&text);
                    match content {
                        Ok(content) => {
                            self.record(body, Some(content.clone()), None);
                            return Ok(content);
                        }
                        Err(err) => {
                            // A malformed body is not transient; stop retrying.
                            self.record(body, Some(text), Some(err.to_string()));
                            return Err(err);
                        }
                    }
                }
                Ok(response) => {
                    last_error = format!("status {}", response.status());
                }
                Err(err) => {
                    last_error = err.to_string();
                }
            }
        }
        self.record(body, None, Some(last_error.clone()));
        Err(PoisonError::OracleTransport { attempts: MAX_ATTEMPTS, detail: last_error })
    }
}
