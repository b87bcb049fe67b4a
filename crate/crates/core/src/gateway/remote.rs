//! HTTP backend for OpenAI-compatible endpoints that return `logprobs`.
//!
//! Both the chat-completions shape (`logprobs.content[]`) and the legacy
//! completions shape (`logprobs.tokens[]` / `token_logprobs[]` /
//! `top_logprobs[]`) are understood, streamed (SSE) or not.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Feed, GatewayError, GenerationRequest, LlmGateway, StreamAssembler, TokenCallback};
use crate::trace::{probability_from_logprob, Alternative, GenerationTrace, RawToken};

/// Environment variable consulted when no key is configured.
pub const API_KEY_ENV: &str = "DRAD_API_KEY";

const MAX_BACKOFF: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiStyle {
    #[default]
    Chat,
    Completions,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub style: ApiStyle,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub timeout_secs: u64,
    pub serialize_requests: bool,
    pub transcript: Option<PathBuf>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: String::new(),
            api_key: None,
            style: ApiStyle::Chat,
            max_retries: 3,
            backoff_base_ms: 500,
            timeout_secs: 60,
            serialize_requests: false,
            transcript: None,
        }
    }
}

impl std::fmt::Debug for RemoteConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteConfig")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("style", &self.style)
            .field("max_retries", &self.max_retries)
            .field("backoff_base_ms", &self.backoff_base_ms)
            .field("timeout_secs", &self.timeout_secs)
            .field("serialize_requests", &self.serialize_requests)
            .field("transcript", &self.transcript)
            .finish()
    }
}

/// One HTTP attempt, as seen by the retry loop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub status: Option<u16>,
    pub error: Option<String>,
}

pub struct OpenAiGateway {
    config: RemoteConfig,
    api_key: Option<String>,
    client: Client,
    attempts: Mutex<Vec<AttemptRecord>>,
    dispatch: Mutex<()>,
    transcript: Option<Mutex<File>>,
}

impl std::fmt::Debug for OpenAiGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiGateway").field("config", &self.config).finish()
    }
}

fn transport(e: impl std::fmt::Display) -> GatewayError {
    GatewayError::Transport(e.to_string())
}

fn malformed(e: impl std::fmt::Display) -> GatewayError {
    GatewayError::MalformedResponse(e.to_string())
}

impl OpenAiGateway {
    pub fn new(config: RemoteConfig) -> Result<Self, GatewayError> {
        let api_key = config
            .api_key
            .clone()
            .or_else(|| std::env::var(API_KEY_ENV).ok())
            .filter(|k| !k.is_empty());
        let client = Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(transport)?;
        let transcript = match &config.transcript {
            Some(path) => Some(Mutex::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| GatewayError::InvalidRequest(format!("transcript {}: {e}", path.display())))?,
            )),
            None => None,
        };
        Ok(Self {
            config,
            api_key,
            client,
            attempts: Mutex::new(Vec::new()),
            dispatch: Mutex::new(()),
            transcript,
        })
    }

    /// Every HTTP attempt made so far, retries included.
    pub fn attempts(&self) -> Vec<AttemptRecord> {
        self.attempts.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn body(&self, request: &GenerationRequest, stream: bool) -> Value {
        let mut body = match self.config.style {
            ApiStyle::Chat => {
                let mut b = json!({
                    "model": self.config.model,
                    "messages": [{"role": "user", "content": request.prompt}],
                    "max_tokens": request.max_tokens,
                    "temperature": request.temperature,
                    "logprobs": true,
                    "stream": stream,
                });
                if request.top_logprobs > 0 {
                    b["top_logprobs"] = json!(request.top_logprobs);
                }
                b
            }
            ApiStyle::Completions => json!({
                "model": self.config.model,
                "prompt": request.prompt,
                "max_tokens": request.max_tokens,
                "temperature": request.temperature,
                "logprobs": request.top_logprobs,
                "stream": stream,
            }),
        };
        if !request.stop_sequences.is_empty() {
            body["stop"] = json!(request.stop_sequences);
        }
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn record(&self, attempt: u32, status: Option<u16>, error: Option<String>) {
        self.attempts
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(AttemptRecord { attempt, status, error });
    }

    fn log_transcript(&self, request: &Value, status: u16, response: &Value) {
        if let Some(file) = &self.transcript {
            let line = json!({"request": request, "status": status, "response": response});
            let mut f = file.lock().unwrap_or_else(|e| e.into_inner());
            if let Err(e) = writeln!(f, "{line}") {
                log::warn!("failed to write transcript: {e}");
            }
        }
    }

    fn backoff(&self, attempt: u32, retry_after: Option<Duration>) -> Duration {
        let exp = Duration::from_millis(self.config.backoff_base_ms.saturating_mul(1 << attempt.min(20)));
        exp.max(retry_after.unwrap_or_default()).min(MAX_BACKOFF)
    }

    /// Sends the request, retrying on 429 with exponential backoff, and
    /// returns the first successful response.
    fn send(&self, body: &Value) -> Result<Response, GatewayError> {
        let _gate = self
            .config
            .serialize_requests
            .then(|| self.dispatch.lock().unwrap_or_else(|e| e.into_inner()));
        let mut attempt = 0;
        loop {
            let mut req = self.client.post(&self.config.endpoint).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let response = match req.send() {
                Ok(r) => r,
                Err(e) => {
                    self.record(attempt, None, Some(e.to_string()));
                    return Err(transport(e));
                }
            };
            let status = response.status();
            self.record(attempt, Some(status.as_u16()), None);
            if status.is_success() {
                return Ok(response);
            }
            let retry_after = response
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|s| s.is_finite() && *s >= 0.0)
                .map(Duration::from_secs_f64);
            let text = response.text().unwrap_or_default();
            self.log_transcript(body, status.as_u16(), &Value::String(text.clone()));
            let excerpt: String = text.chars().take(200).collect();
            match status {
                StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => {
                    return Err(GatewayError::Auth(format!("HTTP {}: {excerpt}", status.as_u16())))
                }
                StatusCode::TOO_MANY_REQUESTS => {
                    if attempt >= self.config.max_retries {
                        return Err(GatewayError::RateLimited { retry_after });
                    }
                    let wait = self.backoff(attempt, retry_after);
                    log::debug!("rate limited; retrying in {wait:?}");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                _ => return Err(transport(format!("HTTP {}: {excerpt}", status.as_u16()))),
            }
        }
    }
}

fn alternatives_from_pairs(index: usize, pairs: Vec<(String, f64)>) -> Result<Vec<Alternative>, GatewayError> {
    let mut alts = pairs
        .into_iter()
        .map(|(token, lp)| Ok(Alternative::new(token, probability_from_logprob(index, lp)?)))
        .collect::<Result<Vec<_>, GatewayError>>()?;
    let sum: f64 = alts.iter().map(|a| a.probability).sum();
    // Rounded logprobs can push the sum a little past one.
    if sum > 1.0 && sum <= 1.0 + 1e-6 {
        for a in &mut alts {
            a.probability /= sum;
        }
    }
    Ok(alts)
}

fn as_logprob(v: &Value, what: &str) -> Result<f64, GatewayError> {
    v.as_f64().ok_or_else(|| malformed(format!("{what} is not a number")))
}

/// `logprobs.content[]` entries of a chat choice.
fn chat_tokens(logprobs: &Value) -> Result<Vec<RawToken>, GatewayError> {
    let content = logprobs
        .get("content")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("logprobs.content missing"))?;
    content
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let text = entry
                .get("token")
                .and_then(Value::as_str)
                .ok_or_else(|| malformed("token missing"))?;
            let lp = as_logprob(entry.get("logprob").unwrap_or(&Value::Null), "logprob")?;
            let pairs = entry
                .get("top_logprobs")
                .and_then(Value::as_array)
                .map(|alts| {
                    alts.iter()
                        .map(|a| {
                            Ok((
                                a.get("token").and_then(Value::as_str).unwrap_or_default().to_string(),
                                as_logprob(a.get("logprob").unwrap_or(&Value::Null), "top logprob")?,
                            ))
                        })
                        .collect::<Result<Vec<_>, GatewayError>>()
                })
                .transpose()?
                .unwrap_or_default();
            Ok(RawToken {
                text: text.to_string(),
                probability: probability_from_logprob(i, lp)?,
                top_alternatives: alternatives_from_pairs(i, pairs)?,
            })
        })
        .collect()
}

/// Parallel `tokens[]` / `token_logprobs[]` / `top_logprobs[]` arrays of a
/// completions choice.
fn completion_tokens(logprobs: &Value) -> Result<Vec<RawToken>, GatewayError> {
    let tokens = logprobs
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("logprobs.tokens missing"))?;
    let lps = logprobs
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("logprobs.token_logprobs missing"))?;
    if lps.len() != tokens.len() {
        return Err(malformed("tokens and token_logprobs differ in length"));
    }
    let tops = logprobs.get("top_logprobs").and_then(Value::as_array);
    tokens
        .iter()
        .zip(lps)
        .enumerate()
        .map(|(i, (tok, lp))| {
            let text = tok.as_str().ok_or_else(|| malformed("token is not a string"))?;
            let mut pairs: Vec<(String, f64)> = match tops.and_then(|t| t.get(i)).and_then(Value::as_object) {
                Some(map) => map
                    .iter()
                    .map(|(k, v)| Ok((k.clone(), as_logprob(v, "top logprob")?)))
                    .collect::<Result<_, GatewayError>>()?,
                None => Vec::new(),
            };
            pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            Ok(RawToken {
                text: text.to_string(),
                probability: probability_from_logprob(i, as_logprob(lp, "token logprob")?)?,
                top_alternatives: alternatives_from_pairs(i, pairs)?,
            })
        })
        .collect()
}

/// Tokens carried by one choice (full response or stream chunk).
fn choice_tokens(style: ApiStyle, payload: &Value) -> Result<Vec<RawToken>, GatewayError> {
    if let Some(err) = payload.get("error") {
        return Err(transport(format!("server error: {err}")));
    }
    let Some(choice) = payload.get("choices").and_then(|c| c.get(0)) else {
        return Err(malformed("no choices"));
    };
    let text = match style {
        ApiStyle::Chat => choice
            .get("message")
            .or_else(|| choice.get("delta"))
            .and_then(|m| m.get("content"))
            .and_then(Value::as_str)
            .unwrap_or_default(),
        ApiStyle::Completions => choice.get("text").and_then(Value::as_str).unwrap_or_default(),
    };
    let logprobs = choice.get("logprobs").filter(|v| !v.is_null());
    let Some(logprobs) = logprobs else {
        return if text.is_empty() {
            Ok(Vec::new())
        } else {
            Err(malformed("response carries no logprobs"))
        };
    };
    match style {
        ApiStyle::Chat => chat_tokens(logprobs),
        ApiStyle::Completions => completion_tokens(logprobs),
    }
}

impl LlmGateway for OpenAiGateway {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationTrace, GatewayError> {
        request.validate()?;
        let body = self.body(request, false);
        let response = self.send(&body)?;
        let status = response.status().as_u16();
        let payload: Value = response.json().map_err(malformed)?;
        self.log_transcript(&body, status, &payload);
        let tokens = choice_tokens(self.config.style, &payload)?;
        let mut noop = |_: &crate::trace::TokenEvent| std::ops::ControlFlow::Continue(());
        let mut assembler = StreamAssembler::new(request, &mut noop);
        for tok in tokens {
            if assembler.feed(tok)? == Feed::Done {
                break;
            }
        }
        assembler.finish()
    }

    fn stream_generate(
        &self,
        request: &GenerationRequest,
        on_token: &mut TokenCallback<'_>,
    ) -> Result<GenerationTrace, GatewayError> {
        request.validate()?;
        let body = self.body(request, true);
        let response = self.send(&body)?;
        let status = response.status().as_u16();
        let mut assembler = StreamAssembler::new(request, on_token);
        let mut reader = BufReader::new(response);
        let mut line = String::new();
        'stream: loop {
            line.clear();
            if reader.read_line(&mut line).map_err(transport)? == 0 {
                break;
            }
            let Some(data) = line.trim_end().strip_prefix("data:") else {
                continue;
            };
            let data = data.trim();
            if data == "[DONE]" {
                break;
            }
            let chunk: Value = serde_json::from_str(data).map_err(malformed)?;
            for tok in choice_tokens(self.config.style, &chunk)? {
                if assembler.feed(tok)? == Feed::Done {
                    break 'stream;
                }
            }
        }
        // Dropping the reader here closes the connection on cancellation.
        drop(reader);
        let trace = assembler.finish()?;
        self.log_transcript(&body, status, &json!({"streamed_text": trace.text}));
        Ok(trace)
    }
}
