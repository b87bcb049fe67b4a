//! Language-model backends that expose per-token probabilities.
//!
//! Every backend implements [`LlmGateway`]. Two ship with the crate:
//! [`MockGateway`], a deterministic scripted model for tests and offline runs,
//! and [`OpenAiGateway`], an HTTP client for chat- or completions-style
//! endpoints that return `logprobs`.
//!
//! Stop sequences and `max_tokens` are enforced client-side by
//! [`StreamAssembler`], so a trace never contains a stop sequence and the
//! streamed callbacks always match the returned trace.

mod mock;
mod remote;

use std::ops::ControlFlow;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{GenerationTrace, RawToken, TokenEvent, TraceError};

pub use mock::{MockBranch, MockGateway, MockScript, PromptMatcher};
pub use remote::{ApiStyle, AttemptRecord, OpenAiGateway, RemoteConfig, API_KEY_ENV};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no scripted branch matches prompt (sha256 {prompt_sha256})")]
    Unscripted { prompt_sha256: String },
}

impl From<TraceError> for GatewayError {
    fn from(e: TraceError) -> Self {
        GatewayError::MalformedResponse(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: usize,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    pub top_logprobs: usize,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for GenerationRequest {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            max_tokens: 256,
            stop_sequences: Vec::new(),
            top_logprobs: 5,
            temperature: 0.0,
            seed: None,
        }
    }
}

/// Callback invoked once per delivered token; `Break` cancels generation.
pub type TokenCallback<'a> = dyn FnMut(&TokenEvent) -> ControlFlow<()> + 'a;

pub trait LlmGateway: Send + Sync {
    /// Streams tokens to `on_token` and returns the trace of every delivered
    /// token, including the one on which the callback broke off.
    fn stream_generate(
        &self,
        request: &GenerationRequest,
        on_token: &mut TokenCallback<'_>,
    ) -> Result<GenerationTrace, GatewayError>;

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationTrace, GatewayError> {
        self.stream_generate(request, &mut |_| ControlFlow::Continue(()))
    }
}

impl<G: LlmGateway + ?Sized> LlmGateway for &G {
    fn stream_generate(
        &self,
        request: &GenerationRequest,
        on_token: &mut TokenCallback<'_>,
    ) -> Result<GenerationTrace, GatewayError> {
        (**self).stream_generate(request, on_token)
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationTrace, GatewayError> {
        (**self).generate(request)
    }
}

impl<G: LlmGateway + ?Sized> LlmGateway for Box<G> {
    fn stream_generate(
        &self,
        request: &GenerationRequest,
        on_token: &mut TokenCallback<'_>,
    ) -> Result<GenerationTrace, GatewayError> {
        (**self).stream_generate(request, on_token)
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationTrace, GatewayError> {
        (**self).generate(request)
    }
}

/// Whether the assembler wants more tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feed {
    More,
    Done,
}

/// Turns a raw token stream into a trace while applying stop sequences, the
/// token limit and callback cancellation.
///
/// Tokens whose text could be the beginning of a stop sequence are held back
/// until the match is decided, so nothing is delivered that would later have
/// to be retracted.
pub struct StreamAssembler<'a, 'cb> {
    trace: GenerationTrace,
    pending: Vec<RawToken>,
    stops: Vec<&'a str>,
    max_tokens: usize,
    received: usize,
    on_token: &'a mut TokenCallback<'cb>,
    done: bool,
}

impl<'a, 'cb> StreamAssembler<'a, 'cb> {
    pub fn new(request: &'a GenerationRequest, on_token: &'a mut TokenCallback<'cb>) -> Self {
        Self {
            trace: GenerationTrace::default(),
            pending: Vec::new(),
            stops: request
                .stop_sequences
                .iter()
                .map(String::as_str)
                .filter(|s| !s.is_empty())
                .collect(),
            max_tokens: request.max_tokens,
            received: 0,
            on_token,
            done: false,
        }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    fn commit(&mut self, raw: RawToken) -> Result<(), GatewayError> {
        if raw.text.is_empty() {
            return Ok(());
        }
        let event = self.trace.push(raw)?.clone();
        if (self.on_token)(&event).is_break() {
            self.done = true;
        }
        Ok(())
    }

    /// Length of the longest suffix of `text` that is a proper prefix of a
    /// stop sequence.
    fn held_suffix(&self, text: &str) -> usize {
        let mut best = 0;
        for stop in &self.stops {
            for (i, _) in stop.char_indices().skip(1) {
                if i > best && text.ends_with(&stop[..i]) {
                    best = i;
                }
            }
        }
        best
    }

    pub fn feed(&mut self, raw: RawToken) -> Result<Feed, GatewayError> {
        if self.done {
            return Ok(Feed::Done);
        }
        self.received += 1;
        self.pending.push(raw);
        let pending_text: String = self.pending.iter().map(|t| t.text.as_str()).collect();

        let stop_at = self.stops.iter().filter_map(|s| pending_text.find(s)).min();
        if let Some(cut) = stop_at {
            let mut offset = 0;
            for mut tok in std::mem::take(&mut self.pending) {
                if offset >= cut || self.done {
                    break;
                }
                let end = offset + tok.text.len();
                if end > cut {
                    tok.text.truncate(cut - offset);
                }
                offset = end;
                self.commit(tok)?;
            }
            self.done = true;
            return Ok(Feed::Done);
        }

        let held = self.held_suffix(&pending_text);
        let keep_from = pending_text.len() - held;
        let mut offset = 0;
        let mut flush = 0;
        for tok in &self.pending {
            if offset + tok.text.len() > keep_from {
                break;
            }
            offset += tok.text.len();
            flush += 1;
        }
        for tok in self.pending.drain(..flush).collect::<Vec<_>>() {
            self.commit(tok)?;
            if self.done {
                self.pending.clear();
                return Ok(Feed::Done);
            }
        }
        if self.received >= self.max_tokens {
            self.finish_pending()?;
            self.done = true;
            return Ok(Feed::Done);
        }
        Ok(Feed::More)
    }

    fn finish_pending(&mut self) -> Result<(), GatewayError> {
        for tok in std::mem::take(&mut self.pending) {
            if self.done {
                break;
            }
            self.commit(tok)?;
        }
        Ok(())
    }

    /// Flushes held tokens (the stream ended without completing a stop
    /// sequence) and returns the trace.
    pub fn finish(mut self) -> Result<GenerationTrace, GatewayError> {
        if !self.done {
            self.finish_pending()?;
        }
        Ok(self.trace)
    }
}
