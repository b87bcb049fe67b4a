//! Token-stream data model shared by every detector and policy.
//!
//! A [`GenerationTrace`] is the detokenized output text plus one [`TokenEvent`]
//! per generated token. Probabilities are stored in linear space; wire formats
//! carry natural-log probabilities and are exponentiated on ingestion.
//!
//! Character offsets are UTF-8 byte offsets into [`GenerationTrace::text`], so
//! `&trace.text[start..end]` is always a valid slice.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack allowed when checking that a distribution sums to at most one.
pub const PROBABILITY_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("token {index} ({token:?}) does not match the text at byte {offset}")]
    Alignment {
        index: usize,
        token: String,
        offset: usize,
    },
    #[error("token {index} is empty")]
    EmptyToken { index: usize },
    #[error("{consumed} of {len} bytes covered by tokens; text has unmatched tail")]
    UnmatchedTail { consumed: usize, len: usize },
    #[error("token {index}: probability {value} outside [0, 1]")]
    InvalidProbability { index: usize, value: f64 },
    #[error("token {index}: alternatives sum to {sum}, which exceeds 1")]
    InvalidAlternatives { index: usize, sum: f64 },
    #[error("token {index}: expected index {expected}")]
    NonContiguous { index: usize, expected: usize },
    #[error("malformed trace record: {0}")]
    Record(String),
}

/// One entry of a token's top-k alternative list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub token: String,
    pub probability: f64,
}

impl Alternative {
    pub fn new(token: impl Into<String>, probability: f64) -> Self {
        Self {
            token: token.into(),
            probability,
        }
    }
}

/// A generated token with its probability information and text alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEvent {
    pub index: usize,
    pub text: String,
    pub probability: f64,
    #[serde(default)]
    pub top_alternatives: Vec<Alternative>,
    pub char_start: usize,
    pub char_end: usize,
}

impl TokenEvent {
    fn validate(&self) -> Result<(), TraceError> {
        check_probability(self.index, self.probability)?;
        let mut sum = 0.0;
        for alt in &self.top_alternatives {
            check_probability(self.index, alt.probability)?;
            sum += alt.probability;
        }
        if sum > 1.0 + PROBABILITY_SLACK {
            return Err(TraceError::InvalidAlternatives {
                index: self.index,
                sum,
            });
        }
        Ok(())
    }
}

fn check_probability(index: usize, value: f64) -> Result<(), TraceError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(TraceError::InvalidProbability { index, value })
    }
}

/// A token as it arrives from a backend, before alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct RawToken {
    pub text: String,
    pub probability: f64,
    pub top_alternatives: Vec<Alternative>,
}

impl RawToken {
    pub fn new(text: impl Into<String>, probability: f64) -> Self {
        Self {
            text: text.into(),
            probability,
            top_alternatives: Vec::new(),
        }
    }

    pub fn with_alternatives(mut self, alternatives: Vec<Alternative>) -> Self {
        self.top_alternatives = alternatives;
        self
    }
}

/// Detokenized output text and its aligned token events.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub text: String,
    pub tokens: Vec<TokenEvent>,
}

impl GenerationTrace {
    /// Builds a trace whose text is the concatenation of the token texts.
    pub fn from_tokens(tokens: Vec<RawToken>) -> Result<Self, TraceError> {
        let text: String = tokens.iter().map(|t| t.text.as_str()).collect();
        Self::aligned(text, tokens)
    }

    /// Builds a trace against an existing output text, aligning every token.
    pub fn aligned(text: String, tokens: Vec<RawToken>) -> Result<Self, TraceError> {
        let spans = align_tokens(tokens.iter().map(|t| t.text.as_str()), &text)?;
        let tokens = tokens
            .into_iter()
            .zip(spans)
            .enumerate()
            .map(|(index, (raw, (char_start, char_end)))| TokenEvent {
                index,
                text: raw.text,
                probability: raw.probability,
                top_alternatives: raw.top_alternatives,
                char_start,
                char_end,
            })
            .collect::<Vec<_>>();
        let trace = Self { text, tokens };
        trace.validate()?;
        Ok(trace)
    }

    /// Checks every structural and probabilistic invariant of the trace.
    pub fn validate(&self) -> Result<(), TraceError> {
        let mut cursor = 0;
        for (expected, token) in self.tokens.iter().enumerate() {
            if token.index != expected {
                return Err(TraceError::NonContiguous {
                    index: token.index,
                    expected,
                });
            }
            if token.char_start != cursor
                || token.char_end <= token.char_start
                || self.text.get(token.char_start..token.char_end) != Some(token.text.as_str())
            {
                return Err(TraceError::Alignment {
                    index: expected,
                    token: token.text.clone(),
                    offset: cursor,
                });
            }
            token.validate()?;
            cursor = token.char_end;
        }
        if cursor != self.text.len() {
            return Err(TraceError::UnmatchedTail {
                consumed: cursor,
                len: self.text.len(),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Text covered by the half-open token range `[start, end)`.
    pub fn text_of(&self, start: usize, end: usize) -> &str {
        let end = end.min(self.tokens.len());
        if start >= end {
            return "";
        }
        &self.text[self.tokens[start].char_start..self.tokens[end - 1].char_end]
    }

    /// The first `n` tokens as a new trace.
    pub fn prefix(&self, n: usize) -> GenerationTrace {
        let n = n.min(self.tokens.len());
        let end = self.tokens.get(n.wrapping_sub(1)).map_or(0, |t| t.char_end);
        GenerationTrace {
            text: self.text[..end].to_string(),
            tokens: self.tokens[..n].to_vec(),
        }
    }

    /// Appends a token, assigning its index and offsets.
    pub fn push(&mut self, raw: RawToken) -> Result<&TokenEvent, TraceError> {
        let index = self.tokens.len();
        if raw.text.is_empty() {
            return Err(TraceError::EmptyToken { index });
        }
        let char_start = self.text.len();
        self.text.push_str(&raw.text);
        let event = TokenEvent {
            index,
            char_end: self.text.len(),
            text: raw.text,
            probability: raw.probability,
            top_alternatives: raw.top_alternatives,
            char_start,
        };
        if let Err(e) = event.validate() {
            self.text.truncate(char_start);
            return Err(e);
        }
        self.tokens.push(event);
        Ok(&self.tokens[index])
    }

    /// Appends an already-built event (as delivered by a stream callback),
    /// re-indexing it to this trace.
    pub fn push_event(&mut self, event: &TokenEvent) -> Result<&TokenEvent, TraceError> {
        self.push(RawToken {
            text: event.text.clone(),
            probability: event.probability,
            top_alternatives: event.top_alternatives.clone(),
        })
    }

    pub fn probabilities(&self) -> impl Iterator<Item = f64> + '_ {
        self.tokens.iter().map(|t| t.probability)
    }
}

/// Greedy left-to-right exact alignment of token texts onto `full_text`.
///
/// Every token must match at the current cursor and the tokens must consume
/// the whole text. Offsets are byte offsets.
pub fn align_tokens<'a, I>(token_texts: I, full_text: &str) -> Result<Vec<(usize, usize)>, TraceError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut cursor = 0;
    let mut spans = Vec::new();
    for (index, token) in token_texts.into_iter().enumerate() {
        if token.is_empty() {
            return Err(TraceError::EmptyToken { index });
        }
        if !full_text[cursor..].starts_with(token) {
            return Err(TraceError::Alignment {
                index,
                token: token.to_string(),
                offset: cursor,
            });
        }
        spans.push((cursor, cursor + token.len()));
        cursor += token.len();
    }
    if cursor != full_text.len() {
        return Err(TraceError::UnmatchedTail {
            consumed: cursor,
            len: full_text.len(),
        });
    }
    Ok(spans)
}

/// Half-open token range of one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub token_start: usize,
    pub token_end: usize,
    pub revised: bool,
}

impl SentenceSpan {
    pub fn new(token_start: usize, token_end: usize) -> Self {
        Self {
            token_start,
            token_end,
            revised: false,
        }
    }

    pub fn contains(&self, token: usize) -> bool {
        (self.token_start..self.token_end).contains(&token)
    }
}

fn ends_sentence(token: &str) -> Option<bool> {
    let trimmed = token.trim_end();
    let terminal = matches!(trimmed.chars().last(), Some('.' | '!' | '?'));
    // Some(true): punctuation already followed by whitespace inside the token.
    terminal.then_some(trimmed.len() != token.len())
}

/// Splits a trace into sentences.
///
/// A boundary falls after a token whose text (ignoring trailing whitespace)
/// ends in `.`, `!` or `?`, provided the punctuation is followed by whitespace
/// or the end of the text. Any trailing fragment forms the last span.
pub fn segment_sentences(trace: &GenerationTrace) -> Vec<SentenceSpan> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, token) in trace.tokens.iter().enumerate() {
        let Some(has_space) = ends_sentence(&token.text) else {
            continue;
        };
        let closed = has_space
            || trace.text[token.char_end..]
                .chars()
                .next()
                .is_none_or(char::is_whitespace);
        if closed {
            spans.push(SentenceSpan::new(start, i + 1));
            start = i + 1;
        }
    }
    if start < trace.tokens.len() {
        spans.push(SentenceSpan::new(start, trace.tokens.len()));
    }
    spans
}

/// Index of the sentence containing `token`, if any.
pub fn sentence_of(sentences: &[SentenceSpan], token: usize) -> Option<usize> {
    sentences.iter().position(|s| s.contains(token))
}

/// Wire form of a token alternative: natural-log probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlternativeRecord {
    pub token: String,
    pub logprob: f64,
}

/// Wire form of a token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub text: String,
    pub logprob: f64,
    #[serde(default)]
    pub top_alternatives: Vec<AlternativeRecord>,
}

/// One line of the trace fixture format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub text: String,
    pub tokens: Vec<TokenRecord>,
}

/// Converts a natural-log probability to linear space.
///
/// Values a hair above zero (rounding noise from some APIs) clamp to 1.
pub fn probability_from_logprob(index: usize, logprob: f64) -> Result<f64, TraceError> {
    if logprob.is_nan() || logprob > PROBABILITY_SLACK {
        return Err(TraceError::InvalidProbability {
            index,
            value: logprob.exp(),
        });
    }
    Ok(logprob.exp().min(1.0))
}

impl TokenRecord {
    pub fn to_raw(&self, index: usize) -> Result<RawToken, TraceError> {
        let top_alternatives = self
            .top_alternatives
            .iter()
            .map(|a| Ok(Alternative::new(a.token.clone(), probability_from_logprob(index, a.logprob)?)))
            .collect::<Result<Vec<_>, TraceError>>()?;
        Ok(RawToken {
            text: self.text.clone(),
            probability: probability_from_logprob(index, self.logprob)?,
            top_alternatives,
        })
    }
}

impl TraceRecord {
    pub fn into_trace(self) -> Result<GenerationTrace, TraceError> {
        let raw = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| t.to_raw(i))
            .collect::<Result<Vec<_>, _>>()?;
        GenerationTrace::aligned(self.text, raw)
    }

    pub fn from_trace(trace: &GenerationTrace) -> Self {
        Self {
            text: trace.text.clone(),
            tokens: trace
                .tokens
                .iter()
                .map(|t| TokenRecord {
                    text: t.text.clone(),
                    logprob: t.probability.ln(),
                    top_alternatives: t
                        .top_alternatives
                        .iter()
                        .map(|a| AlternativeRecord {
                            token: a.token.clone(),
                            logprob: a.probability.ln(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Parses one JSON line of the trace fixture format.
pub fn parse_trace_line(line: &str) -> Result<GenerationTrace, TraceError> {
    let record: TraceRecord =
        serde_json::from_str(line).map_err(|e| TraceError::Record(e.to_string()))?;
    record.into_trace()
}
