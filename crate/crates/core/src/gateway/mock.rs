//! Deterministic scripted model.
//!
//! A script is an ordered list of branches. The first branch whose matcher
//! accepts the prompt supplies the response. A branch describes a whole
//! answer; when the prompt already ends with a token-aligned prefix of that
//! answer (as in a truncate-and-regenerate prompt), the mock continues from
//! the longest such prefix instead of starting over.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Feed, GatewayError, GenerationRequest, LlmGateway, StreamAssembler, TokenCallback};
use crate::entity::text_sha256;
use crate::trace::{GenerationTrace, RawToken, TokenRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMatcher {
    /// Prompt contains the substring.
    Contains(String),
    /// Prompt contains every substring.
    AllOf(Vec<String>),
    /// Hex SHA-256 of the full prompt.
    Sha256(String),
}

impl PromptMatcher {
    pub fn matches(&self, prompt: &str) -> bool {
        match self {
            Self::Contains(s) => prompt.contains(s.as_str()),
            Self::AllOf(all) => all.iter().all(|s| prompt.contains(s.as_str())),
            Self::Sha256(h) => text_sha256(prompt).eq_ignore_ascii_case(h),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockBranch {
    pub prompt_matcher: PromptMatcher,
    pub response_tokens: Vec<TokenRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub branches: Vec<MockBranch>,
}

impl MockScript {
    pub fn from_json(json: &str) -> Result<Self, GatewayError> {
        serde_json::from_str(json).map_err(|e| GatewayError::InvalidRequest(format!("mock script: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::InvalidRequest(format!("mock script {}: {e}", path.display())))?;
        Self::from_json(&json)
    }
}

struct CompiledBranch {
    matcher: PromptMatcher,
    tokens: Vec<RawToken>,
}

/// Scripted backend. Immutable after construction apart from its request log.
pub struct MockGateway {
    branches: Vec<CompiledBranch>,
    log: Mutex<Vec<GenerationRequest>>,
}

impl MockGateway {
    pub fn new(script: MockScript) -> Result<Self, GatewayError> {
        let branches = script
            .branches
            .into_iter()
            .map(|b| {
                let tokens = b
                    .response_tokens
                    .iter()
                    .enumerate()
                    .map(|(i, t)| t.to_raw(i))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(CompiledBranch {
                    matcher: b.prompt_matcher,
                    tokens,
                })
            })
            .collect::<Result<Vec<_>, GatewayError>>()?;
        Ok(Self {
            branches,
            log: Mutex::new(Vec::new()),
        })
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        Self::new(MockScript::load(path)?)
    }

    /// Every request received so far, in order.
    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    fn respond(&self, prompt: &str) -> Result<&[RawToken], GatewayError> {
        let branch = self
            .branches
            .iter()
            .find(|b| b.matcher.matches(prompt))
            .ok_or_else(|| GatewayError::Unscripted {
                prompt_sha256: text_sha256(prompt),
            })?;
        let mut prefix_len = 0;
        let mut prefix = String::new();
        for (i, tok) in branch.tokens.iter().enumerate() {
            prefix.push_str(&tok.text);
            if prompt.ends_with(&prefix) {
                prefix_len = i + 1;
            }
        }
        Ok(&branch.tokens[prefix_len..])
    }
}

impl LlmGateway for MockGateway {
    fn stream_generate(
        &self,
        request: &GenerationRequest,
        on_token: &mut TokenCallback<'_>,
    ) -> Result<GenerationTrace, GatewayError> {
        request.validate()?;
        self.log
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(request.clone());
        let tokens = self.respond(&request.prompt)?;
        let mut assembler = StreamAssembler::new(request, on_token);
        for tok in tokens {
            let mut tok = tok.clone();
            tok.top_alternatives.truncate(request.top_logprobs);
            if assembler.feed(tok)? == Feed::Done {
                break;
            }
        }
        assembler.finish()
    }
}

impl std::fmt::Debug for MockGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockGateway")
            .field("branches", &self.branches.len())
            .finish()
    }
}

impl MockBranch {
    /// Builds a branch from `(text, probability)` pairs without alternatives.
    pub fn from_probabilities(matcher: PromptMatcher, tokens: &[(&str, f64)]) -> Self {
        Self {
            prompt_matcher: matcher,
            response_tokens: tokens
                .iter()
                .map(|(text, p)| TokenRecord {
                    text: (*text).to_string(),
                    logprob: p.ln(),
                    top_alternatives: Vec::new(),
                })
                .collect(),
        }
    }
}
