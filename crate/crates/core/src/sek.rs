//! Retrieval-timing policies and knowledge-injected self-correction.
//!
//! Five policies share one generation loop:
//!
//! * `nor`: generate once, never retrieve.
//! * `srr`: retrieve once with the question, then generate.
//! * `flr`: draft one sentence at a time, retrieve with each draft sentence
//!   and regenerate it with the hits in context.
//! * `tpr`: like `flr`, but only for draft sentences containing a token below
//!   the probability threshold; that token set is left out of the query.
//! * `drad`: stream tokens, score every closed entity, and on a hallucinated
//!   entity retrieve with the tokens around it, cut the output just before it
//!   and let the model continue from there with the hits in context.
//!
//! A sentence is revised at most once per run.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::ControlFlow;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity::{EntityExtractor, EntitySpan, EntityTracker};
use crate::gateway::{GatewayError, GenerationRequest, LlmGateway};
use crate::retrieval::{IndexHandle, PassageHit, RetrievalError};
use crate::rhd::{detect, DetectionConfig, ScoringError};
use crate::trace::{segment_sentences, sentence_of, GenerationTrace, TokenEvent, TraceError};

pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_TOP_K: usize = 3;
pub const DEFAULT_TPR_THRESHOLD: f64 = 0.4;
pub const PROMPT_TEMPLATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyName {
    Nor,
    Srr,
    Flr,
    Tpr,
    Drad,
}

impl PolicyName {
    pub const ALL: [PolicyName; 5] = [Self::Nor, Self::Srr, Self::Flr, Self::Tpr, Self::Drad];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Nor => "nor",
            Self::Srr => "srr",
            Self::Flr => "flr",
            Self::Tpr => "tpr",
            Self::Drad => "drad",
        }
    }

    pub fn uses_retrieval(self) -> bool {
        self != Self::Nor
    }
}

impl fmt::Display for PolicyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown policy `{s}` (expected nor, srr, flr, tpr or drad)"))
    }
}

/// How far the query window reaches to the right of an entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryWindow {
    /// `m` tokens on each side of the span.
    #[default]
    Symmetric,
    /// Right side ends `m` tokens after the span's first token, so long
    /// entities leave fewer (possibly no) right-hand tokens.
    Strict,
}

impl FromStr for QueryWindow {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "symmetric" => Ok(Self::Symmetric),
            "strict" => Ok(Self::Strict),
            _ => Err(format!("unknown query window `{s}` (expected symmetric or strict)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyKind {
    pub kind: PolicyName,
    pub tpr_threshold: f64,
    pub detection: DetectionConfig,
    /// Half-width of the query window, in tokens.
    pub m: usize,
    /// Passages retrieved per invocation.
    pub k: usize,
    pub window: QueryWindow,
}

impl Default for PolicyKind {
    fn default() -> Self {
        Self::new(PolicyName::Drad)
    }
}

impl PolicyKind {
    pub fn new(kind: PolicyName) -> Self {
        Self {
            kind,
            tpr_threshold: DEFAULT_TPR_THRESHOLD,
            detection: DetectionConfig::default(),
            m: DEFAULT_WINDOW,
            k: DEFAULT_TOP_K,
            window: QueryWindow::Symmetric,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.kind.uses_retrieval() && self.k == 0 {
            return Err(PolicyError::InvalidPolicy("k must be at least 1".into()));
        }
        if self.kind == PolicyName::Drad {
            if self.m == 0 {
                return Err(PolicyError::InvalidPolicy("m must be at least 1".into()));
            }
            self.detection.validate()?;
        }
        if self.kind == PolicyName::Tpr && !(0.0..=1.0).contains(&self.tpr_threshold) {
            return Err(PolicyError::InvalidPolicy(format!(
                "tpr_threshold must lie in [0, 1], got {}",
                self.tpr_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalInvocation {
    /// Output token position that caused the retrieval.
    pub trigger_token_index: usize,
    pub query: String,
    pub hit_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Revision {
    pub sentence_index: usize,
    pub before: String,
    pub after: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub text: String,
    pub revised: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRun {
    pub policy: PolicyName,
    pub final_text: String,
    pub retrieval_invocations: Vec<RetrievalInvocation>,
    pub revisions: Vec<Revision>,
    /// Tokens in the final output.
    pub token_budget_used: usize,
    pub sentences: Vec<SentenceRecord>,
}

impl PolicyRun {
    fn empty(policy: PolicyName) -> Self {
        Self {
            policy,
            final_text: String::new(),
            retrieval_invocations: Vec::new(),
            revisions: Vec::new(),
            token_budget_used: 0,
            sentences: Vec::new(),
        }
    }
}

pub fn count_retrievals(run: &PolicyRun) -> usize {
    run.retrieval_invocations.len()
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("no tokens outside the entity to build a query from")]
    EmptyQuery,
    #[error("span [{start}, {end}) does not fit a trace of {len} tokens")]
    InvalidSpan { start: usize, end: usize, len: usize },
    #[error("policy {0} needs a retrieval index")]
    MissingIndex(PolicyName),
    #[error("generation failed: {source}")]
    Gateway {
        source: GatewayError,
        partial: Box<PolicyRun>,
    },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

fn check_span(trace: &GenerationTrace, span: &EntitySpan) -> Result<(), PolicyError> {
    if span.token_start >= span.token_end || span.token_end > trace.len() {
        return Err(PolicyError::InvalidSpan {
            start: span.token_start,
            end: span.token_end,
            len: trace.len(),
        });
    }
    Ok(())
}

/// Builds a retrieval query from up to `m` tokens on each side of `span`,
/// leaving out the span itself. The two sides are trimmed and joined by one
/// space.
pub fn formulate_query(
    trace: &GenerationTrace,
    span: &EntitySpan,
    m: usize,
    window: QueryWindow,
) -> Result<String, PolicyError> {
    check_span(trace, span)?;
    if m == 0 {
        return Err(PolicyError::InvalidPolicy("m must be at least 1".into()));
    }
    let left_start = span.token_start.saturating_sub(m);
    let right_end = match window {
        QueryWindow::Symmetric => span.token_end + m,
        QueryWindow::Strict => span.token_start + m + 1,
    }
    .min(trace.len());
    let left = trace.text_of(left_start, span.token_start).trim();
    let right = trace.text_of(span.token_end, right_end).trim();
    let query = match (left.is_empty(), right.is_empty()) {
        (true, true) => return Err(PolicyError::EmptyQuery),
        (false, true) => left.to_string(),
        (true, false) => right.to_string(),
        (false, false) => format!("{left} {right}"),
    };
    Ok(query)
}

/// Output text before the span's first token.
pub fn truncate_at(trace: &GenerationTrace, span: &EntitySpan) -> Result<String, PolicyError> {
    check_span(trace, span)?;
    Ok(trace.text_of(0, span.token_start).to_string())
}

/// Preamble, one `Context [n]: ...` line per passage in rank order, the task
/// prompt, then the output prefix the model is to continue.
pub fn build_correction_prompt(
    system_preamble: &str,
    passages: &[PassageHit],
    original_prompt: &str,
    truncated_output: &str,
) -> String {
    let mut prompt = String::from(system_preamble);
    for (n, hit) in passages.iter().enumerate() {
        prompt.push_str(&format!("Context [{}]: {}\n", n + 1, hit.passage.text));
    }
    prompt.push_str(original_prompt);
    prompt.push_str(truncated_output);
    prompt
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub version: u32,
    pub preamble: String,
    /// Worked examples placed after the preamble.
    pub few_shot: String,
    /// Task line; `{question}` is replaced by the question.
    pub task: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            version: PROMPT_TEMPLATE_VERSION,
            preamble: "Answer the question. Use the context passages when they are relevant. \
                       Reason step by step and finish with \"So the answer is <answer>.\"\n\n"
                .into(),
            few_shot: String::new(),
            task: "Question: {question}\nAnswer: ".into(),
        }
    }
}

impl PromptTemplate {
    pub fn system_preamble(&self) -> String {
        format!("{}{}", self.preamble, self.few_shot)
    }

    pub fn task_prompt(&self, question: &str) -> String {
        self.task.replace("{question}", question)
    }
}

/// Generation and recognition settings shared by every policy.
pub struct RunOptions {
    pub template: PromptTemplate,
    pub extractor: EntityExtractor,
    pub stop_sequences: Vec<String>,
    pub top_logprobs: usize,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            template: PromptTemplate::default(),
            extractor: EntityExtractor::default(),
            stop_sequences: vec!["\n\n".into(), "\nQuestion:".into()],
            top_logprobs: 5,
            temperature: 0.0,
            seed: None,
        }
    }
}

impl fmt::Debug for RunOptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunOptions")
            .field("template", &self.template)
            .field("extractor", &self.extractor.backend_name())
            .field("stop_sequences", &self.stop_sequences)
            .field("top_logprobs", &self.top_logprobs)
            .field("temperature", &self.temperature)
            .field("seed", &self.seed)
            .finish()
    }
}

/// Result of one generation call.
struct Draft {
    trace: GenerationTrace,
    /// Generation stopped on its own (not cut by us or by the token limit).
    natural_end: bool,
}

struct Runner<'a> {
    question: &'a str,
    policy: &'a PolicyKind,
    llm: &'a dyn LlmGateway,
    index: Option<&'a IndexHandle>,
    budget: usize,
    options: &'a RunOptions,
    preamble: String,
    task: String,
    run: PolicyRun,
    output: GenerationTrace,
    context: Vec<PassageHit>,
}

impl<'a> Runner<'a> {
    fn remaining(&self) -> usize {
        self.budget.saturating_sub(self.output.len())
    }

    fn request(&self, prompt: String, max_tokens: usize) -> GenerationRequest {
        GenerationRequest {
            prompt,
            max_tokens,
            stop_sequences: self.options.stop_sequences.clone(),
            top_logprobs: self.options.top_logprobs,
            temperature: self.options.temperature,
            seed: self.options.seed,
        }
    }

    fn prompt(&self, prefix: &str) -> String {
        build_correction_prompt(&self.preamble, &self.context, &self.task, prefix)
    }

    fn gateway_error(&mut self, source: GatewayError) -> PolicyError {
        self.finalize_text();
        PolicyError::Gateway {
            source,
            partial: Box::new(self.run.clone()),
        }
    }

    fn finalize_text(&mut self) {
        self.run.final_text = self.output.text.clone();
        self.run.token_budget_used = self.output.len();
    }

    fn retrieve(&mut self, query: String, trigger: usize) -> Result<(), PolicyError> {
        let index = self.index.ok_or(PolicyError::MissingIndex(self.policy.kind))?;
        let hits = index.search(&query, self.policy.k)?;
        self.run.retrieval_invocations.push(RetrievalInvocation {
            trigger_token_index: trigger,
            query,
            hit_ids: hits.iter().map(|h| h.passage.id.clone()).collect(),
        });
        self.context = hits;
        Ok(())
    }

    /// Generates from the current output. With `one_sentence` set the stream
    /// is cut as soon as the first sentence is known to be complete.
    fn draft(&mut self, one_sentence: bool) -> Result<Draft, PolicyError> {
        let max_tokens = self.remaining();
        let request = self.request(self.prompt(&self.output.text), max_tokens);
        let mut seen = GenerationTrace::default();
        let mut cut = false;
        let mut failure = None;
        let result = self.llm.stream_generate(&request, &mut |event: &TokenEvent| {
            if !one_sentence {
                return ControlFlow::Continue(());
            }
            if let Err(e) = seen.push_event(event) {
                failure = Some(e);
                return ControlFlow::Break(());
            }
            if segment_sentences(&seen).len() >= 2 {
                cut = true;
                return ControlFlow::Break(());
            }
            ControlFlow::Continue(())
        });
        if let Some(e) = failure {
            return Err(e.into());
        }
        let trace = result.map_err(|e| self.gateway_error(e))?;
        let natural_end = !cut && trace.len() < max_tokens;
        Ok(Draft { trace, natural_end })
    }

    fn append(&mut self, events: &[TokenEvent]) -> Result<(), PolicyError> {
        for e in events {
            self.output.push_event(e)?;
        }
        Ok(())
    }

    fn run_single(&mut self) -> Result<(), PolicyError> {
        if self.policy.kind == PolicyName::Srr {
            self.retrieve(self.question.to_string(), 0)?;
        }
        let draft = self.draft(false)?;
        self.append(&draft.trace.tokens)?;
        self.run.sentences = segment_sentences(&self.output)
            .iter()
            .map(|s| SentenceRecord {
                text: self.output.text_of(s.token_start, s.token_end).to_string(),
                revised: false,
            })
            .collect();
        Ok(())
    }

    /// Sentence-at-a-time loop shared by `flr` and `tpr`.
    fn run_per_sentence(&mut self) -> Result<(), PolicyError> {
        while self.remaining() > 0 {
            let draft = self.draft(true)?;
            let Some(first) = segment_sentences(&draft.trace).first().copied() else {
                break;
            };
            let sentence = &draft.trace.tokens[first.token_start..first.token_end];
            let before = draft.trace.text_of(first.token_start, first.token_end).to_string();
            let start = self.output.len();

            let query = match self.policy.kind {
                PolicyName::Tpr => {
                    let threshold = self.policy.tpr_threshold;
                    match sentence.iter().position(|t| t.probability < threshold) {
                        None => None,
                        Some(pos) => {
                            let kept: String = sentence
                                .iter()
                                .filter(|t| t.probability >= threshold)
                                .map(|t| t.text.as_str())
                                .collect();
                            let kept = kept.split_whitespace().collect::<Vec<_>>().join(" ");
                            let query = if kept.is_empty() { self.question.to_string() } else { kept };
                            Some((query, start + pos))
                        }
                    }
                }
                _ => Some((before.trim().to_string(), start)),
            };

            let Some((query, trigger)) = query else {
                let natural_end = draft.natural_end && first.token_end == draft.trace.len();
                self.append(&draft.trace.tokens[..first.token_end])?;
                self.run.sentences.push(SentenceRecord { text: before, revised: false });
                if natural_end {
                    break;
                }
                continue;
            };

            self.retrieve(query, trigger)?;
            let regen = self.draft(true)?;
            let (source, natural_end) = match segment_sentences(&regen.trace).first().copied() {
                Some(s) => (
                    regen.trace.tokens[..s.token_end].to_vec(),
                    regen.natural_end && s.token_end == regen.trace.len(),
                ),
                None => (
                    sentence.to_vec(),
                    draft.natural_end && first.token_end == draft.trace.len(),
                ),
            };
            self.append(&source)?;
            let after = self.output.text_of(start, self.output.len()).to_string();
            self.run.revisions.push(Revision {
                sentence_index: self.run.sentences.len(),
                before,
                after: after.clone(),
            });
            self.run.sentences.push(SentenceRecord { text: after, revised: true });
            if natural_end {
                break;
            }
        }
        Ok(())
    }

    fn run_drad(&mut self) -> Result<(), PolicyError> {
        let mut tracker = EntityTracker::new();
        let mut revised: BTreeSet<usize> = BTreeSet::new();
        let m = self.policy.m;
        let config = self.policy.detection;
        let extractor = &self.options.extractor;

        while self.remaining() > 0 {
            let max_tokens = self.remaining();
            let request = self.request(self.prompt(&self.output.text), max_tokens);
            let mut work = self.output.clone();
            let mut pending: Option<EntitySpan> = None;
            let mut failure: Option<PolicyError> = None;
            let mut cut = false;

            // Scores freshly closed entities and returns the first flagged one.
            let scan = |work: &GenerationTrace,
                            tracker: &mut EntityTracker,
                            finished: bool|
             -> Result<Option<EntitySpan>, PolicyError> {
                let sentences = segment_sentences(work);
                for span in tracker.poll(extractor, work, finished) {
                    let in_revised =
                        sentence_of(&sentences, span.token_start).is_some_and(|s| revised.contains(&s));
                    if in_revised {
                        continue;
                    }
                    if detect(work, &span, &config)?.is_hallucination {
                        return Ok(Some(span));
                    }
                }
                Ok(None)
            };

            let result = self.llm.stream_generate(&request, &mut |event: &TokenEvent| {
                if let Err(e) = work.push_event(event) {
                    failure = Some(e.into());
                    return ControlFlow::Break(());
                }
                if pending.is_none() {
                    match scan(&work, &mut tracker, false) {
                        Ok(found) => pending = found,
                        Err(e) => {
                            failure = Some(e);
                            return ControlFlow::Break(());
                        }
                    }
                }
                match &pending {
                    Some(span) if work.len() >= span.token_end + m => {
                        cut = true;
                        ControlFlow::Break(())
                    }
                    _ => ControlFlow::Continue(()),
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
            if let Err(e) = result {
                return Err(self.gateway_error(e));
            }
            let generated = work.len() - self.output.len();
            if pending.is_none() {
                pending = scan(&work, &mut tracker, true)?;
            }

            let Some(span) = pending else {
                self.output = work;
                if !cut && generated < max_tokens {
                    break;
                }
                continue;
            };

            let sentences = segment_sentences(&work);
            let sentence_index = sentence_of(&sentences, span.token_start).unwrap_or(sentences.len());
            let before = sentences
                .get(sentence_index)
                .map(|s| work.text_of(s.token_start, s.token_end).to_string())
                .unwrap_or_default();
            let query = match formulate_query(&work, &span, m, self.policy.window) {
                Err(PolicyError::EmptyQuery) => self.question.to_string(),
                other => other?,
            };
            self.retrieve(query, span.token_start)?;
            self.output = work.prefix(span.token_start);
            tracker.truncate(span.token_start);
            revised.insert(sentence_index);
            self.run.revisions.push(Revision {
                sentence_index,
                before,
                after: String::new(),
            });
        }

        let sentences = segment_sentences(&self.output);
        for rev in &mut self.run.revisions {
            rev.after = sentences
                .get(rev.sentence_index)
                .map(|s| self.output.text_of(s.token_start, s.token_end).to_string())
                .unwrap_or_default();
        }
        self.run.sentences = sentences
            .iter()
            .enumerate()
            .map(|(i, s)| SentenceRecord {
                text: self.output.text_of(s.token_start, s.token_end).to_string(),
                revised: revised.contains(&i),
            })
            .collect();
        Ok(())
    }
}

/// Answers `question` under `policy`, spending at most `budget` output tokens.
///
/// Running out of budget is not an error; the run simply ends. A gateway
/// failure returns everything produced so far in [`PolicyError::Gateway`].
pub fn run_policy(
    question: &str,
    policy: &PolicyKind,
    llm: &dyn LlmGateway,
    index: Option<&IndexHandle>,
    budget: usize,
    options: &RunOptions,
) -> Result<PolicyRun, PolicyError> {
    policy.validate()?;
    if budget == 0 {
        return Err(PolicyError::InvalidPolicy("token budget must be at least 1".into()));
    }
    if policy.kind.uses_retrieval() && index.is_none() {
        return Err(PolicyError::MissingIndex(policy.kind));
    }
    let mut runner = Runner {
        question,
        policy,
        llm,
        index,
        budget,
        options,
        preamble: options.template.system_preamble(),
        task: options.template.task_prompt(question),
        run: PolicyRun::empty(policy.kind),
        output: GenerationTrace::default(),
        context: Vec::new(),
    };
    match policy.kind {
        PolicyName::Nor | PolicyName::Srr => runner.run_single()?,
        PolicyName::Flr | PolicyName::Tpr => runner.run_per_sentence()?,
        PolicyName::Drad => runner.run_drad()?,
    }
    runner.finalize_text();
    Ok(runner.run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBranch, MockGateway, MockScript, PromptMatcher};
    use crate::retrieval::{segment_corpus, Document, InvertedIndex};
    use crate::trace::RawToken;

    fn trace(tokens: &[&str]) -> GenerationTrace {
        GenerationTrace::from_tokens(tokens.iter().map(|t| RawToken::new(*t, 0.9)).collect()).unwrap()
    }

    fn span(t: &GenerationTrace, start: usize, end: usize) -> EntitySpan {
        let cs = t.tokens[start].char_start;
        let ce = t.tokens[end - 1].char_end;
        EntitySpan {
            token_start: start,
            token_end: end,
            char_start: cs,
            char_end: ce,
            label: "X".into(),
            surface: t.text[cs..ce].to_string(),
        }
    }

    fn ten() -> GenerationTrace {
        trace(&["t1", " t2", " t3", " t4", " t5", " t6", " t7", " t8", " t9", " t10"])
    }

    #[test]
    fn query_window_worked_example() {
        let t = ten();
        let s = span(&t, 3, 5);
        assert_eq!(formulate_query(&t, &s, 2, QueryWindow::Symmetric).unwrap(), "t2 t3 t6 t7");
        assert_eq!(formulate_query(&t, &s, 2, QueryWindow::Strict).unwrap(), "t2 t3 t6");
        let long = span(&t, 3, 6);
        assert_eq!(formulate_query(&t, &long, 2, QueryWindow::Strict).unwrap(), "t2 t3");
    }

    #[test]
    fn query_window_clamps() {
        let t = ten();
        assert_eq!(formulate_query(&t, &span(&t, 0, 1), 3, QueryWindow::Symmetric).unwrap(), "t2 t3 t4");
        assert_eq!(formulate_query(&t, &span(&t, 9, 10), 2, QueryWindow::Symmetric).unwrap(), "t8 t9");
        let only = trace(&["Paris"]);
        assert!(matches!(
            formulate_query(&only, &span(&only, 0, 1), 3, QueryWindow::Symmetric),
            Err(PolicyError::EmptyQuery)
        ));
    }

    #[test]
    fn truncation() {
        let t = trace(&["He", " was", " born", " in ", "Paris", " in", " 1950"]);
        assert_eq!(truncate_at(&t, &span(&t, 4, 5)).unwrap(), "He was born in ");
        assert_eq!(truncate_at(&t, &span(&t, 0, 1)).unwrap(), "");
        assert_eq!(truncate_at(&t, &span(&t, 6, 7)).unwrap(), "He was born in Paris in");
    }

    fn hit(id: &str, text: &str, rank: usize) -> PassageHit {
        PassageHit {
            passage: crate::retrieval::Passage {
                id: id.into(),
                doc_title: "d".into(),
                text: text.into(),
                token_count: 1,
            },
            score: 1.0,
            rank,
        }
    }

    #[test]
    fn prompt_template() {
        assert_eq!(build_correction_prompt("P|", &[], "Q|", "T"), "P|Q|T");
        let hits = [hit("a#0", "same", 1), hit("b#0", "same", 2), hit("c#0", "other", 3)];
        let p = build_correction_prompt("P\n", &hits, "Q\n", "T");
        assert_eq!(p, "P\nContext [1]: same\nContext [2]: same\nContext [3]: other\nQ\nT");
    }

    fn index() -> IndexHandle {
        let docs = [
            Document::new("Bill Clinton", "Bill Clinton was born in Hope, Arkansas, in 1946."),
            Document::new("Georgia", "Georgia is a state in the southeastern United States."),
        ];
        IndexHandle::in_memory(InvertedIndex::build(segment_corpus(docs.iter())).unwrap())
    }

    fn georgia_gateway() -> MockGateway {
        let born = |place: (&'static str, f64)| {
            vec![("Bill", 0.95), (" Clinton", 0.9), (" was", 0.95), (" born", 0.9), (" in ", 0.9), place, (".", 0.9)]
        };
        MockGateway::new(MockScript {
            branches: vec![
                MockBranch::from_probabilities(PromptMatcher::Contains("Arkansas".into()), &born(("Arkansas", 0.8))),
                MockBranch::from_probabilities(PromptMatcher::Contains("Question:".into()), &born(("Georgia", 0.1))),
            ],
        })
        .unwrap()
    }

    #[test]
    fn drad_corrects_georgia() {
        let g = georgia_gateway();
        let idx = index();
        let run = run_policy(
            "Where was Bill Clinton born?",
            &PolicyKind::new(PolicyName::Drad),
            &g,
            Some(&idx),
            64,
            &RunOptions::default(),
        )
        .unwrap();
        assert_eq!(run.final_text, "Bill Clinton was born in Arkansas.");
        assert_eq!(count_retrievals(&run), 1);
        assert_eq!(run.retrieval_invocations[0].trigger_token_index, 5);
        assert_eq!(run.retrieval_invocations[0].hit_ids[0], "Bill Clinton#0");
        assert_eq!(run.revisions.len(), 1);
        assert_eq!(run.revisions[0].before, "Bill Clinton was born in Georgia.");
        assert_eq!(run.revisions[0].after, "Bill Clinton was born in Arkansas.");
        assert!(run.sentences[0].revised);
        assert!(g.requests()[1].prompt.ends_with("Answer: Bill Clinton was born in "));
    }

    #[test]
    fn baseline_policies_count_retrievals() {
        let g = georgia_gateway();
        let idx = index();
        let q = "Where was Bill Clinton born?";
        let opts = RunOptions::default();
        let nor = run_policy(q, &PolicyKind::new(PolicyName::Nor), &g, None, 64, &opts).unwrap();
        assert_eq!(count_retrievals(&nor), 0);
        assert_eq!(nor.final_text, "Bill Clinton was born in Georgia.");
        let srr = run_policy(q, &PolicyKind::new(PolicyName::Srr), &g, Some(&idx), 64, &opts).unwrap();
        assert_eq!(count_retrievals(&srr), 1);
        assert_eq!(srr.retrieval_invocations[0].query, q);
        let flr = run_policy(q, &PolicyKind::new(PolicyName::Flr), &g, Some(&idx), 64, &opts).unwrap();
        assert_eq!(count_retrievals(&flr), flr.sentences.len());
        let tpr = run_policy(q, &PolicyKind::new(PolicyName::Tpr), &g, Some(&idx), 64, &opts).unwrap();
        assert_eq!(count_retrievals(&tpr), 1);
        assert_eq!(tpr.retrieval_invocations[0].query, "Bill Clinton was born in .");
        assert_eq!(tpr.final_text, "Bill Clinton was born in Arkansas.");
    }

    #[test]
    fn flr_one_retrieval_per_sentence() {
        let g = MockGateway::new(MockScript {
            branches: vec![MockBranch::from_probabilities(
                PromptMatcher::Contains(String::new()),
                &[("A", 0.9), (" one.", 0.9), (" B", 0.9), (" two.", 0.9), (" C", 0.9), (" three.", 0.9)],
            )],
        })
        .unwrap();
        let idx = index();
        let run = run_policy("q", &PolicyKind::new(PolicyName::Flr), &g, Some(&idx), 64, &RunOptions::default()).unwrap();
        assert_eq!(run.final_text, "A one. B two. C three.");
        assert_eq!(run.sentences.len(), 3);
        assert_eq!(count_retrievals(&run), 3);
        assert_eq!(run.retrieval_invocations[1].query, "B two.");
        assert_eq!(run.retrieval_invocations[1].trigger_token_index, 2);
    }

    #[test]
    fn budget_ends_run_without_error() {
        let g = georgia_gateway();
        let run = run_policy("q Question:", &PolicyKind::new(PolicyName::Nor), &g, None, 3, &RunOptions::default()).unwrap();
        assert_eq!(run.token_budget_used, 3);
        assert_eq!(run.final_text, "Bill Clinton was");
    }

    #[test]
    fn gateway_failure_carries_partial_run() {
        let g = MockGateway::new(MockScript::default()).unwrap();
        let err = run_policy("q", &PolicyKind::new(PolicyName::Nor), &g, None, 8, &RunOptions::default()).unwrap_err();
        assert!(matches!(err, PolicyError::Gateway { .. }));
    }

    #[test]
    fn validation() {
        let g = georgia_gateway();
        let opts = RunOptions::default();
        assert!(matches!(
            run_policy("q", &PolicyKind::new(PolicyName::Srr), &g, None, 8, &opts),
            Err(PolicyError::MissingIndex(PolicyName::Srr))
        ));
        let bad = PolicyKind { m: 0, ..PolicyKind::new(PolicyName::Drad) };
        assert!(bad.validate().is_err());
        let bad = PolicyKind { tpr_threshold: 1.5, ..PolicyKind::new(PolicyName::Tpr) };
        assert!(bad.validate().is_err());
        assert_eq!("DRAD".parse::<PolicyName>().unwrap(), PolicyName::Drad);
    }
}
