//! Detection AUC, QA answer scoring and policy evaluation.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity::EntityExtractor;
use crate::gateway::LlmGateway;
use crate::retrieval::IndexHandle;
use crate::rhd::{
    baseline_score, score_passage, score_passage_entropy, BaselineKind, DetectionConfig, PoolingMethod, ScoringError,
};
use crate::sek::{count_retrievals, run_policy, PolicyKind, PolicyName, RunOptions};
use crate::trace::{GenerationTrace, TokenRecord, TraceError};

pub const DEFAULT_ANSWER_MARKER: &str = "the answer is";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("both labels must be present")]
    DegenerateLabels,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score {index} is not a number")]
    InvalidScore { index: usize },
    #[error("{path}:{line}: {message}")]
    Dataset { path: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(index) = scores.iter().position(|s| s.is_nan()) {
        return Err(EvalError::InvalidScore { index });
    }
    let positives = labels.iter().filter(|&&l| l).count() as u128;
    let negatives = labels.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann-Whitney U, kept in integers until the final division.
    let mut doubled: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        doubled += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        i = j;
    }
    Ok(doubled as f64 / (2 * positives * negatives) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerMode {
    #[default]
    Pattern,
    Boolean,
}

impl FromStr for AnswerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pattern" => Ok(Self::Pattern),
            "boolean" => Ok(Self::Boolean),
            _ => Err(format!("unknown answer mode `{s}` (expected pattern or boolean)")),
        }
    }
}

/// Pulls the final answer out of a reasoning chain: the rest of the line
/// after the last `marker` (ASCII case-insensitive), without trailing
/// punctuation. Boolean mode reduces that to the first `yes`/`no` word.
pub fn extract_answer(output: &str, mode: AnswerMode, marker: &str) -> String {
    if marker.is_empty() {
        return String::new();
    }
    let haystack = output.to_ascii_lowercase();
    let Some(at) = haystack.rfind(&marker.to_ascii_lowercase()) else {
        return String::new();
    };
    let tail = &output[at + marker.len()..];
    let line = tail.split('\n').next().unwrap_or_default();
    let answer = line
        .trim()
        .trim_end_matches(|c: char| c.is_whitespace() || matches!(c, '.' | '!' | '?' | ',' | ';' | ':'))
        .trim_start_matches(':')
        .trim();
    match mode {
        AnswerMode::Pattern => answer.to_string(),
        AnswerMode::Boolean => answer
            .split(|c: char| !c.is_alphanumeric())
            .map(str::to_ascii_lowercase)
            .find(|w| w == "yes" || w == "no")
            .unwrap_or_default(),
    }
}

/// Lowercase, drop punctuation, drop English articles, squeeze whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QaScores {
    pub em: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

fn token_overlap(prediction: &[&str], gold: &[&str]) -> (f64, f64, f64) {
    if prediction.is_empty() || gold.is_empty() {
        let same = prediction.is_empty() && gold.is_empty();
        let v = if same { 1.0 } else { 0.0 };
        return (v, v, v);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in prediction {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return (0.0, 0.0, 0.0);
    }
    let precision = common as f64 / prediction.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    (2.0 * precision * recall / (precision + recall), precision, recall)
}

/// Exact match and token-level overlap against the best-matching gold.
pub fn qa_metrics(prediction: &str, gold_answers: &[String]) -> QaScores {
    let pred = normalize_answer(prediction);
    let pred_tokens: Vec<&str> = pred.split_whitespace().collect();
    let mut best = QaScores::default();
    let mut first = true;
    for gold in gold_answers {
        let gold = normalize_answer(gold);
        if gold == pred {
            best.em = 1.0;
        }
        let gold_tokens: Vec<&str> = gold.split_whitespace().collect();
        let (f1, precision, recall) = token_overlap(&pred_tokens, &gold_tokens);
        if first || f1 > best.f1 {
            best.f1 = f1;
            best.precision = precision;
            best.recall = recall;
            first = false;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    #[serde(alias = "gold_answers")]
    pub answers: Vec<String>,
}

fn read_jsonl<T>(path: &Path, parse: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, EvalError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line).map_err(|message| EvalError::Dataset {
            path: path.display().to_string(),
            line: i + 1,
            message,
        })?);
    }
    Ok(out)
}

/// JSON lines of `{id, question, answers: [...]}`.
pub fn load_qa_dataset(path: &Path) -> Result<Vec<QaExample>, EvalError> {
    read_jsonl(path, |line| {
        let ex: QaExample = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if ex.answers.is_empty() {
            return Err(format!("example `{}` has no gold answers", ex.id));
        }
        Ok(ex)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPassage {
    pub trace: GenerationTrace,
    /// True when the passage is annotated as hallucinated.
    pub label: bool,
}

#[derive(Deserialize)]
struct LabeledRecord {
    text: String,
    tokens: Vec<TokenRecord>,
    label: u8,
}

pub fn parse_labeled_line(line: &str) -> Result<LabeledPassage, String> {
    let rec: LabeledRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let label = match rec.label {
        0 => false,
        1 => true,
        other => return Err(format!("label must be 0 or 1, got {other}")),
    };
    let tokens = rec
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| t.to_raw(i))
        .collect::<Result<Vec<_>, TraceError>>()
        .map_err(|e| e.to_string())?;
    let trace = GenerationTrace::aligned(rec.text, tokens).map_err(|e| e.to_string())?;
    Ok(LabeledPassage { trace, label })
}

/// JSON lines of `{text, tokens: [...], label}`.
pub fn load_labeled_passages(path: &Path) -> Result<Vec<LabeledPassage>, EvalError> {
    read_jsonl(path, parse_labeled_line)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "scorer", content = "pooling", rename_all = "snake_case")]
pub enum DetectorSpec {
    RhdProbability(PoolingMethod),
    RhdEntropy(PoolingMethod),
    Baseline(BaselineKind),
}

impl DetectorSpec {
    /// Every pooling variant of both entity scorers plus the token baselines.
    pub fn standard_set() -> Vec<DetectorSpec> {
        let mut specs: Vec<_> = PoolingMethod::ALL.into_iter().map(Self::RhdProbability).collect();
        specs.extend(PoolingMethod::ALL.into_iter().map(Self::RhdEntropy));
        specs.extend(BaselineKind::ALL.into_iter().map(Self::Baseline));
        specs
    }

    pub fn id(&self) -> String {
        match self {
            Self::RhdProbability(p) => format!("rhd_prob_{p}"),
            Self::RhdEntropy(p) => format!("rhd_entropy_{p}"),
            Self::Baseline(b) => b.as_str().to_string(),
        }
    }

    /// Higher means more likely hallucinated.
    pub fn score(
        &self,
        trace: &GenerationTrace,
        extractor: &EntityExtractor,
        base: &DetectionConfig,
    ) -> Result<f64, ScoringError> {
        match *self {
            Self::RhdProbability(prob_pooling) => {
                let config = DetectionConfig { prob_pooling, ..*base };
                Ok(score_passage(trace, &extractor.recognize(trace), &config))
            }
            Self::RhdEntropy(entropy_pooling) => {
                let config = DetectionConfig { entropy_pooling, ..*base };
                score_passage_entropy(trace, &extractor.recognize(trace), &config)
            }
            Self::Baseline(kind) => baseline_score(trace, kind),
        }
    }
}

impl fmt::Display for DetectorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub detector: String,
    pub auc: f64,
}

/// One AUC per detector, in the order given.
pub fn evaluate_detection(
    passages: &[LabeledPassage],
    detectors: &[DetectorSpec],
    extractor: &EntityExtractor,
    config: &DetectionConfig,
) -> Result<Vec<DetectionRow>, EvalError> {
    let labels: Vec<bool> = passages.iter().map(|p| p.label).collect();
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(EvalError::DegenerateLabels);
    }
    detectors
        .iter()
        .map(|d| {
            let scores = passages
                .iter()
                .map(|p| d.score(&p.trace, extractor, config))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(DetectionRow {
                detector: d.id(),
                auc: auc(&scores, &labels)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub output: String,
    pub prediction: String,
    pub em: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub retrievals: usize,
    pub sentences: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregates {
    pub em: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub mean_retrievals: f64,
}

impl Aggregates {
    /// Means over the successful records; all zero when there are none.
    pub fn from_records(records: &[ExampleRecord]) -> Self {
        let ok: Vec<&ExampleRecord> = records.iter().filter(|r| r.ok).collect();
        if ok.is_empty() {
            return Self::default();
        }
        let n = ok.len() as f64;
        let mean = |f: fn(&ExampleRecord) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / n;
        let em = mean(|r| r.em);
        Self {
            em,
            f1: mean(|r| r.f1),
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            accuracy: em,
            mean_retrievals: mean(|r| r.retrievals as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub policy: PolicyName,
    pub examples: Vec<ExampleRecord>,
    pub completed: usize,
    pub failed: usize,
    pub aggregates: Aggregates,
}

impl MetricReport {
    pub fn from_records(policy: PolicyName, examples: Vec<ExampleRecord>) -> Self {
        let failed = examples.iter().filter(|r| !r.ok).count();
        Self {
            policy,
            completed: examples.len() - failed,
            failed,
            aggregates: Aggregates::from_records(&examples),
            examples,
        }
    }
}

/// Everything `evaluate_policy` needs besides the dataset and the policy.
pub struct EvalSetup<'a> {
    pub llm: &'a dyn LlmGateway,
    pub index: Option<&'a IndexHandle>,
    pub budget: usize,
    pub options: &'a RunOptions,
    pub answer_mode: AnswerMode,
    pub marker: &'a str,
    /// Examples in flight at once; 0 is treated as 1.
    pub concurrency: usize,
}

fn evaluate_example(example: &QaExample, policy: &PolicyKind, setup: &EvalSetup<'_>) -> ExampleRecord {
    match run_policy(&example.question, policy, setup.llm, setup.index, setup.budget, setup.options) {
        Ok(run) => {
            let prediction = extract_answer(&run.final_text, setup.answer_mode, setup.marker);
            let s = qa_metrics(&prediction, &example.answers);
            ExampleRecord {
                id: example.id.clone(),
                ok: true,
                error: None,
                output: run.final_text.clone(),
                prediction,
                em: s.em,
                f1: s.f1,
                precision: s.precision,
                recall: s.recall,
                retrievals: count_retrievals(&run),
                sentences: run.sentences.len(),
            }
        }
        Err(e) => {
            log::warn!("example {} failed: {e}", example.id);
            ExampleRecord {
                id: example.id.clone(),
                ok: false,
                error: Some(e.to_string()),
                output: String::new(),
                prediction: String::new(),
                em: 0.0,
                f1: 0.0,
                precision: 0.0,
                recall: 0.0,
                retrievals: 0,
                sentences: 0,
            }
        }
    }
}

/// Runs `policy` on every example and scores the extracted answers.
/// Records keep dataset order whatever the concurrency.
pub fn evaluate_policy(examples: &[QaExample], policy: &PolicyKind, setup: &EvalSetup<'_>) -> MetricReport {
    let workers = setup.concurrency.max(1).min(examples.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<ExampleRecord>>> = Mutex::new(vec![None; examples.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(example) = examples.get(i) else {
                    break;
                };
                let record = evaluate_example(example, policy, setup);
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(record);
            });
        }
    });
    let records = slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.expect("every example is evaluated"))
        .collect();
    MetricReport::from_records(policy.kind, records)
}
