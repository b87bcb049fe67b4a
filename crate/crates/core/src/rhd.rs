//! Entity-level hallucination scoring.
//!
//! An entity's probability is a pooling of its tokens' generation
//! probabilities; its entropy is a pooling of per-token output entropies. An
//! entity is flagged when its probability falls below `theta1` or (if the
//! entropy clause is enabled) its entropy exceeds `theta2`.
//!
//! Passage-level scores are oriented so that higher means more likely
//! hallucinated; token-level baselines use the same orientation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity::EntitySpan;
use crate::trace::{GenerationTrace, TokenEvent, PROBABILITY_SLACK};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("cannot pool an empty list")]
    EmptyInput,
    #[error("token {index}: invalid distribution ({reason})")]
    InvalidDistribution { index: usize, reason: String },
    #[error("invalid detection config: {0}")]
    InvalidConfig(String),
    #[error("entity span [{start}, {end}) invalid for trace of {len} tokens")]
    InvalidSpan { start: usize, end: usize, len: usize },
}

/// Aggregation applied to the per-token statistics of an entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMethod {
    Max,
    Min,
    First,
    Average,
}

impl PoolingMethod {
    pub const ALL: [PoolingMethod; 4] = [Self::Max, Self::Min, Self::First, Self::Average];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Max => "max",
            Self::Min => "min",
            Self::First => "first",
            Self::Average => "average",
        }
    }
}

impl fmt::Display for PoolingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolingMethod {
    type Err = ScoringError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(Self::Max),
            "min" => Ok(Self::Min),
            "first" => Ok(Self::First),
            "average" | "avg" | "mean" => Ok(Self::Average),
            other => Err(ScoringError::InvalidConfig(format!("unknown pooling {other:?}"))),
        }
    }
}

pub fn pool(values: &[f64], method: PoolingMethod) -> Result<f64, ScoringError> {
    let (&first, _) = values.split_first().ok_or(ScoringError::EmptyInput)?;
    Ok(match method {
        PoolingMethod::Max => values.iter().copied().fold(first, f64::max),
        PoolingMethod::Min => values.iter().copied().fold(first, f64::min),
        PoolingMethod::First => first,
        PoolingMethod::Average => values.iter().sum::<f64>() / values.len() as f64,
    })
}

/// Entropy of a uniform choice among 50 options.
pub const DEFAULT_THETA2: f64 = 3.912_023_005_428_146;
pub const DEFAULT_THETA1: f64 = 0.40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    pub theta1: f64,
    pub theta2: f64,
    pub prob_pooling: PoolingMethod,
    pub entropy_pooling: PoolingMethod,
    pub entropy_enabled: bool,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            theta1: DEFAULT_THETA1,
            theta2: DEFAULT_THETA2,
            prob_pooling: PoolingMethod::Average,
            entropy_pooling: PoolingMethod::Max,
            entropy_enabled: false,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<(), ScoringError> {
        if !(0.0..=1.0).contains(&self.theta1) {
            return Err(ScoringError::InvalidConfig(format!(
                "theta1 must lie in [0, 1], got {}",
                self.theta1
            )));
        }
        if self.theta2.is_nan() || self.theta2 < 0.0 {
            return Err(ScoringError::InvalidConfig(format!(
                "theta2 must be non-negative, got {}",
                self.theta2
            )));
        }
        Ok(())
    }

    /// The two-threshold decision rule.
    pub fn is_hallucination(&self, entity_probability: f64, entity_entropy: f64) -> bool {
        entity_probability < self.theta1 || (self.entropy_enabled && entity_entropy > self.theta2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationVerdict {
    pub entity: EntitySpan,
    pub entity_probability: f64,
    pub entity_entropy: f64,
    pub is_hallucination: bool,
}

fn span_tokens<'a>(trace: &'a GenerationTrace, span: &EntitySpan) -> Result<&'a [TokenEvent], ScoringError> {
    if span.token_start >= span.token_end || span.token_end > trace.len() {
        return Err(ScoringError::InvalidSpan {
            start: span.token_start,
            end: span.token_end,
            len: trace.len(),
        });
    }
    Ok(&trace.tokens[span.token_start..span.token_end])
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Shannon entropy (nats) of a token's output distribution.
///
/// Only the top alternatives are observed; the unobserved mass
/// `r = max(0, 1 - sum)` counts as one extra outcome, so the result is a lower
/// bound that is exact when the alternatives cover the support. A residual no
/// larger than [`PROBABILITY_SLACK`] is rounding noise and counts as zero. A
/// token with no alternatives is treated as having observed only itself.
pub fn token_entropy(event: &TokenEvent) -> Result<f64, ScoringError> {
    let invalid = |reason: String| ScoringError::InvalidDistribution {
        index: event.index,
        reason,
    };
    let fallback = [event.probability];
    let probs: Vec<f64> = if event.top_alternatives.is_empty() {
        fallback.to_vec()
    } else {
        event.top_alternatives.iter().map(|a| a.probability).collect()
    };
    let mut sum = 0.0;
    for &p in &probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(invalid(format!("probability {p} outside [0, 1]")));
        }
        sum += p;
    }
    if sum > 1.0 + PROBABILITY_SLACK {
        return Err(invalid(format!("probabilities sum to {sum}")));
    }
    let residual = if 1.0 - sum > PROBABILITY_SLACK { 1.0 - sum } else { 0.0 };
    let h = -(probs.iter().map(|&p| plogp(p)).sum::<f64>() + plogp(residual));
    Ok(h.max(0.0))
}

pub fn entity_probability(
    trace: &GenerationTrace,
    span: &EntitySpan,
    method: PoolingMethod,
) -> Result<f64, ScoringError> {
    let probs: Vec<f64> = span_tokens(trace, span)?.iter().map(|t| t.probability).collect();
    pool(&probs, method)
}

pub fn entity_entropy(
    trace: &GenerationTrace,
    span: &EntitySpan,
    method: PoolingMethod,
) -> Result<f64, ScoringError> {
    let entropies = span_tokens(trace, span)?
        .iter()
        .map(token_entropy)
        .collect::<Result<Vec<_>, _>>()?;
    pool(&entropies, method)
}

pub fn detect(
    trace: &GenerationTrace,
    span: &EntitySpan,
    config: &DetectionConfig,
) -> Result<HallucinationVerdict, ScoringError> {
    config.validate()?;
    let entity_probability = entity_probability(trace, span, config.prob_pooling)?;
    let entity_entropy = entity_entropy(trace, span, config.entropy_pooling)?;
    Ok(HallucinationVerdict {
        entity: span.clone(),
        entity_probability,
        entity_entropy,
        is_hallucination: config.is_hallucination(entity_probability, entity_entropy),
    })
}

/// Passage score: the largest `1 - P(E)` over entities, or `1 - min p` over all
/// tokens when there are none. Spans that cannot be scored are skipped.
pub fn score_passage(trace: &GenerationTrace, entities: &[EntitySpan], config: &DetectionConfig) -> f64 {
    let entity_scores: Vec<f64> = entities
        .iter()
        .filter_map(|e| entity_probability(trace, e, config.prob_pooling).ok())
        .map(|p| 1.0 - p)
        .collect();
    if let Ok(score) = pool(&entity_scores, PoolingMethod::Max) {
        return score.clamp(0.0, 1.0);
    }
    trace
        .probabilities()
        .reduce(f64::min)
        .map_or(0.0, |p| (1.0 - p).clamp(0.0, 1.0))
}

/// Entropy-side passage score: the largest `H(E)` over entities, falling back
/// to the largest token entropy.
pub fn score_passage_entropy(
    trace: &GenerationTrace,
    entities: &[EntitySpan],
    config: &DetectionConfig,
) -> Result<f64, ScoringError> {
    let entity_scores = entities
        .iter()
        .map(|e| entity_entropy(trace, e, config.entropy_pooling))
        .collect::<Result<Vec<_>, _>>()?;
    match pool(&entity_scores, PoolingMethod::Max) {
        Ok(score) => Ok(score),
        Err(_) if trace.is_empty() => Ok(0.0),
        Err(_) => baseline_score(trace, BaselineKind::MaxEntropy),
    }
}

/// Token-level detectors that ignore entity structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    AvgProb,
    MinProb,
    AvgEntropy,
    MaxEntropy,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [Self::AvgProb, Self::MinProb, Self::AvgEntropy, Self::MaxEntropy];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::AvgProb => "avg_prob",
            Self::MinProb => "min_prob",
            Self::AvgEntropy => "avg_entropy",
            Self::MaxEntropy => "max_entropy",
        }
    }
}

pub fn baseline_score(trace: &GenerationTrace, kind: BaselineKind) -> Result<f64, ScoringError> {
    if trace.is_empty() {
        return Err(ScoringError::EmptyInput);
    }
    let probs = || trace.probabilities().collect::<Vec<_>>();
    let entropies = || trace.tokens.iter().map(token_entropy).collect::<Result<Vec<_>, _>>();
    Ok(match kind {
        BaselineKind::AvgProb => 1.0 - pool(&probs(), PoolingMethod::Average)?,
        BaselineKind::MinProb => 1.0 - pool(&probs(), PoolingMethod::Min)?,
        BaselineKind::AvgEntropy => pool(&entropies()?, PoolingMethod::Average)?,
        BaselineKind::MaxEntropy => pool(&entropies()?, PoolingMethod::Max)?,
    })
}

/// One line of the JSON-lines detection report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReportLine {
    pub entity_surface: String,
    pub token_start: usize,
    pub token_end: usize,
    pub p_entity: f64,
    pub h_entity: f64,
    pub is_hallucination: bool,
    pub theta1: f64,
    pub theta2: f64,
}

impl DetectionReportLine {
    pub fn new(verdict: &HallucinationVerdict, config: &DetectionConfig) -> Self {
        Self {
            entity_surface: verdict.entity.surface.clone(),
            token_start: verdict.entity.token_start,
            token_end: verdict.entity.token_end,
            p_entity: verdict.entity_probability,
            h_entity: verdict.entity_entropy,
            is_hallucination: verdict.is_hallucination,
            theta1: config.theta1,
            theta2: config.theta2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Alternative, RawToken};

    fn trace_with(probs: &[f64]) -> GenerationTrace {
        let raws = probs
            .iter()
            .enumerate()
            .map(|(i, &p)| RawToken::new(format!("t{i} "), p))
            .collect();
        GenerationTrace::from_tokens(raws).unwrap()
    }

    fn span(start: usize, end: usize, trace: &GenerationTrace) -> EntitySpan {
        let cs = trace.tokens[start].char_start;
        let ce = trace.tokens[end - 1].char_end;
        EntitySpan {
            token_start: start,
            token_end: end,
            char_start: cs,
            char_end: ce,
            label: "MISC".into(),
            surface: trace.text[cs..ce].to_string(),
        }
    }

    fn event(alts: &[f64]) -> TokenEvent {
        TokenEvent {
            index: 0,
            text: "x".into(),
            probability: alts.first().copied().unwrap_or(1.0),
            top_alternatives: alts
                .iter()
                .enumerate()
                .map(|(i, &p)| Alternative::new(format!("a{i}"), p))
                .collect(),
            char_start: 0,
            char_end: 1,
        }
    }

    #[test]
    fn pooling_examples() {
        assert!((pool(&[0.8, 0.6], PoolingMethod::Average).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(pool(&[0.8, 0.6], PoolingMethod::Min).unwrap(), 0.6);
        for m in PoolingMethod::ALL {
            assert_eq!(pool(&[0.5], m).unwrap(), 0.5);
        }
        assert_eq!(pool(&[], PoolingMethod::Max), Err(ScoringError::EmptyInput));
    }

    #[test]
    fn entity_probability_examples() {
        let t = trace_with(&[0.9, 0.7]);
        assert!((entity_probability(&t, &span(0, 2, &t), PoolingMethod::Average).unwrap() - 0.8).abs() < 1e-15);
        let t = trace_with(&[1.0]);
        assert_eq!(entity_probability(&t, &span(0, 1, &t), PoolingMethod::Min).unwrap(), 1.0);
        let t = trace_with(&[0.2, 0.9, 0.4]);
        assert_eq!(entity_probability(&t, &span(0, 3, &t), PoolingMethod::Min).unwrap(), 0.2);
    }

    #[test]
    fn entropy_examples() {
        assert!((token_entropy(&event(&[0.5, 0.5])).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(token_entropy(&event(&[1.0])).unwrap(), 0.0);
        // Computed independently: -(0.5 ln 0.5 + 2 * 0.25 ln 0.25).
        assert!((token_entropy(&event(&[0.5, 0.25])).unwrap() - 1.0397207708399179).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_bad_distributions() {
        assert!(matches!(
            token_entropy(&event(&[0.7, 0.7])),
            Err(ScoringError::InvalidDistribution { .. })
        ));
        assert!(token_entropy(&event(&[-0.1])).is_err());
    }

    #[test]
    fn entropy_without_alternatives_uses_token() {
        let mut e = event(&[]);
        e.probability = 0.5;
        assert!((token_entropy(&e).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn entity_entropy_examples() {
        let raws = vec![
            RawToken::new("a", 1.0).with_alternatives(vec![Alternative::new("a", 1.0)]),
            RawToken::new("b", 1.0).with_alternatives(vec![Alternative::new("b", 1.0)]),
        ];
        let t = GenerationTrace::from_tokens(raws).unwrap();
        for m in PoolingMethod::ALL {
            assert_eq!(entity_entropy(&t, &span(0, 2, &t), m).unwrap(), 0.0);
        }
        let raws = vec![
            RawToken::new("a", 0.5).with_alternatives(vec![Alternative::new("a", 0.5), Alternative::new("c", 0.5)]),
            RawToken::new("b", 1.0).with_alternatives(vec![Alternative::new("b", 1.0)]),
        ];
        let t = GenerationTrace::from_tokens(raws).unwrap();
        let h = entity_entropy(&t, &span(0, 2, &t), PoolingMethod::Max).unwrap();
        assert!((h - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(pool(&[1.0, 3.0], PoolingMethod::Average).unwrap(), 2.0);
    }

    #[test]
    fn detect_examples() {
        let cfg = DetectionConfig {
            theta1: 0.4,
            theta2: 5.0,
            entropy_enabled: true,
            ..Default::default()
        };
        assert!(cfg.is_hallucination(0.3, 0.0));
        assert!(!cfg.is_hallucination(0.95, 0.1));
        assert!(cfg.is_hallucination(0.95, 6.0));
        let off = DetectionConfig { entropy_enabled: false, ..cfg };
        assert!(!off.is_hallucination(0.95, 6.0));

        let t = trace_with(&[0.3]);
        let v = detect(&t, &span(0, 1, &t), &cfg).unwrap();
        assert!(v.is_hallucination);
        assert_eq!(v.entity_probability, 0.3);
    }

    #[test]
    fn detect_rejects_invalid_config() {
        let t = trace_with(&[0.3]);
        let cfg = DetectionConfig { theta1: 1.5, ..Default::default() };
        assert!(matches!(detect(&t, &span(0, 1, &t), &cfg), Err(ScoringError::InvalidConfig(_))));
        let cfg = DetectionConfig { theta2: -1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn passage_scores() {
        let cfg = DetectionConfig::default();
        let t = trace_with(&[0.9, 0.3]);
        let ents = [span(0, 1, &t), span(1, 2, &t)];
        assert!((score_passage(&t, &ents, &cfg) - 0.7).abs() < 1e-15);
        let t = trace_with(&[0.8, 0.5]);
        assert_eq!(score_passage(&t, &[], &cfg), 0.5);
        let t = trace_with(&[1.0]);
        assert_eq!(score_passage(&t, &[span(0, 1, &t)], &cfg), 0.0);
    }

    #[test]
    fn baselines() {
        let t = trace_with(&[0.9, 0.5]);
        assert_eq!(baseline_score(&t, BaselineKind::MinProb).unwrap(), 0.5);
        let t = trace_with(&[0.8, 0.6]);
        assert!((baseline_score(&t, BaselineKind::AvgProb).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(
            baseline_score(&GenerationTrace::default(), BaselineKind::AvgProb),
            Err(ScoringError::EmptyInput)
        );
        // entropies [0.2, 1.4]: pick binary distributions with those entropies
        let h = |p: f64| -(plogp(p) + plogp(1.0 - p));
        let find = |target: f64| {
            let (mut lo, mut hi) = (1e-12, 0.5);
            for _ in 0..200 {
                let mid = (lo + hi) / 2.0;
                if h(mid) < target { lo = mid } else { hi = mid }
            }
            lo
        };
        let p = find(0.2);
        let raws = vec![
            RawToken::new("a", 1.0 - p).with_alternatives(vec![Alternative::new("a", 1.0 - p), Alternative::new("b", p)]),
            RawToken::new("c", 0.25).with_alternatives(
                (0..4).map(|i| Alternative::new(format!("c{i}"), 0.25)).collect(),
            ),
        ];
        let t = GenerationTrace::from_tokens(raws).unwrap();
        let max = baseline_score(&t, BaselineKind::MaxEntropy).unwrap();
        assert!((max - 4f64.ln()).abs() < 1e-12);
        let avg = baseline_score(&t, BaselineKind::AvgEntropy).unwrap();
        assert!((avg - (0.2 + 4f64.ln()) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn pooling_parses() {
        assert_eq!("avg".parse::<PoolingMethod>().unwrap(), PoolingMethod::Average);
        assert!("median".parse::<PoolingMethod>().is_err());
    }

    #[test]
    fn default_config_matches_documented_values() {
        let cfg = DetectionConfig::default();
        assert_eq!(cfg.theta1, 0.40);
        assert!((cfg.theta2 - 50f64.ln()).abs() < 1e-15);
        assert_eq!(cfg.prob_pooling, PoolingMethod::Average);
        assert_eq!(cfg.entropy_pooling, PoolingMethod::Max);
        assert!(!cfg.entropy_enabled);
    }
}
