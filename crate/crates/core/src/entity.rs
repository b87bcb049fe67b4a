//! Named-entity spans over generated text.
//!
//! Recognition runs on the detokenized text and yields character ranges that
//! are then mapped onto token ranges of the trace. Two backends ship:
//!
//! - [`RuleRecognizer`]: capitalized-word runs, numbers and acronyms. No
//!   models, fully deterministic.
//! - [`SidecarRecognizer`]: spans produced offline by any external NER tool,
//!   looked up by the SHA-256 of the text.
//!
//! [`EntityTracker`] drives recognition incrementally over a growing trace and
//! only hands out spans whose right boundary can no longer move.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trace::GenerationTrace;

#[derive(Debug, Error)]
pub enum EntityError {
    #[error("character span [{start}, {end}) out of range for text of length {len}")]
    OutOfRange { start: usize, end: usize, len: usize },
    #[error("failed to read sidecar annotations: {0}")]
    Io(#[from] std::io::Error),
    #[error("sidecar line {line}: {message}")]
    Sidecar { line: usize, message: String },
}

/// An entity located in text only, before token mapping.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CharEntity {
    pub char_start: usize,
    pub char_end: usize,
    pub label: String,
}

/// A named entity tied to a token range of a trace.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub token_start: usize,
    pub token_end: usize,
    pub char_start: usize,
    pub char_end: usize,
    pub label: String,
    pub surface: String,
}

impl EntitySpan {
    /// Checks the span against the trace it claims to describe.
    pub fn is_valid_for(&self, trace: &GenerationTrace) -> bool {
        self.token_start < self.token_end
            && self.token_end <= trace.len()
            && self.char_start < self.char_end
            && trace.tokens[self.token_start].char_start <= self.char_start
            && trace.tokens[self.token_end - 1].char_end >= self.char_end
            && trace.text.get(self.char_start..self.char_end) == Some(self.surface.as_str())
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.token_start < other.token_end && other.token_start < self.token_end
    }
}

/// A pluggable entity recognition backend.
pub trait EntityRecognizer: Send + Sync {
    fn name(&self) -> &str;

    /// Entities in a finished text, in document order, non-overlapping.
    fn recognize_text(&self, text: &str) -> Vec<CharEntity>;

    /// Entities in a text that may still grow, restricted to those whose
    /// extent cannot change whatever is appended.
    fn recognize_closed(&self, text: &str) -> Vec<CharEntity>;
}

/// Minimal token range whose character extent covers `[char_start, char_end)`.
pub fn char_span_to_token_span(
    trace: &GenerationTrace,
    char_start: usize,
    char_end: usize,
) -> Result<(usize, usize), EntityError> {
    let out_of_range = || EntityError::OutOfRange {
        start: char_start,
        end: char_end,
        len: trace.text.len(),
    };
    if char_start >= char_end || char_end > trace.text.len() {
        return Err(out_of_range());
    }
    let first = trace.tokens.partition_point(|t| t.char_end <= char_start);
    let last = trace.tokens.partition_point(|t| t.char_start < char_end);
    if first >= last {
        return Err(out_of_range());
    }
    Ok((first, last))
}

fn to_spans(
    trace: &GenerationTrace,
    entities: Vec<CharEntity>,
    allow: Option<&BTreeSet<String>>,
) -> Vec<EntitySpan> {
    let mut spans: Vec<EntitySpan> = Vec::new();
    for e in entities {
        if allow.is_some_and(|a| !a.contains(&e.label)) {
            continue;
        }
        let Some(surface) = trace.text.get(e.char_start..e.char_end) else {
            continue;
        };
        let Ok((token_start, token_end)) = char_span_to_token_span(trace, e.char_start, e.char_end)
        else {
            continue;
        };
        let span = EntitySpan {
            token_start,
            token_end,
            char_start: e.char_start,
            char_end: e.char_end,
            label: e.label,
            surface: surface.to_string(),
        };
        // Two mentions inside one token would share it; keep the first.
        if spans.last().is_some_and(|prev| prev.overlaps(&span)) {
            continue;
        }
        spans.push(span);
    }
    spans
}

/// Runs a backend over a complete trace.
pub fn recognize_entities(trace: &GenerationTrace, recognizer: &dyn EntityRecognizer) -> Vec<EntitySpan> {
    to_spans(trace, recognizer.recognize_text(&trace.text), None)
}

/// A backend together with an optional label allow-list.
pub struct EntityExtractor {
    backend: Box<dyn EntityRecognizer>,
    allow: Option<BTreeSet<String>>,
}

impl EntityExtractor {
    pub fn new(backend: Box<dyn EntityRecognizer>) -> Self {
        Self {
            backend,
            allow: None,
        }
    }

    pub fn rules() -> Self {
        Self::new(Box::new(RuleRecognizer))
    }

    /// Restricts output to the given labels. An empty iterator allows none.
    pub fn with_allowed_labels<I, S>(mut self, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.allow = Some(labels.into_iter().map(Into::into).collect());
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn recognize(&self, trace: &GenerationTrace) -> Vec<EntitySpan> {
        to_spans(trace, self.backend.recognize_text(&trace.text), self.allow.as_ref())
    }

    pub fn recognize_closed(&self, trace: &GenerationTrace) -> Vec<EntitySpan> {
        to_spans(trace, self.backend.recognize_closed(&trace.text), self.allow.as_ref())
    }
}

impl Default for EntityExtractor {
    fn default() -> Self {
        Self::rules()
    }
}

/// Incremental recognition over a growing (and occasionally truncated) trace.
#[derive(Debug, Default, Clone)]
pub struct EntityTracker {
    emitted: Vec<EntitySpan>,
}

impl EntityTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the spans that became closed since the last poll.
    /// With `finished` set, every remaining span is closed.
    pub fn poll(
        &mut self,
        extractor: &EntityExtractor,
        trace: &GenerationTrace,
        finished: bool,
    ) -> Vec<EntitySpan> {
        let candidates = if finished {
            extractor.recognize(trace)
        } else {
            extractor.recognize_closed(trace)
        };
        let mut fresh = Vec::new();
        for span in candidates {
            if self.emitted.iter().any(|e| e.overlaps(&span)) {
                continue;
            }
            self.emitted.push(span.clone());
            fresh.push(span);
        }
        fresh
    }

    /// Forgets spans that are no longer inside the first `token_len` tokens.
    pub fn truncate(&mut self, token_len: usize) {
        self.emitted.retain(|e| e.token_end <= token_len);
    }

    pub fn emitted(&self) -> &[EntitySpan] {
        &self.emitted
    }
}

// ---------------------------------------------------------------------------
// Rule backend
// ---------------------------------------------------------------------------

const SENTENCE_STARTERS: &[&str] = &[
    "A", "After", "Although", "An", "And", "As", "At", "Before", "But", "By", "During", "For",
    "From", "He", "Her", "His", "However", "I", "If", "In", "It", "Its", "My", "No", "Of", "On",
    "Or", "Our", "She", "Since", "So", "That", "The", "Their", "Then", "There", "These", "They",
    "This", "Those", "To", "We", "When", "While", "With", "Yes", "You", "Your",
];

const LOCATION_CUES: &[&str] = &[
    "in", "at", "from", "near", "to", "into", "across", "outside", "throughout",
];

const ORG_KEYWORDS: &[&str] = &[
    "Agency", "Association", "Bank", "Church", "Club", "College", "Committee", "Company",
    "Corporation", "Council", "Department", "Foundation", "Group", "Inc", "Institute", "League",
    "Ministry", "Museum", "Organization", "Party", "Society", "University",
];

const CALENDAR_WORDS: &[&str] = &[
    "January", "February", "March", "April", "May", "June", "July", "August", "September",
    "October", "November", "December", "Monday", "Tuesday", "Wednesday", "Thursday", "Friday",
    "Saturday", "Sunday",
];

#[derive(Debug, Clone, Copy)]
struct Word {
    start: usize,
    end: usize,
}

fn is_joiner(c: char) -> bool {
    matches!(c, '\'' | '\u{2019}' | '-')
}

fn is_numeric_joiner(c: char) -> bool {
    matches!(c, '.' | ',')
}

/// Splits text into words: alphanumeric runs, joined across apostrophes and
/// hyphens between letters, and across `.`/`,` between digits.
fn words(text: &str) -> Vec<Word> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].1.is_alphanumeric() {
            i += 1;
            continue;
        }
        let start = chars[i].0;
        let mut j = i + 1;
        while j < chars.len() {
            let c = chars[j].1;
            if c.is_alphanumeric() {
                j += 1;
                continue;
            }
            let prev = chars[j - 1].1;
            let next = chars.get(j + 1).map(|p| p.1);
            let joins = match next {
                Some(n) if is_joiner(c) => prev.is_alphanumeric() && n.is_alphanumeric(),
                Some(n) if is_numeric_joiner(c) => prev.is_ascii_digit() && n.is_ascii_digit(),
                _ => false,
            };
            if joins {
                j += 2;
            } else {
                break;
            }
        }
        let end = chars.get(j).map_or(text.len(), |p| p.0);
        out.push(Word { start, end });
        i = j;
    }
    out
}

fn is_capitalized(w: &str) -> bool {
    w.chars().next().is_some_and(char::is_uppercase)
}

fn is_numeric(w: &str) -> bool {
    w.chars().next().is_some_and(|c| c.is_ascii_digit())
}

fn is_acronym(w: &str) -> bool {
    let letters = w.chars().filter(|c| c.is_alphabetic()).count();
    letters >= 2 && !w.chars().any(char::is_lowercase)
}

fn numeric_label(w: &str) -> &'static str {
    let lower = w.to_ascii_lowercase();
    let year = w.len() == 4 && w.chars().all(|c| c.is_ascii_digit()) && (b'1'..=b'2').contains(&w.as_bytes()[0]);
    let decade = lower.ends_with('s') && lower[..lower.len() - 1].chars().all(|c| c.is_ascii_digit());
    if year || decade {
        "DATE"
    } else if ["st", "nd", "rd", "th"].iter().any(|s| lower.ends_with(s)) {
        "ORDINAL"
    } else {
        "CARDINAL"
    }
}

/// Dependency-free recognizer for capitalized names, numbers and acronyms.
///
/// - A maximal run of capitalized words separated only by spaces is one entity.
///   A one-word run at the start of a sentence is ignored; a longer run there
///   loses a leading function word such as "The" or "In".
/// - Words starting with a digit are entities (DATE for years, else CARDINAL
///   or ORDINAL).
/// - All-caps acronyms are entities anywhere (ORG).
#[derive(Debug, Clone, Default)]
pub struct RuleRecognizer;

impl RuleRecognizer {
    fn at_sentence_start(text: &str, word: Word) -> bool {
        let before = &text[..word.start];
        let trimmed = before.trim_end_matches(|c: char| c.is_whitespace() || matches!(c, '"' | '(' | '\'' | '\u{201c}'));
        trimmed.is_empty()
            || trimmed.ends_with(['.', '!', '?'])
            || before[trimmed.len()..].contains('\n')
    }

    fn inline_gap(text: &str, a: Word, b: Word) -> bool {
        let gap = &text[a.end..b.start];
        !gap.is_empty() && gap.chars().all(|c| c == ' ' || c == '\t')
    }

    fn label_run(text: &str, run: &[Word], prev: Option<Word>) -> &'static str {
        let first = &text[run[0].start..run[0].end];
        if run.len() == 1 && is_acronym(first) {
            return "ORG";
        }
        if run.iter().any(|w| ORG_KEYWORDS.contains(&&text[w.start..w.end])) {
            return "ORG";
        }
        if run.len() == 1 && CALENDAR_WORDS.contains(&first) {
            return "DATE";
        }
        if let Some(p) = prev {
            let cue = text[p.start..p.end].to_lowercase();
            if LOCATION_CUES.contains(&cue.as_str()) && Self::inline_gap(text, p, run[0]) {
                return "GPE";
            }
        }
        if run.len() >= 2 {
            "PERSON"
        } else {
            "MISC"
        }
    }

    fn entities(text: &str) -> Vec<CharEntity> {
        let ws = words(text);
        let mut out = Vec::new();
        let mut i = 0;
        while i < ws.len() {
            let w = &text[ws[i].start..ws[i].end];
            if is_numeric(w) {
                out.push(CharEntity {
                    char_start: ws[i].start,
                    char_end: ws[i].end,
                    label: numeric_label(w).to_string(),
                });
                i += 1;
                continue;
            }
            if !is_capitalized(w) || w == "I" {
                i += 1;
                continue;
            }
            let mut j = i + 1;
            while j < ws.len()
                && is_capitalized(&text[ws[j].start..ws[j].end])
                && Self::inline_gap(text, ws[j - 1], ws[j])
            {
                j += 1;
            }
            let mut start = i;
            if Self::at_sentence_start(text, ws[i]) && !(j - i == 1 && is_acronym(w)) {
                if SENTENCE_STARTERS.contains(&w) {
                    start += 1;
                } else if j - i == 1 {
                    start = j;
                }
            }
            if start < j {
                let prev = start.checked_sub(1).map(|p| ws[p]);
                out.push(CharEntity {
                    char_start: ws[start].start,
                    char_end: ws[j - 1].end,
                    label: Self::label_run(text, &ws[start..j], prev).to_string(),
                });
            }
            i = j;
        }
        out
    }

    /// Whether text following `e` already fixes its right boundary.
    fn boundary_closed(text: &str, e: &CharEntity) -> bool {
        let rest = &text[e.char_end..];
        let trimmed = rest.trim_start();
        let Some(c) = trimmed.chars().next() else {
            return false;
        };
        if trimmed.len() != rest.len() {
            // Whitespace ends the last word. A capitalized word after an
            // inline gap would already be part of the run.
            return true;
        }
        let next = trimmed[c.len_utf8()..].chars().next();
        if is_joiner(c) {
            return next.is_some_and(|n| !n.is_alphanumeric());
        }
        if is_numeric_joiner(c) && is_numeric(&text[e.char_start..]) {
            return next.is_some_and(|n| !n.is_ascii_digit());
        }
        true
    }
}

impl EntityRecognizer for RuleRecognizer {
    fn name(&self) -> &str {
        "rules"
    }

    fn recognize_text(&self, text: &str) -> Vec<CharEntity> {
        Self::entities(text)
    }

    fn recognize_closed(&self, text: &str) -> Vec<CharEntity> {
        Self::entities(text)
            .into_iter()
            .filter(|e| Self::boundary_closed(text, e))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Sidecar backend
// ---------------------------------------------------------------------------

/// Hex SHA-256 of a text, the key used by sidecar annotation files.
pub fn text_sha256(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// One annotated entity in a sidecar file. Offsets count Unicode scalar
/// values, the convention of most NER toolkits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntity {
    pub char_start: usize,
    pub char_end: usize,
    pub label: String,
}

/// One line of a sidecar annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarRecord {
    pub text_sha256: String,
    pub entities: Vec<SidecarEntity>,
}

impl SidecarRecord {
    /// Builds a record from byte-offset entities of `text`.
    pub fn from_byte_entities(text: &str, entities: &[CharEntity]) -> Self {
        let to_scalar = |b: usize| text[..b].chars().count();
        Self {
            text_sha256: text_sha256(text),
            entities: entities
                .iter()
                .map(|e| SidecarEntity {
                    char_start: to_scalar(e.char_start),
                    char_end: to_scalar(e.char_end),
                    label: e.label.clone(),
                })
                .collect(),
        }
    }
}

/// Entity spans read from an external annotation file.
#[derive(Debug, Clone, Default)]
pub struct SidecarRecognizer {
    by_hash: HashMap<String, Vec<SidecarEntity>>,
}

impl SidecarRecognizer {
    pub fn from_records(records: impl IntoIterator<Item = SidecarRecord>) -> Self {
        Self {
            by_hash: records
                .into_iter()
                .map(|r| (r.text_sha256, r.entities))
                .collect(),
        }
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self, EntityError> {
        let mut records = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SidecarRecord = serde_json::from_str(&line).map_err(|e| EntityError::Sidecar {
                line: n + 1,
                message: e.to_string(),
            })?;
            records.push(record);
        }
        Ok(Self::from_records(records))
    }

    pub fn open(path: &Path) -> Result<Self, EntityError> {
        Self::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn len(&self) -> usize {
        self.by_hash.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_hash.is_empty()
    }
}

impl EntityRecognizer for SidecarRecognizer {
    fn name(&self) -> &str {
        "sidecar"
    }

    fn recognize_text(&self, text: &str) -> Vec<CharEntity> {
        let Some(entities) = self.by_hash.get(&text_sha256(text)) else {
            return Vec::new();
        };
        // scalar offset -> byte offset, with one past the end included
        let boundaries: Vec<usize> = text
            .char_indices()
            .map(|(b, _)| b)
            .chain(std::iter::once(text.len()))
            .collect();
        let mut out: Vec<CharEntity> = entities
            .iter()
            .filter_map(|e| {
                let (Some(&s), Some(&t)) = (boundaries.get(e.char_start), boundaries.get(e.char_end)) else {
                    log::warn!("sidecar entity [{}, {}) outside text", e.char_start, e.char_end);
                    return None;
                };
                (s < t).then(|| CharEntity {
                    char_start: s,
                    char_end: t,
                    label: e.label.clone(),
                })
            })
            .collect();
        out.sort();
        let mut last_end = 0;
        out.retain(|e| {
            let keep = e.char_start >= last_end;
            if keep {
                last_end = e.char_end;
            }
            keep
        });
        out
    }

    /// Annotations describe whole texts, so a partial text only matches when
    /// it happens to be a complete annotated text.
    fn recognize_closed(&self, text: &str) -> Vec<CharEntity> {
        self.recognize_text(text)
    }
}
