//! Reference implementations and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use drad_core::entity::EntitySpan;
use drad_core::eval::{LabeledPassage, QaExample};
use drad_core::gateway::{MockBranch, MockGateway, MockScript, PromptMatcher};
use drad_core::retrieval::{segment_corpus, Document, IndexHandle, InvertedIndex};
use drad_core::rhd::PoolingMethod;
use drad_core::trace::{Alternative, GenerationTrace, RawToken, TokenRecord, PROBABILITY_SLACK};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Oracles

pub fn oracle_pool(values: &[f64], method: PoolingMethod) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    match method {
        PoolingMethod::Max => sorted[sorted.len() - 1],
        PoolingMethod::Min => sorted[0],
        PoolingMethod::First => values[0],
        PoolingMethod::Average => {
            let mut sum = 0.0;
            for v in values {
                sum += v;
            }
            sum / values.len() as f64
        }
    }
}

/// `-sum p ln p` over the observed probabilities plus the unobserved mass.
pub fn oracle_entropy(observed: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut h = 0.0;
    for &p in observed {
        total += p;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    let r = 1.0 - total;
    if r > PROBABILITY_SLACK {
        h -= r * r.ln();
    }
    h.max(0.0)
}

pub fn oracle_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn oracle_terms(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

/// Okapi BM25 over every passage, returning `(id, score)` for passages that
/// share at least one term with the query, best first, ties by id.
pub fn oracle_bm25(passages: &[(String, String)], query: &str, k1: f64, b: f64) -> Vec<(String, f64)> {
    let docs: Vec<Vec<String>> = passages.iter().map(|(_, t)| oracle_terms(t)).collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut out = Vec::new();
    for (d, (id, _)) in docs.iter().zip(passages) {
        let mut score = 0.0;
        let mut matched = false;
        for term in oracle_terms(query) {
            let tf = d.iter().filter(|t| **t == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            matched = true;
            let df = docs.iter().filter(|doc| doc.contains(&term)).count() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * d.len() as f64 / avgdl));
        }
        if matched {
            out.push((id.clone(), score));
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

// ---------------------------------------------------------------------------
// Trace helpers

pub fn span_of(trace: &GenerationTrace, start: usize, end: usize) -> EntitySpan {
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

/// A truncated distribution: the top `k` of a random distribution over
/// `vocab` outcomes, most likely first.
pub fn truncated_distribution(rng: &mut ChaCha8Rng, vocab: usize, k: usize) -> Vec<f64> {
    let weights: Vec<f64> = (0..vocab).map(|_| -rng.gen_range(1e-12f64..1.0).ln()).collect();
    let total: f64 = weights.iter().sum();
    let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
    probs.sort_by(|a, b| b.total_cmp(a));
    probs.truncate(k);
    probs
}

pub fn random_token(rng: &mut ChaCha8Rng, i: usize) -> RawToken {
    let k = rng.gen_range(0..=5);
    let vocab = rng.gen_range(5..40);
    let probs = truncated_distribution(rng, vocab, k.max(1));
    let own = if k == 0 { rng.gen_range(0.0..=1.0) } else { probs[0] };
    let alts = if k == 0 {
        Vec::new()
    } else {
        probs.iter().enumerate().map(|(j, &p)| Alternative::new(format!("a{j}"), p)).collect()
    };
    RawToken::new(format!(" w{i}"), own).with_alternatives(alts)
}

pub fn random_trace(rng: &mut ChaCha8Rng, len: usize) -> GenerationTrace {
    GenerationTrace::from_tokens((0..len).map(|i| random_token(rng, i)).collect()).unwrap()
}

/// Splits text into word tokens carrying their leading space, with
/// sentence punctuation as separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        match ch {
            ' ' => {
                if !cur.is_empty() && !cur.chars().all(char::is_whitespace) {
                    out.push(std::mem::take(&mut cur));
                }
                cur.push(ch);
            }
            '.' | ',' | '?' | '!' => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            }
            _ => cur.push(ch),
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Token records for `text`, with `low` tokens (by trimmed text) at probability 0.1.
pub fn records(text: &str, low: &[&str]) -> Vec<TokenRecord> {
    tokenize(text)
        .into_iter()
        .map(|t| {
            let p: f64 = if low.contains(&t.trim()) { 0.1 } else { 0.92 };
            TokenRecord {
                text: t,
                logprob: p.ln(),
                top_alternatives: Vec::new(),
            }
        })
        .collect()
}

pub fn index_of(docs: &[Document]) -> IndexHandle {
    IndexHandle::in_memory(InvertedIndex::build(segment_corpus(docs.iter())).unwrap())
}

// ---------------------------------------------------------------------------
// The Georgia fixture: a confident name, a low-probability wrong birthplace.

pub const GEORGIA_QUESTION: &str = "Where was Bill Clinton born?";

pub fn georgia_fixture() -> (MockGateway, IndexHandle) {
    let born = |place: (&'static str, f64)| {
        vec![
            ("Bill", 0.95),
            (" Clinton", 0.9),
            (" was", 0.95),
            (" born", 0.9),
            (" in ", 0.9),
            place,
            (".", 0.9),
        ]
    };
    let gateway = MockGateway::new(MockScript {
        branches: vec![
            MockBranch::from_probabilities(PromptMatcher::Contains("Arkansas".into()), &born(("Arkansas", 0.85))),
            MockBranch::from_probabilities(PromptMatcher::Contains("Question:".into()), &born(("Georgia", 0.1))),
        ],
    })
    .unwrap();
    let docs = [
        Document::new(
            "Bill Clinton",
            "William Jefferson Clinton is an American politician. Bill Clinton was born in Hope, Arkansas, \
             and served as governor of Arkansas before becoming president.",
        ),
        Document::new("Georgia", "Georgia is a state in the southeastern United States. Its capital is Atlanta."),
        Document::new("Hope", "Hope is a city in Hempstead County, Arkansas."),
    ];
    (gateway, index_of(&docs))
}

// ---------------------------------------------------------------------------
// Ten-question QA fixture. Half the questions get a confidently wrong draft
// with a low-probability birthplace; the corpus holds the right one, and a
// prompt that mentions it steers the mock to the right answer.

pub struct QaPerson {
    pub name: &'static str,
    pub place: &'static str,
    pub wrong: &'static str,
    pub hallucinated: bool,
    pub preface: bool,
}

pub const QA_PEOPLE: [QaPerson; 10] = [
    QaPerson { name: "Alma Ruiz", place: "Lisbon", wrong: "Madrid", hallucinated: true, preface: false },
    QaPerson { name: "Boris Kell", place: "Tallinn", wrong: "Riga", hallucinated: false, preface: true },
    QaPerson { name: "Cora Vance", place: "Dublin", wrong: "Cork", hallucinated: true, preface: true },
    QaPerson { name: "Dario Fenn", place: "Turin", wrong: "Milan", hallucinated: false, preface: false },
    QaPerson { name: "Edda Lorne", place: "Bergen", wrong: "Oslo", hallucinated: true, preface: false },
    QaPerson { name: "Felix Orne", place: "Ghent", wrong: "Bruges", hallucinated: false, preface: true },
    QaPerson { name: "Greta Holm", place: "Uppsala", wrong: "Malmo", hallucinated: true, preface: true },
    QaPerson { name: "Hugo Brandt", place: "Leipzig", wrong: "Dresden", hallucinated: false, preface: false },
    QaPerson { name: "Ines Moraw", place: "Krakow", wrong: "Gdansk", hallucinated: true, preface: false },
    QaPerson { name: "Jonas Veld", place: "Utrecht", wrong: "Leiden", hallucinated: false, preface: true },
];

pub fn qa_question(p: &QaPerson) -> String {
    format!("Where was {} born?", p.name)
}

fn qa_answer(p: &QaPerson, place: &str) -> String {
    let preface = if p.preface { format!("{} was a writer. ", p.name) } else { String::new() };
    format!("{preface}{} was born in {place}. So the answer is {place}.", p.name)
}

pub fn qa_fixture() -> (Vec<QaExample>, MockGateway, IndexHandle) {
    let examples = QA_PEOPLE
        .iter()
        .enumerate()
        .map(|(i, p)| QaExample {
            id: format!("q{i}"),
            question: qa_question(p),
            answers: vec![p.place.to_string()],
        })
        .collect();
    let mut branches = Vec::new();
    for p in &QA_PEOPLE {
        branches.push(MockBranch {
            prompt_matcher: PromptMatcher::AllOf(vec![qa_question(p), p.place.to_string()]),
            response_tokens: records(&qa_answer(p, p.place), &[]),
        });
    }
    for p in &QA_PEOPLE {
        let (place, low): (&str, &[&str]) = if p.hallucinated { (p.wrong, &[p.wrong]) } else { (p.place, &[]) };
        branches.push(MockBranch {
            prompt_matcher: PromptMatcher::Contains(qa_question(p)),
            response_tokens: records(&qa_answer(p, place), low),
        });
    }
    let docs: Vec<Document> = QA_PEOPLE
        .iter()
        .map(|p| {
            Document::new(
                p.name,
                format!("{} is a novelist. {} was born in {} and studied there.", p.name, p.name, p.place),
            )
        })
        .collect();
    (examples, MockGateway::new(MockScript { branches }).unwrap(), index_of(&docs))
}

// ---------------------------------------------------------------------------
// Detection set where only entity tokens carry the label.

const FIRST: [&str; 8] = ["Alma", "Boris", "Cora", "Dario", "Edda", "Felix", "Greta", "Hugo"];
const LAST: [&str; 8] = ["Ruiz", "Kell", "Vance", "Fenn", "Lorne", "Orne", "Holm", "Brandt"];
const PLACES: [&str; 8] = ["Lisbon", "Tallinn", "Dublin", "Turin", "Bergen", "Ghent", "Uppsala", "Leipzig"];
const FILLER: &str = " and spent most of the early years there with a large family before moving away to work on a \
                      small farm near the old river where the days were long and the winters were hard and quiet";

/// `n` passages, half hallucinated. Entity tokens of hallucinated passages
/// are drawn from [0.2, 0.45), the others from [0.5, 0.8); every other token
/// is uniform on [0.05, 1) whatever the label.
pub fn entity_signal_set(rng: &mut ChaCha8Rng, n: usize) -> Vec<LabeledPassage> {
    let mut labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    labels.shuffle(rng);
    labels
        .into_iter()
        .map(|label| {
            let first = FIRST[rng.gen_range(0..FIRST.len())];
            let last = LAST[rng.gen_range(0..LAST.len())];
            let place = PLACES[rng.gen_range(0..PLACES.len())];
            let year = rng.gen_range(1900..2000);
            let text = format!("{first} {last} was born in {place} in {year}{FILLER}.");
            let entity_tokens = [first, last, place, &year.to_string()].map(|s| s.to_string());
            let tokens: Vec<RawToken> = tokenize(&text)
                .into_iter()
                .map(|t| {
                    let p = if entity_tokens.iter().any(|e| e == t.trim()) {
                        if label {
                            rng.gen_range(0.2..0.45)
                        } else {
                            rng.gen_range(0.5..0.8)
                        }
                    } else {
                        rng.gen_range(0.05..1.0)
                    };
                    RawToken::new(t, p)
                })
                .collect();
            LabeledPassage {
                trace: GenerationTrace::from_tokens(tokens).unwrap(),
                label,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Random mock scripts for fuzzing the policies.

const FUZZ_NAMES: [&str; 6] = ["Alma", "Boris", "Cora", "Dario", "Edda", "Felix"];
const FUZZ_PLACES: [&str; 6] = ["Lisbon", "Tallinn", "Dublin", "Turin", "Bergen", "Ghent"];
const FUZZ_WORDS: [&str; 10] = ["was", "born", "in", "lived", "near", "the", "river", "and", "worked", "there"];

fn fuzz_text(rng: &mut ChaCha8Rng) -> String {
    let sentences = rng.gen_range(1..=4);
    let mut out = String::new();
    for s in 0..sentences {
        if s > 0 {
            out.push(' ');
        }
        let words = rng.gen_range(2..=9);
        for w in 0..words {
            if w > 0 {
                out.push(' ');
            }
            let word = match rng.gen_range(0..4) {
                0 => FUZZ_NAMES.choose(rng).unwrap(),
                1 => FUZZ_PLACES.choose(rng).unwrap(),
                _ => FUZZ_WORDS.choose(rng).unwrap(),
            };
            out.push_str(word);
        }
        out.push('.');
    }
    out
}

fn fuzz_records(rng: &mut ChaCha8Rng, text: &str) -> Vec<TokenRecord> {
    tokenize(text)
        .into_iter()
        .map(|t| {
            let p: f64 = if rng.gen_bool(0.3) { rng.gen_range(0.01..0.4) } else { rng.gen_range(0.4..1.0) };
            TokenRecord {
                text: t,
                logprob: p.ln(),
                top_alternatives: Vec::new(),
            }
        })
        .collect()
}

/// A random script whose branches key on words that retrieval can inject,
/// with an always-matching fallback, plus a small random corpus.
pub fn fuzz_fixture(rng: &mut ChaCha8Rng) -> (MockGateway, IndexHandle) {
    let mut branches = Vec::new();
    for _ in 0..rng.gen_range(0..4) {
        let key = FUZZ_PLACES.choose(rng).unwrap().to_string();
        let text = fuzz_text(rng);
        branches.push(MockBranch {
            prompt_matcher: PromptMatcher::Contains(format!("Context [1]: {key}")),
            response_tokens: fuzz_records(rng, &text),
        });
    }
    let text = fuzz_text(rng);
    branches.push(MockBranch {
        prompt_matcher: PromptMatcher::Contains(String::new()),
        response_tokens: fuzz_records(rng, &text),
    });
    let docs: Vec<Document> = (0..rng.gen_range(1..6))
        .map(|i| Document::new(format!("doc{i}"), fuzz_text(rng)))
        .collect();
    (MockGateway::new(MockScript { branches }).unwrap(), index_of(&docs))
}

pub fn counts<T: std::hash::Hash + Eq>(items: impl IntoIterator<Item = T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for i in items {
        *m.entry(i).or_default() += 1;
    }
    m
}
