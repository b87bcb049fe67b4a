//! Passage corpus and BM25 retrieval.
//!
//! Documents are cut into passages of at most [`PASSAGE_TOKENS`] whitespace
//! tokens. The index analyzes text by lowercasing and splitting on
//! non-alphanumeric characters, with no stemming or stopwords, and scores
//! with Okapi BM25 (`k1 = 1.2`, `b = 0.75`) using the non-negative IDF
//! `ln(1 + (N - df + 0.5) / (df + 0.5))`.
//!
//! An index lives in a self-contained directory:
//!
//! ```text
//! <dir>/manifest.json   format version, parameters, counts
//! <dir>/passages.jsonl  one passage per line, in ordinal order
//! <dir>/postings.json   term -> [[ordinal, tf], ...]
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PASSAGE_TOKENS: usize = 100;
pub const INDEX_FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const PASSAGES: &str = "passages.jsonl";
const POSTINGS: &str = "postings.json";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot ingest document {document:?}: {reason}")]
    Ingest { document: String, reason: String },
    #[error("duplicate passage id {0:?}")]
    DuplicateId(String),
    #[error("index is closed")]
    IndexClosed,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("corrupt index at {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub title: String,
    #[serde(alias = "body")]
    pub text: String,
}

impl Document {
    pub fn new(title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            text: text.into(),
        }
    }

    pub fn from_bytes(title: impl Into<String>, bytes: Vec<u8>) -> Result<Self, RetrievalError> {
        let title = title.into();
        match String::from_utf8(bytes) {
            Ok(text) => Ok(Self { title, text }),
            Err(e) => Err(RetrievalError::Ingest {
                document: title,
                reason: format!("not valid UTF-8: {e}"),
            }),
        }
    }
}

/// Reads a corpus from a JSON-lines file of `{title, text}` objects or from a
/// directory of plain-text files (file stem = title, sorted by file name).
pub fn load_corpus(path: &Path) -> Result<Vec<Document>, RetrievalError> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<Vec<_>, _>>()?;
        files.retain(|p| p.is_file());
        files.sort();
        files
            .into_iter()
            .map(|p| {
                let title = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Document::from_bytes(title, fs::read(&p)?)
            })
            .collect()
    } else {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut docs = Vec::new();
        for (n, line) in reader.split(b'\n').enumerate() {
            let bytes = line?;
            let document = format!("{}:{}", path.display(), n + 1);
            let line = String::from_utf8(bytes).map_err(|e| RetrievalError::Ingest {
                document: document.clone(),
                reason: format!("not valid UTF-8: {e}"),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document = serde_json::from_str(&line).map_err(|e| RetrievalError::Ingest {
                document,
                reason: e.to_string(),
            })?;
            docs.push(doc);
        }
        Ok(docs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub doc_title: String,
    pub text: String,
    pub token_count: usize,
}

/// Cuts one document into consecutive passages of at most 100 whitespace tokens.
pub fn segment_document(doc: &Document) -> Vec<Passage> {
    let tokens: Vec<&str> = doc.text.split_whitespace().collect();
    tokens
        .chunks(PASSAGE_TOKENS)
        .enumerate()
        .map(|(seq, chunk)| Passage {
            id: format!("{}#{}", doc.title, seq),
            doc_title: doc.title.clone(),
            text: chunk.join(" "),
            token_count: chunk.len(),
        })
        .collect()
}

pub fn segment_corpus<'a, I>(documents: I) -> impl Iterator<Item = Passage> + 'a
where
    I: IntoIterator<Item = &'a Document>,
    I::IntoIter: 'a,
{
    documents.into_iter().flat_map(segment_document)
}

/// Lowercased alphanumeric terms.
pub fn analyze(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageHit {
    pub passage: Passage,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    params: Bm25Params,
    doc_count: usize,
    total_length: u64,
}

/// In-memory inverted index.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    params: Bm25Params,
    passages: Vec<Passage>,
    lengths: Vec<u32>,
    total_length: u64,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

impl InvertedIndex {
    pub fn build<I>(passages: I) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = Passage>,
    {
        Self::build_with(passages, Bm25Params::default())
    }

    pub fn build_with<I>(passages: I, params: Bm25Params) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = Passage>,
    {
        let mut seen = HashSet::new();
        let mut index = Self {
            params,
            passages: Vec::new(),
            lengths: Vec::new(),
            total_length: 0,
            postings: BTreeMap::new(),
        };
        for passage in passages {
            if !seen.insert(passage.id.clone()) {
                return Err(RetrievalError::DuplicateId(passage.id));
            }
            let ordinal = index.passages.len() as u32;
            let terms = analyze(&passage.text);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &terms {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                index.postings.entry(term).or_default().push((ordinal, count));
            }
            index.lengths.push(terms.len() as u32);
            index.total_length += terms.len() as u64;
            index.passages.push(passage);
        }
        Ok(index)
    }

    pub fn doc_count(&self) -> usize {
        self.passages.len()
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn average_length(&self) -> f64 {
        if self.passages.is_empty() {
            0.0
        } else {
            self.total_length as f64 / self.passages.len() as f64
        }
    }

    /// Top-`k` passages for `query`. Only passages sharing a term with the
    /// query are returned. Ties go to the smaller passage id.
    pub fn search(&self, query: &str, k: usize) -> Result<Vec<PassageHit>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let n = self.passages.len() as f64;
        let avgdl = self.average_length();
        let Bm25Params { k1, b } = self.params;
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in analyze(query) {
            let Some(postings) = self.postings.get(&term) else {
                continue;
            };
            let df = postings.len() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            for &(ordinal, tf) in postings {
                let tf = f64::from(tf);
                let dl = f64::from(self.lengths[ordinal as usize]);
                let norm = tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
                *scores.entry(ordinal).or_default() += idf * norm;
            }
        }
        let mut ranked: Vec<(u32, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.passages[a.0 as usize].id.cmp(&self.passages[b.0 as usize].id))
        });
        ranked.truncate(k);
        Ok(ranked
            .into_iter()
            .enumerate()
            .map(|(i, (ordinal, score))| PassageHit {
                passage: self.passages[ordinal as usize].clone(),
                score,
                rank: i + 1,
            })
            .collect())
    }

    fn write_to(&self, dir: &Path) -> Result<(), RetrievalError> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format_version: INDEX_FORMAT_VERSION,
            params: self.params,
            doc_count: self.passages.len(),
            total_length: self.total_length,
        };
        fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest).map_err(io_err)?)?;
        let mut out = BufWriter::new(fs::File::create(dir.join(PASSAGES))?);
        for p in &self.passages {
            serde_json::to_writer(&mut out, p).map_err(io_err)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        let mut out = BufWriter::new(fs::File::create(dir.join(POSTINGS))?);
        serde_json::to_writer(&mut out, &self.postings).map_err(io_err)?;
        out.flush()?;
        Ok(())
    }

    fn read_from(dir: &Path) -> Result<Self, RetrievalError> {
        let corrupt = |reason: String| RetrievalError::Corrupt {
            path: dir.to_path_buf(),
            reason,
        };
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)
            .map_err(|e| corrupt(format!("manifest: {e}")))?;
        if manifest.format_version != INDEX_FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {}", manifest.format_version)));
        }
        let mut passages = Vec::with_capacity(manifest.doc_count);
        for line in BufReader::new(fs::File::open(dir.join(PASSAGES))?).lines() {
            let line = line?;
            if !line.is_empty() {
                passages.push(serde_json::from_str::<Passage>(&line).map_err(|e| corrupt(format!("passages: {e}")))?);
            }
        }
        let postings: BTreeMap<String, Vec<(u32, u32)>> =
            serde_json::from_reader(BufReader::new(fs::File::open(dir.join(POSTINGS))?))
                .map_err(|e| corrupt(format!("postings: {e}")))?;
        if passages.len() != manifest.doc_count {
            return Err(corrupt(format!(
                "manifest lists {} passages, found {}",
                manifest.doc_count,
                passages.len()
            )));
        }
        // Lengths are derivable from the passages; recomputing them keeps the
        // on-disk format small.
        let lengths: Vec<u32> = passages.iter().map(|p| analyze(&p.text).len() as u32).collect();
        let total_length = lengths.iter().map(|&l| u64::from(l)).sum();
        if total_length != manifest.total_length {
            return Err(corrupt("term count mismatch".into()));
        }
        if postings.values().flatten().any(|&(o, _)| o as usize >= passages.len()) {
            return Err(corrupt("posting refers to unknown passage".into()));
        }
        Ok(Self {
            params: manifest.params,
            passages,
            lengths,
            total_length,
            postings,
        })
    }
}

fn io_err(e: serde_json::Error) -> std::io::Error {
    std::io::Error::other(e)
}

/// Shared, read-only access to an index. Clones share state, including the
/// closed flag.
#[derive(Debug, Clone)]
pub struct IndexHandle {
    inner: Arc<RwLock<Option<Arc<InvertedIndex>>>>,
    path: Option<PathBuf>,
}

impl IndexHandle {
    pub fn in_memory(index: InvertedIndex) -> Self {
        Self {
            inner: Arc::new(RwLock::new(Some(Arc::new(index)))),
            path: None,
        }
    }

    pub fn open(path: &Path) -> Result<Self, RetrievalError> {
        let index = InvertedIndex::read_from(path)?;
        Ok(Self {
            inner: Arc::new(RwLock::new(Some(Arc::new(index)))),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn get(&self) -> Result<Arc<InvertedIndex>, RetrievalError> {
        self.inner
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
            .ok_or(RetrievalError::IndexClosed)
    }

    pub fn search(&self, query: &str, k: usize) -> Result<Vec<PassageHit>, RetrievalError> {
        self.get()?.search(query, k)
    }

    pub fn doc_count(&self) -> Result<usize, RetrievalError> {
        Ok(self.get()?.doc_count())
    }

    pub fn index(&self) -> Result<Arc<InvertedIndex>, RetrievalError> {
        self.get()
    }

    pub fn close(&self) {
        *self.inner.write().unwrap_or_else(|e| e.into_inner()) = None;
    }
}

/// Builds an index and persists it at `path`, replacing any index already
/// there. A non-empty directory that is not an index is left untouched.
pub fn build_index<I>(passages: I, path: &Path) -> Result<IndexHandle, RetrievalError>
where
    I: IntoIterator<Item = Passage>,
{
    let index = InvertedIndex::build(passages)?;
    if path.exists() {
        let is_index = path.join(MANIFEST).is_file();
        let is_empty = path.is_dir() && fs::read_dir(path)?.next().is_none();
        if !is_index && !is_empty {
            return Err(RetrievalError::Io(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!("{} exists and is not an index directory", path.display()),
            )));
        }
    }
    let staging = staging_path(path);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    index.write_to(&staging)?;
    if path.exists() {
        fs::remove_dir_all(path)?;
    }
    fs::rename(&staging, path)?;
    Ok(IndexHandle {
        inner: Arc::new(RwLock::new(Some(Arc::new(index)))),
        path: Some(path.to_path_buf()),
    })
}

fn staging_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".staging-{}", std::process::id()));
    path.with_file_name(name)
}
