//! Demonstration selection: seeded random prefixes, Okapi BM25 retrieval,
//! a lexical-recall selector and plug-in precomputed similarity matrices.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{Dataset, Example};
use crate::prompting::split_tokens;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("requested {k} demonstrations but only {available} are available")]
    TooMany { k: usize, available: usize },
    #[error("bm25 needs k1 > 0 and 0 <= b <= 1 (got k1={k1}, b={b})")]
    BadParams { k1: f64, b: f64 },
    #[error("similarity matrix: {0}")]
    Similarity(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// Function words removed before lexical matching. Punctuation and newlines
/// are dropped separately.
pub const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are", "as", "at",
    "be", "because", "been", "before", "being", "below", "between", "both", "but", "by", "can", "could",
    "did", "do", "does", "doing", "down", "during", "each", "few", "for", "from", "further", "had", "has",
    "have", "having", "he", "her", "here", "hers", "herself", "him", "himself", "his", "how", "i", "if",
    "in", "into", "is", "it", "its", "itself", "just", "me", "more", "most", "my", "myself", "no", "nor",
    "not", "now", "of", "off", "on", "once", "only", "or", "other", "our", "ours", "ourselves", "out",
    "over", "own", "same", "she", "should", "so", "some", "such", "than", "that", "the", "their",
    "theirs", "them", "themselves", "then", "there", "these", "they", "this", "those", "through", "to",
    "too", "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
    "yourselves",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Lowercased content tokens: stopwords, punctuation and newlines removed.
pub fn content_terms(text: &str) -> Vec<String> {
    split_tokens(text)
        .into_iter()
        .filter(|t| t.chars().any(|c| c.is_alphanumeric()) && !is_stopword(t))
        .collect()
}

fn distinct_in_order(terms: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    terms.into_iter().filter(|t| seen.insert(t.clone())).collect()
}

/// What text of a demonstration the lexical retrievers compare against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocField {
    /// Input followed by the label.
    #[default]
    FullDemo,
    InputOnly,
}

impl DocField {
    pub fn text(&self, e: &Example) -> String {
        match self {
            DocField::FullDemo => format!("{} {}", e.input, e.label),
            DocField::InputOnly => e.input.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    #[serde(default = "default_k1")]
    pub k1: f64,
    #[serde(default = "default_b")]
    pub b: f64,
}

fn default_k1() -> f64 {
    1.5
}

fn default_b() -> f64 {
    0.75
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), SelectionError> {
        if self.k1 > 0.0 && (0.0..=1.0).contains(&self.b) {
            Ok(())
        } else {
            Err(SelectionError::BadParams { k1: self.k1, b: self.b })
        }
    }
}

/// How demonstrations are chosen for a grid point. The seed for shuffles,
/// fill-up sampling and tie handling comes from the experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionStrategy {
    RandomPrefix,
    Bm25 {
        #[serde(flatten, default)]
        params: Bm25Params,
        #[serde(default)]
        field: DocField,
    },
    RecallOverlap,
    /// Rows of an externally computed test-by-train similarity matrix.
    Precomputed { path: PathBuf },
}

impl SelectionStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            SelectionStrategy::RandomPrefix => "random_prefix",
            SelectionStrategy::Bm25 { .. } => "bm25",
            SelectionStrategy::RecallOverlap => "recall_overlap",
            SelectionStrategy::Precomputed { .. } => "precomputed",
        }
    }

    /// Whether every test example shares one demonstration set.
    pub fn is_shared(&self) -> bool {
        matches!(self, SelectionStrategy::RandomPrefix)
    }

    pub fn validate(&self) -> Result<(), SelectionError> {
        match self {
            SelectionStrategy::Bm25 { params, .. } => params.validate(),
            _ => Ok(()),
        }
    }
}

/// Chosen demonstration indices; the first `ranked` came from scoring, the
/// rest from seeded fill-up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub ranked: usize,
}

fn check_k(k: usize, available: usize) -> Result<(), SelectionError> {
    if k > available {
        Err(SelectionError::TooMany { k, available })
    } else {
        Ok(())
    }
}

/// First `k` entries of the seed-determined permutation of `0..n`.
pub fn random_prefix(n: usize, k: usize, seed: u64) -> Result<Vec<usize>, SelectionError> {
    check_k(k, n)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm.truncate(k);
    Ok(perm)
}

/// Top `k` positive scores (ties by lower index), then seeded uniform
/// fill-up from the remaining indices.
pub fn rank_with_fill(scores: &[f64], k: usize, seed: u64) -> Result<Selection, SelectionError> {
    check_k(k, scores.len())?;
    let mut hits: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > 0.0).collect();
    hits.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    hits.truncate(k);
    let ranked = hits.len();
    if ranked < k {
        let taken: HashSet<usize> = hits.iter().copied().collect();
        let mut rest: Vec<usize> = (0..scores.len()).filter(|i| !taken.contains(i)).collect();
        rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        hits.extend_from_slice(&rest[..k - ranked]);
    }
    Ok(Selection { indices: hits, ranked })
}

/// Okapi BM25 over an inverted index built once per corpus.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    postings: HashMap<String, Vec<(usize, u32)>>,
    doc_len: Vec<usize>,
    avg_len: f64,
}

impl Bm25Index {
    /// `docs` are already-analyzed term lists.
    pub fn build(docs: &[Vec<String>], params: Bm25Params) -> Result<Self, SelectionError> {
        params.validate()?;
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        for (d, terms) in docs.iter().enumerate() {
            let mut tf: HashMap<&str, u32> = HashMap::new();
            for t in terms {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            let mut tf: Vec<_> = tf.into_iter().collect();
            tf.sort();
            for (t, c) in tf {
                postings.entry(t.to_string()).or_default().push((d, c));
            }
        }
        let doc_len: Vec<usize> = docs.iter().map(Vec::len).collect();
        let total: usize = doc_len.iter().sum();
        let avg_len = if docs.is_empty() { 0.0 } else { total as f64 / docs.len() as f64 };
        Ok(Self {
            params,
            postings,
            doc_len,
            avg_len,
        })
    }

    pub fn from_texts<S: AsRef<str>>(texts: &[S], params: Bm25Params) -> Result<Self, SelectionError> {
        let docs: Vec<Vec<String>> = texts.iter().map(|t| content_terms(t.as_ref())).collect();
        Self::build(&docs, params)
    }

    pub fn from_dataset(d: &Dataset, field: DocField, params: Bm25Params) -> Result<Self, SelectionError> {
        let texts: Vec<String> = d.train.iter().map(|e| field.text(e)).collect();
        Self::from_texts(&texts, params)
    }

    pub fn len(&self) -> usize {
        self.doc_len.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_len.is_empty()
    }

    pub fn idf(&self, df: usize) -> f64 {
        let n = self.len() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Scores every document against the distinct query terms.
    pub fn scores(&self, query_terms: &[String]) -> Vec<f64> {
        let mut scores = vec![0.0; self.len()];
        let Bm25Params { k1, b } = self.params;
        for term in distinct_in_order(query_terms.to_vec()) {
            let Some(list) = self.postings.get(&term) else { continue };
            let idf = self.idf(list.len());
            for &(d, tf) in list {
                let tf = tf as f64;
                let norm = 1.0 - b + b * self.doc_len[d] as f64 / self.avg_len;
                scores[d] += idf * tf * (k1 + 1.0) / (tf + k1 * norm);
            }
        }
        scores
    }

    pub fn select(&self, query: &str, k: usize, seed: u64) -> Result<Selection, SelectionError> {
        rank_with_fill(&self.scores(&content_terms(query)), k, seed)
    }
}

/// BM25 retrieval of `k` training demonstrations for `query`.
pub fn bm25_select(index: &Bm25Index, query: &str, k: usize, seed: u64) -> Result<Selection, SelectionError> {
    index.select(query, k, seed)
}

/// Set-recall scorer: fraction of distinct query terms present in the demo input.
#[derive(Debug, Clone)]
pub struct RecallIndex {
    docs: Vec<HashSet<String>>,
}

impl RecallIndex {
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        Self {
            docs: texts
                .iter()
                .map(|t| content_terms(t.as_ref()).into_iter().collect())
                .collect(),
        }
    }

    pub fn from_dataset(d: &Dataset) -> Self {
        let texts: Vec<&str> = d.train.iter().map(|e| e.input.as_str()).collect();
        Self::from_texts(&texts)
    }

    pub fn scores(&self, query: &str) -> Vec<f64> {
        let q: HashSet<String> = content_terms(query).into_iter().collect();
        if q.is_empty() {
            return vec![0.0; self.docs.len()];
        }
        self.docs
            .iter()
            .map(|d| q.iter().filter(|t| d.contains(*t)).count() as f64 / q.len() as f64)
            .collect()
    }
}

pub fn recall_overlap_select(index: &RecallIndex, query: &str, k: usize, seed: u64) -> Result<Selection, SelectionError> {
    rank_with_fill(&index.scores(query), k, seed)
}

/// Test-by-train similarity scores, stored as `n_queries u32, n_docs u32`
/// followed by row-major little-endian f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub n_queries: usize,
    pub n_docs: usize,
    pub data: Vec<f32>,
}

impl SimilarityMatrix {
    pub fn new(n_queries: usize, n_docs: usize, data: Vec<f32>) -> Result<Self, SelectionError> {
        if data.len() != n_queries * n_docs {
            return Err(SelectionError::Similarity(format!(
                "{} values for a {n_queries}x{n_docs} matrix",
                data.len()
            )));
        }
        Ok(Self { n_queries, n_docs, data })
    }

    pub fn row(&self, q: usize) -> &[f32] {
        &self.data[q * self.n_docs..(q + 1) * self.n_docs]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 + 4 * self.data.len());
        buf.extend_from_slice(&(self.n_queries as u32).to_le_bytes());
        buf.extend_from_slice(&(self.n_docs as u32).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, SelectionError> {
        if buf.len() < 8 {
            return Err(SelectionError::Similarity("truncated header".into()));
        }
        let n_queries = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
        let n_docs = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let body = &buf[8..];
        if body.len() as u64 != 4 * n_queries as u64 * n_docs as u64 {
            return Err(SelectionError::Similarity(format!(
                "expected {} bytes of scores for {n_queries}x{n_docs}, found {}",
                4 * n_queries * n_docs,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(n_queries, n_docs, data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SelectionError> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|source| SelectionError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SelectionError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| SelectionError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Top `k` documents for query `q` by descending score, ties by lower index.
    pub fn select(&self, q: usize, k: usize) -> Result<Selection, SelectionError> {
        if q >= self.n_queries {
            return Err(SelectionError::Similarity(format!("query {q} outside {} rows", self.n_queries)));
        }
        check_k(k, self.n_docs)?;
        let row = self.row(q);
        let mut idx: Vec<usize> = (0..self.n_docs).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        idx.truncate(k);
        Ok(Selection { indices: idx, ranked: k })
    }
}
