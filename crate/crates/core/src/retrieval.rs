//! Chunk-wise retrieval over a single long document.
//!
//! Documents are tiled into disjoint token windows, chunks and query are
//! embedded (unit-normalised, so cosine similarity is a dot product), and
//! the top-k chunks are assembled into a prompt context.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::{slice_spans, Tokenizer};

pub const DEFAULT_CHUNK_SIZE: usize = 1200;
pub const DEFAULT_TOP_K: usize = 5;
/// Top-k used when retrieving over documents beyond 100K tokens.
pub const ULTRA_LONG_TOP_K: usize = 30;
pub const CHUNK_JOINER: &str = "\n\n";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderPolicy {
    /// Selected chunks restored to source order.
    #[default]
    DocumentOrder,
    /// Most similar chunk first.
    RelevanceOrder,
}

impl fmt::Display for OrderPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrderPolicy::DocumentOrder => "document-order",
            OrderPolicy::RelevanceOrder => "relevance-order",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub chunk_size_tokens: usize,
    pub top_k: usize,
    pub order_policy: OrderPolicy,
    /// Tokens shared by consecutive chunks; 0 tiles the document.
    pub overlap_tokens: usize,
    pub query_prefix: String,
    pub passage_prefix: String,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            chunk_size_tokens: DEFAULT_CHUNK_SIZE,
            top_k: DEFAULT_TOP_K,
            order_policy: OrderPolicy::DocumentOrder,
            overlap_tokens: 0,
            query_prefix: "query: ".into(),
            passage_prefix: "passage: ".into(),
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_size_tokens == 0 {
            return Err(Error::Config("chunk_size_tokens must be positive".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.overlap_tokens >= self.chunk_size_tokens {
            return Err(Error::Config(format!(
                "overlap {} must be smaller than chunk size {}",
                self.overlap_tokens, self.chunk_size_tokens
            )));
        }
        Ok(())
    }

    /// Nominal retrieved-token budget, `k × chunk_size`.
    pub fn retrieved_token_budget(&self) -> usize {
        self.top_k * self.chunk_size_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChunkId {
    pub doc_id: String,
    pub index: usize,
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.doc_id, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub index: usize,
    pub text: String,
    pub token_range: (usize, usize),
}

impl Chunk {
    pub fn id(&self) -> ChunkId {
        ChunkId {
            doc_id: self.doc_id.clone(),
            index: self.index,
        }
    }

    pub fn token_len(&self) -> usize {
        self.token_range.1 - self.token_range.0
    }
}

pub fn chunk_document(
    doc_id: &str,
    text: &str,
    cfg: &RetrievalConfig,
    tokenizer: &Tokenizer,
) -> Result<Vec<Chunk>> {
    cfg.validate()?;
    let spans = tokenizer.spans(text);
    let n = spans.len();
    let stride = cfg.chunk_size_tokens - cfg.overlap_tokens;
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + cfg.chunk_size_tokens).min(n);
        chunks.push(Chunk {
            doc_id: doc_id.to_string(),
            index: chunks.len(),
            text: slice_spans(text, &spans, start, end)?.to_string(),
            token_range: (start, end),
        });
        if end == n {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}

/// Unit-L2-norm embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Normalises `values`; rejects empty, non-finite or zero vectors.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Argument("embedding has no dimensions".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument(
                "embedding contains non-finite values".into(),
            ));
        }
        let norm = values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(Error::Argument("embedding has zero norm".into()));
        }
        Ok(Self(
            values
                .into_iter()
                .map(|v| (f64::from(v) / norm) as f32)
                .collect(),
        ))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    /// Cosine similarity (both sides are unit vectors).
    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// Anything that can turn texts into unit embeddings, order preserved.
pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub id: ChunkId,
    pub score: f64,
}

/// Ordering where `Greater` means ranked earlier: higher score, then lower
/// chunk index, then lexicographically smaller doc id.
pub fn ranking_order(a: &Ranked, b: &Ranked) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then_with(|| b.id.index.cmp(&a.id.index))
        .then_with(|| b.id.doc_id.cmp(&a.id.doc_id))
}

struct HeapEntry(Ranked);

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        ranking_order(&self.0, &other.0)
    }
}

/// Top-`k` chunks by cosine similarity, best first.
///
/// Keeps a bounded min-heap of the current best `k`, so the scan is
/// `O(n log k)`.
pub fn rank_chunks(
    query: &Embedding,
    chunks: &[(ChunkId, Embedding)],
    k: usize,
) -> Result<Vec<Ranked>> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let mut heap: BinaryHeap<Reverse<HeapEntry>> = BinaryHeap::with_capacity(k + 1);
    for (id, vec) in chunks {
        if vec.dim() != query.dim() {
            return Err(Error::Argument(format!(
                "dimension mismatch: query has {}, chunk {id} has {}",
                query.dim(),
                vec.dim()
            )));
        }
        let entry = HeapEntry(Ranked {
            id: id.clone(),
            score: query.cosine(vec),
        });
        if heap.len() < k {
            heap.push(Reverse(entry));
        } else if let Some(Reverse(worst)) = heap.peek() {
            if entry > *worst {
                heap.pop();
                heap.push(Reverse(entry));
            }
        }
    }
    let mut out: Vec<Ranked> = heap.into_iter().map(|Reverse(e)| e.0).collect();
    out.sort_by(|a, b| ranking_order(b, a));
    Ok(out)
}

/// Joins selected chunks with blank lines in the configured order.
pub fn assemble_context(selected: &[Chunk], order: OrderPolicy) -> Result<String> {
    if selected.is_empty() {
        return Err(Error::Argument("no chunks selected".into()));
    }
    let mut chunks: Vec<&Chunk> = selected.iter().collect();
    if order == OrderPolicy::DocumentOrder {
        chunks.sort_by(|a, b| a.doc_id.cmp(&b.doc_id).then(a.index.cmp(&b.index)));
    }
    Ok(chunks
        .iter()
        .map(|c| c.text.as_str())
        .collect::<Vec<_>>()
        .join(CHUNK_JOINER))
}

/// Outcome of retrieving over one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub ranked: Vec<Ranked>,
    /// Selected chunks in emitted order.
    pub selected: Vec<Chunk>,
    pub context: String,
    pub retrieved_tokens: usize,
    pub total_chunks: usize,
}

/// Chunk, embed, rank and assemble in one call.
pub fn retrieve(
    doc_id: &str,
    document: &str,
    query: &str,
    cfg: &RetrievalConfig,
    tokenizer: &Tokenizer,
    embedder: &dyn Embedder,
) -> Result<Retrieval> {
    let chunks = chunk_document(doc_id, document, cfg, tokenizer)?;
    if chunks.is_empty() {
        return Err(Error::Data(format!("document {doc_id:?} has no tokens")));
    }
    let mut inputs: Vec<String> = Vec::with_capacity(chunks.len() + 1);
    inputs.push(format!("{}{query}", cfg.query_prefix));
    inputs.extend(
        chunks
            .iter()
            .map(|c| format!("{}{}", cfg.passage_prefix, c.text)),
    );
    let mut vectors = embedder.embed(&inputs)?;
    if vectors.len() != inputs.len() {
        return Err(Error::Protocol(format!(
            "embedder returned {} vectors for {} inputs",
            vectors.len(),
            inputs.len()
        )));
    }
    let chunk_vecs: Vec<(ChunkId, Embedding)> = chunks
        .iter()
        .map(Chunk::id)
        .zip(vectors.drain(1..))
        .collect();
    let ranked = rank_chunks(&vectors[0], &chunk_vecs, cfg.top_k)?;
    let mut selected: Vec<Chunk> = ranked.iter().map(|r| chunks[r.id.index].clone()).collect();
    if cfg.order_policy == OrderPolicy::DocumentOrder {
        selected.sort_by_key(|c| c.index);
    }
    let context = assemble_context(&selected, cfg.order_policy)?;
    Ok(Retrieval {
        retrieved_tokens: selected.iter().map(Chunk::token_len).sum(),
        total_chunks: chunks.len(),
        ranked,
        selected,
        context,
    })
}
