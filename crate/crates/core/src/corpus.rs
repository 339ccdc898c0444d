//! Long-context pretraining data preparation: long-document upsampling,
//! fixed-length sequence packing with document separators, corpus
//! statistics and the training manifest handed to downstream trainers.

use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{EXTENDED_ROPE_BASE, TARGET_CONTEXT};
use crate::tokenize::Tokenizer;

/// Native window of the base model being extended; used as the default
/// long-document threshold.
pub const DEFAULT_LONG_THRESHOLD: usize = 8192;
pub const DEFAULT_LONG_SHARE: f64 = 0.1;
pub const DEFAULT_TOTAL_TOKENS: u64 = 10_000_000_000;
pub const DEFAULT_SEPARATOR: &str = "<s>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub token_count: usize,
}

/// On-disk corpus line: `{"id": str, "text": str}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, tokenizer: &Tokenizer) -> Self {
        let text = text.into();
        let token_count = tokenizer.count(&text);
        Self {
            id: id.into(),
            text,
            token_count,
        }
    }

    /// A document known only by its length; packing never looks at text.
    pub fn with_length(id: impl Into<String>, token_count: usize) -> Self {
        Self {
            id: id.into(),
            text: String::new(),
            token_count,
        }
    }
}

/// Reads a JSONL corpus, rejecting duplicate ids.
pub fn read_corpus(path: &Path, tokenizer: &Tokenizer) -> Result<Vec<Document>> {
    read_jsonl_documents(path, tokenizer, false)
}

/// Reads a JSONL document stream such as upsampler output, where ids repeat.
pub fn read_document_stream(path: &Path, tokenizer: &Tokenizer) -> Result<Vec<Document>> {
    read_jsonl_documents(path, tokenizer, true)
}

fn read_jsonl_documents(
    path: &Path,
    tokenizer: &Tokenizer,
    allow_repeats: bool,
) -> Result<Vec<Document>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut seen = std::collections::HashSet::new();
    let mut docs = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDocument = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if !allow_repeats && !seen.insert(raw.id.clone()) {
            return Err(Error::Data(format!(
                "{}:{}: duplicate document id {:?}",
                path.display(),
                lineno + 1,
                raw.id
            )));
        }
        docs.push(Document::new(raw.id, raw.text, tokenizer));
    }
    Ok(docs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpsampleConfig {
    pub long_threshold_tokens: usize,
    /// Target share of emitted tokens that come from long documents.
    pub long_token_share: f64,
    pub target_total_tokens: u64,
    pub seed: u64,
}

impl Default for UpsampleConfig {
    fn default() -> Self {
        Self {
            long_threshold_tokens: DEFAULT_LONG_THRESHOLD,
            long_token_share: DEFAULT_LONG_SHARE,
            target_total_tokens: DEFAULT_TOTAL_TOKENS,
            seed: 0,
        }
    }
}

impl UpsampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.long_threshold_tokens == 0 {
            return Err(Error::Config(
                "long_threshold_tokens must be positive".into(),
            ));
        }
        if !(self.long_token_share > 0.0 && self.long_token_share <= 1.0) {
            return Err(Error::Config(format!(
                "long_token_share must lie in (0, 1], got {}",
                self.long_token_share
            )));
        }
        Ok(())
    }
}

/// Sampler over a corpus that steers the emitted long-token share.
///
/// Each draw picks a partition (long or short) and then a document from it
/// uniformly with replacement. The long partition is chosen whenever its
/// emitted token share has fallen below the target, so the realised share
/// tracks the target to within one document's worth of tokens.
#[derive(Debug)]
pub struct Upsample<'a> {
    corpus: &'a [Document],
    long: Vec<usize>,
    short: Vec<usize>,
    share: f64,
    target: u64,
    emitted: u64,
    emitted_long: u64,
    rng: ChaCha8Rng,
}

pub fn upsample<'a>(corpus: &'a [Document], cfg: &UpsampleConfig) -> Result<Upsample<'a>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("cannot upsample an empty corpus".into()));
    }
    let (long, short): (Vec<usize>, Vec<usize>) = (0..corpus.len())
        .filter(|&i| corpus[i].token_count > 0)
        .partition(|&i| corpus[i].token_count >= cfg.long_threshold_tokens);
    if long.is_empty() {
        return Err(Error::Config(format!(
            "corpus has no long documents (>= {} tokens)",
            cfg.long_threshold_tokens
        )));
    }
    if short.is_empty() && cfg.long_token_share < 1.0 {
        return Err(Error::Config(format!(
            "corpus has no short documents (< {} tokens)",
            cfg.long_threshold_tokens
        )));
    }
    Ok(Upsample {
        corpus,
        long,
        short,
        share: cfg.long_token_share,
        target: cfg.target_total_tokens,
        emitted: 0,
        emitted_long: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    })
}

impl<'a> Upsample<'a> {
    pub fn emitted_tokens(&self) -> u64 {
        self.emitted
    }

    pub fn realised_share(&self) -> f64 {
        if self.emitted == 0 {
            0.0
        } else {
            self.emitted_long as f64 / self.emitted as f64
        }
    }
}

impl<'a> Iterator for Upsample<'a> {
    type Item = &'a Document;

    fn next(&mut self) -> Option<&'a Document> {
        if self.emitted >= self.target {
            return None;
        }
        let take_long =
            self.short.is_empty() || (self.emitted_long as f64) < self.share * self.emitted as f64;
        let pool = if take_long { &self.long } else { &self.short };
        let doc = &self.corpus[pool[self.rng.random_range(0..pool.len())]];
        let n = doc.token_count as u64;
        self.emitted += n;
        if take_long {
            self.emitted_long += n;
        }
        Some(doc)
    }
}

/// How document boundaries inside a packed sequence are marked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SeparatorPolicy {
    /// A single special token such as `<s>` between documents.
    SpecialChar {
        token: String,
    },
    /// The reserved end/begin pair: `<eos>` then `<bos>`.
    BosEos,
    None,
}

impl Default for SeparatorPolicy {
    fn default() -> Self {
        SeparatorPolicy::SpecialChar {
            token: DEFAULT_SEPARATOR.to_string(),
        }
    }
}

impl SeparatorPolicy {
    pub fn special(token: impl Into<String>) -> Result<Self> {
        let token = token.into();
        if token.is_empty() {
            return Err(Error::Config("separator string must be non-empty".into()));
        }
        Ok(SeparatorPolicy::SpecialChar { token })
    }

    /// Length of one separator in tokens. Special strings are atomic.
    pub fn len_tokens(&self) -> usize {
        match self {
            SeparatorPolicy::SpecialChar { .. } => 1,
            SeparatorPolicy::BosEos => 2,
            SeparatorPolicy::None => 0,
        }
    }

    pub fn pieces(&self) -> Vec<&str> {
        match self {
            SeparatorPolicy::SpecialChar { token } => vec![token.as_str()],
            SeparatorPolicy::BosEos => vec!["<eos>", "<bos>"],
            SeparatorPolicy::None => vec![],
        }
    }
}

/// A run of one document's tokens inside a packed sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub doc_id: String,
    pub token_range: Range<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.token_range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_range.is_empty()
    }
}

/// One item of a packed sequence, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Piece {
    Segment(Segment),
    /// `tokens` separator tokens (fewer than a full separator only when the
    /// separator straddles a sequence boundary).
    Separator {
        tokens: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub pieces: Vec<Piece>,
    pub length_tokens: usize,
    pub separator_count: usize,
}

impl PackedSequence {
    fn empty() -> Self {
        Self {
            pieces: Vec::new(),
            length_tokens: 0,
            separator_count: 0,
        }
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.pieces.iter().filter_map(|p| match p {
            Piece::Segment(s) => Some(s),
            Piece::Separator { .. } => None,
        })
    }

    pub fn document_tokens(&self) -> usize {
        self.segments().map(Segment::len).sum()
    }
}

/// Greedy streaming packer.
///
/// Documents are appended in arrival order and split across sequences when
/// they overflow. A separator goes between consecutive documents unless the
/// boundary coincides with the start of a fresh sequence. Every emitted
/// sequence except the final one returned by [`SequencePacker::finish`] has
/// exactly `target_len` tokens.
#[derive(Debug)]
pub struct SequencePacker {
    target_len: usize,
    separator: SeparatorPolicy,
    current: PackedSequence,
    docs_seen: usize,
}

impl SequencePacker {
    pub fn new(target_len: usize, separator: SeparatorPolicy) -> Result<Self> {
        if target_len == 0 {
            return Err(Error::Argument("target_len must be positive".into()));
        }
        if target_len <= separator.len_tokens() {
            return Err(Error::Argument(format!(
                "target_len {target_len} must exceed the separator length {}",
                separator.len_tokens()
            )));
        }
        Ok(Self {
            target_len,
            separator,
            current: PackedSequence::empty(),
            docs_seen: 0,
        })
    }

    fn room(&self) -> usize {
        self.target_len - self.current.length_tokens
    }

    fn emit_if_full(&mut self, out: &mut Vec<PackedSequence>) {
        if self.room() == 0 {
            out.push(std::mem::replace(
                &mut self.current,
                PackedSequence::empty(),
            ));
        }
    }

    fn push_separator(&mut self, out: &mut Vec<PackedSequence>) {
        let mut left = self.separator.len_tokens();
        let mut first = true;
        while left > 0 {
            let take = left.min(self.room());
            self.current.pieces.push(Piece::Separator { tokens: take });
            self.current.length_tokens += take;
            if first {
                self.current.separator_count += 1;
                first = false;
            }
            left -= take;
            self.emit_if_full(out);
        }
    }

    /// Feeds one document, appending completed sequences to `out`.
    pub fn push(&mut self, doc_id: &str, token_count: usize, out: &mut Vec<PackedSequence>) {
        if token_count == 0 {
            return;
        }
        if self.docs_seen > 0 && self.current.length_tokens > 0 {
            self.push_separator(out);
        }
        self.docs_seen += 1;
        let mut offset = 0;
        while offset < token_count {
            let take = (token_count - offset).min(self.room());
            self.current.pieces.push(Piece::Segment(Segment {
                doc_id: doc_id.to_string(),
                token_range: offset..offset + take,
            }));
            self.current.length_tokens += take;
            offset += take;
            self.emit_if_full(out);
        }
    }

    pub fn finish(self) -> Option<PackedSequence> {
        (self.current.length_tokens > 0).then_some(self.current)
    }
}

/// Packs a whole document stream.
pub fn pack<'a, I>(docs: I, target_len: usize, sep: &SeparatorPolicy) -> Result<Vec<PackedSequence>>
where
    I: IntoIterator<Item = &'a Document>,
{
    let mut packer = SequencePacker::new(target_len, sep.clone())?;
    let mut out = Vec::new();
    for doc in docs {
        packer.push(&doc.id, doc.token_count, &mut out);
    }
    out.extend(packer.finish());
    Ok(out)
}

/// Flattens a packed sequence into token ids. `lookup` resolves doc ids to
/// their documents.
pub fn sequence_token_ids<'a>(
    seq: &PackedSequence,
    sep: &SeparatorPolicy,
    tokenizer: &Tokenizer,
    lookup: impl Fn(&str) -> Option<&'a Document>,
) -> Result<Vec<u32>> {
    if !tokenizer.has_vocab() {
        return Err(Error::Config(
            "token-id dumps require an external vocabulary".into(),
        ));
    }
    let sep_ids: Vec<u32> = sep
        .pieces()
        .iter()
        .filter_map(|p| tokenizer.piece_id(p))
        .collect();
    let mut ids = Vec::with_capacity(seq.length_tokens);
    let mut sep_cursor = 0;
    for (i, piece) in seq.pieces.iter().enumerate() {
        match piece {
            Piece::Segment(s) => {
                let doc = lookup(&s.doc_id)
                    .ok_or_else(|| Error::Data(format!("unknown document {:?}", s.doc_id)))?;
                let doc_ids = tokenizer.token_ids(&doc.text).unwrap_or_default();
                let slice = doc_ids.get(s.token_range.clone()).ok_or_else(|| {
                    Error::Data(format!(
                        "segment {:?} exceeds document {:?}",
                        s.token_range, s.doc_id
                    ))
                })?;
                ids.extend_from_slice(slice);
                sep_cursor = 0;
            }
            Piece::Separator { tokens } => {
                // a straddling separator's tail resumes at its second piece
                if i == 0 && *tokens < sep.len_tokens() {
                    sep_cursor = sep.len_tokens() - tokens;
                }
                for _ in 0..*tokens {
                    ids.push(sep_ids[sep_cursor % sep_ids.len()]);
                    sep_cursor += 1;
                }
            }
        }
    }
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBucket {
    /// Inclusive lower bound on token count.
    pub min_tokens: usize,
    /// Exclusive upper bound.
    pub max_tokens: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total_tokens: u64,
    pub doc_count: usize,
    /// Power-of-two buckets: `[0, 1)`, `[1, 2)`, `[2, 4)`, ...; only
    /// non-empty buckets are listed, in increasing order.
    pub length_histogram: Vec<HistogramBucket>,
    pub long_threshold_tokens: usize,
    pub long_token_share: f64,
}

fn bucket_of(n: usize) -> (usize, usize) {
    if n == 0 {
        return (0, 1);
    }
    let lo = 1usize << (usize::BITS - 1 - n.leading_zeros());
    (lo, lo.saturating_mul(2))
}

pub fn corpus_stats<'a, I>(docs: I, long_threshold_tokens: usize) -> CorpusStats
where
    I: IntoIterator<Item = &'a Document>,
{
    let mut total = 0u64;
    let mut long = 0u64;
    let mut count = 0usize;
    let mut buckets = std::collections::BTreeMap::<usize, (usize, usize)>::new();
    for doc in docs {
        let n = doc.token_count;
        total += n as u64;
        if n >= long_threshold_tokens {
            long += n as u64;
        }
        count += 1;
        let (lo, hi) = bucket_of(n);
        buckets.entry(lo).or_insert((hi, 0)).1 += 1;
    }
    CorpusStats {
        total_tokens: total,
        doc_count: count,
        length_histogram: buckets
            .into_iter()
            .map(|(lo, (hi, c))| HistogramBucket {
                min_tokens: lo,
                max_tokens: hi,
                count: c,
            })
            .collect(),
        long_threshold_tokens,
        long_token_share: if total == 0 {
            0.0
        } else {
            long as f64 / total as f64
        },
    }
}

/// Summary of a packed stream recorded alongside the trainer settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PackedStats {
    pub sequences: usize,
    pub document_tokens: u64,
    pub separator_tokens: u64,
}

impl PackedStats {
    pub fn from_sequences(seqs: &[PackedSequence]) -> Self {
        let document_tokens: u64 = seqs.iter().map(|s| s.document_tokens() as u64).sum();
        let total: u64 = seqs.iter().map(|s| s.length_tokens as u64).sum();
        Self {
            sequences: seqs.len(),
            document_tokens,
            separator_tokens: total - document_tokens,
        }
    }
}

/// Continued-pretraining hyperparameters for context extension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub rope_base: f64,
    pub sequence_length: usize,
    pub separator: SeparatorPolicy,
}

impl Default for TrainingHyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            batch_size: 32,
            steps: 2000,
            rope_base: EXTENDED_ROPE_BASE,
            sequence_length: TARGET_CONTEXT,
            separator: SeparatorPolicy::default(),
        }
    }
}

impl TrainingHyperparams {
    pub fn tokens_per_batch(&self) -> u64 {
        (self.batch_size * self.sequence_length) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    #[serde(flatten)]
    pub hyperparams: TrainingHyperparams,
    pub tokens_per_batch: u64,
    pub total_training_tokens: u64,
    pub packed: PackedStats,
}

impl TrainingManifest {
    pub fn new(hyperparams: TrainingHyperparams, packed: PackedStats) -> Self {
        let tokens_per_batch = hyperparams.tokens_per_batch();
        Self {
            total_training_tokens: tokens_per_batch * hyperparams.steps as u64,
            tokens_per_batch,
            hyperparams,
            packed,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn emit_training_manifest(path: &Path, manifest: &TrainingManifest) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(manifest.to_json()?.as_bytes())
        .map_err(|e| Error::io(path, e))
}
