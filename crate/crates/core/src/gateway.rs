//! Access to chat-completion and embedding services.
//!
//! Requests are hashed over a canonical serialization and answered from an
//! on-disk cache when possible (`<root>/<first-2-hash-chars>/<hash>.json`,
//! written atomically). Backends are pluggable: an HTTP client for
//! chat-completions style services, and deterministic offline stubs that
//! make the whole harness runnable without a network.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use regex::Regex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::retrieval::{Embedder, Embedding};
use crate::task::{EvalTask, TaskType};
use crate::tokenize::{slice_spans, Tokenizer};

pub const TEMPLATE_VERSION: &str = "v1";
pub const ENV_API_BASE: &str = "LCL_API_BASE";
pub const ENV_API_KEY: &str = "LCL_API_KEY";
pub const ENV_EMBED_API_BASE: &str = "LCL_EMBED_API_BASE";
pub const ENV_EMBED_API_KEY: &str = "LCL_EMBED_API_KEY";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    #[serde(default)]
    pub temperature: f64,
    pub max_output_tokens: usize,
}

impl ChatRequest {
    /// Chat-completions request body.
    pub fn wire_body(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "messages": self.messages,
            "temperature": self.temperature,
            "max_tokens": self.max_output_tokens,
        })
    }

    /// Sorted keys, no insignificant whitespace, UTF-8.
    pub fn canonical_json(&self) -> String {
        // serde_json's map is ordered by key, so this output is canonical
        serde_json::to_string(&self.wire_body()).expect("request serializes")
    }

    pub fn request_hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }

    pub fn last_user_message(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str())
    }
}

/// File-per-entry response cache.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, hash: &str) -> PathBuf {
        let prefix = hash.get(..2).unwrap_or(hash);
        self.root.join(prefix).join(format!("{hash}.json"))
    }

    pub fn get<T: DeserializeOwned>(&self, hash: &str) -> Result<Option<T>> {
        let path = self.path_for(hash);
        match std::fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Write-temp-then-rename so readers never observe partial entries.
    pub fn put<T: Serialize>(&self, hash: &str, value: &T) -> Result<()> {
        let path = self.path_for(hash);
        let dir = path.parent().expect("cache path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        serde_json::to_writer(&mut tmp, value)?;
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CachedCompletion {
    request: serde_json::Value,
    text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CachedEmbedding {
    model: String,
    vector: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
    pub timeout_secs: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff_ms: 250,
            multiplier: 2.0,
            timeout_secs: 600,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(attempt as i32);
        Duration::from_millis(ms as u64)
    }
}

/// Base URL plus optional bearer key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub base_url: String,
    #[serde(skip_serializing, default)]
    pub api_key: Option<String>,
}

impl Endpoint {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
        }
    }

    pub fn chat_from_env() -> Option<Self> {
        Self::from_env(ENV_API_BASE, ENV_API_KEY)
    }

    /// Embedding endpoint; falls back to the chat pair when unset.
    pub fn embed_from_env() -> Option<Self> {
        Self::from_env(ENV_EMBED_API_BASE, ENV_EMBED_API_KEY).or_else(Self::chat_from_env)
    }

    fn from_env(base: &str, key: &str) -> Option<Self> {
        let url = std::env::var(base).ok().filter(|s| !s.is_empty())?;
        Some(Self::new(
            url,
            std::env::var(key).ok().filter(|s| !s.is_empty()),
        ))
    }
}

/// Something that produces completions.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<String>;
    fn describe(&self) -> String;
}

/// Something that produces raw (unnormalised) embedding vectors.
pub trait EmbeddingBackend: Send + Sync {
    fn embed_raw(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f32>>>;
    fn describe(&self) -> String;
}

/// JSON-over-HTTP client for chat-completions and embeddings services.
#[derive(Debug)]
pub struct HttpClient {
    endpoint: Endpoint,
    retry: RetryPolicy,
    agent: ureq::Agent,
    requests: AtomicUsize,
}

impl HttpClient {
    pub fn new(endpoint: Endpoint, retry: RetryPolicy) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(retry.timeout_secs)))
            .build()
            .into();
        Self {
            endpoint,
            retry,
            agent,
            requests: AtomicUsize::new(0),
        }
    }

    /// HTTP requests attempted so far, retries included.
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn post(&self, path: &str, body: &serde_json::Value) -> Result<serde_json::Value> {
        let url = format!("{}/{path}", self.endpoint.base_url);
        let mut last = Error::Transport {
            status: None,
            message: "no attempt made".into(),
        };
        for attempt in 0..=self.retry.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.retry.backoff(attempt - 1));
            }
            self.requests.fetch_add(1, Ordering::SeqCst);
            let mut req = self
                .agent
                .post(&url)
                .header("Content-Type", "application/json");
            if let Some(key) = &self.endpoint.api_key {
                req = req.header("Authorization", format!("Bearer {key}"));
            }
            match req.send(serde_json::to_vec(body)?) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    if (200..300).contains(&status) {
                        return serde_json::from_str(&text)
                            .map_err(|e| Error::Protocol(format!("invalid JSON from {url}: {e}")));
                    }
                    last = Error::Transport {
                        status: Some(status),
                        message: truncate_for_log(&text),
                    };
                    if !(status == 429 || status >= 500) {
                        break;
                    }
                }
                Err(e) => {
                    last = Error::Transport {
                        status: None,
                        message: e.to_string(),
                    };
                }
            }
            log::warn!("request to {url} failed (attempt {}): {last}", attempt + 1);
        }
        Err(last)
    }
}

fn truncate_for_log(s: &str) -> String {
    let mut end = s.len().min(200);
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    s[..end].to_string()
}

impl ChatBackend for HttpClient {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let v = self.post("chat/completions", &req.wire_body())?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Protocol("response lacks choices[0].message.content".into()))
    }

    fn describe(&self) -> String {
        format!("http:{}", self.endpoint.base_url)
    }
}

impl EmbeddingBackend for HttpClient {
    fn embed_raw(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let body = serde_json::json!({ "model": model, "input": texts });
        let v = self.post("embeddings", &body)?;
        let data = v
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| Error::Protocol("embedding response lacks data[]".into()))?;
        let mut out: Vec<Option<Vec<f32>>> = vec![None; texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let idx = item
                .get("index")
                .and_then(|i| i.as_u64())
                .map_or(pos, |i| i as usize);
            let vec: Vec<f32> = item
                .get("embedding")
                .map(|e| serde_json::from_value(e.clone()))
                .transpose()?
                .ok_or_else(|| Error::Protocol("embedding item lacks vector".into()))?;
            let slot = out
                .get_mut(idx)
                .ok_or_else(|| Error::Protocol(format!("embedding index {idx} out of range")))?;
            *slot = Some(vec);
        }
        out.into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| Error::Protocol(format!("missing embedding {i}"))))
            .collect()
    }

    fn describe(&self) -> String {
        format!("http:{}", self.endpoint.base_url)
    }
}

/// Offline chat models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StubModelSpec {
    /// Answers with the first capture group of the first pattern found in
    /// the prompt, or an empty string.
    NeedleExtractor {
        #[serde(default = "default_needle_patterns")]
        patterns: Vec<String>,
    },
    /// Echoes the first `k` tokens of the prompt.
    EchoFirstK {
        k: usize,
    },
    FixedAnswer {
        answer: String,
    },
}

impl StubModelSpec {
    pub fn needle_extractor() -> Self {
        StubModelSpec::NeedleExtractor {
            patterns: default_needle_patterns(),
        }
    }
}

/// Patterns for the passkey and sandwich needles plus the synthetic
/// evidence sentence used by sweep fixtures.
pub fn default_needle_patterns() -> Vec<String> {
    vec![
        r"The pass key is (\d+)\. Remember it\. \d+ is the pass key\.".into(),
        r"The best thing to do in San Francisco is (.+?) on a sunny day\.".into(),
        r"The access code for the \w+ vault is (\w+)\.".into(),
    ]
}

#[derive(Debug)]
pub struct StubChat {
    spec: StubModelSpec,
    patterns: Vec<Regex>,
    tokenizer: Tokenizer,
}

impl StubChat {
    pub fn new(spec: StubModelSpec) -> Result<Self> {
        let patterns = match &spec {
            StubModelSpec::NeedleExtractor { patterns } => patterns
                .iter()
                .map(|p| {
                    Regex::new(p).map_err(|e| Error::Config(format!("bad stub pattern {p:?}: {e}")))
                })
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        Ok(Self {
            spec,
            patterns,
            tokenizer: Tokenizer::default_rule(),
        })
    }
}

impl ChatBackend for StubChat {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let prompt = req.last_user_message();
        Ok(match &self.spec {
            StubModelSpec::NeedleExtractor { .. } => self
                .patterns
                .iter()
                .find_map(|re| re.captures(prompt))
                .and_then(|c| c.get(1).or_else(|| c.get(0)))
                .map_or(String::new(), |m| m.as_str().to_string()),
            StubModelSpec::EchoFirstK { k } => {
                let spans = self.tokenizer.spans(prompt);
                slice_spans(prompt, &spans, 0, (*k).min(spans.len()))?.to_string()
            }
            StubModelSpec::FixedAnswer { answer } => answer.clone(),
        })
    }

    fn describe(&self) -> String {
        format!(
            "stub:{}",
            serde_json::to_string(&self.spec).unwrap_or_default()
        )
    }
}

/// Offline embedders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StubEmbedderSpec {
    /// Pseudo-random unit vector seeded by the SHA-256 of the text.
    TextHash { dim: usize },
    /// Signed feature hashing of lowercase word counts (log-scaled), so
    /// texts sharing words are similar.
    FeatureHash { dim: usize },
}

#[derive(Debug, Clone)]
pub struct StubEmbedder {
    spec: StubEmbedderSpec,
}

impl StubEmbedder {
    pub fn new(spec: StubEmbedderSpec) -> Result<Self> {
        let dim = match spec {
            StubEmbedderSpec::TextHash { dim } | StubEmbedderSpec::FeatureHash { dim } => dim,
        };
        if dim == 0 {
            return Err(Error::Config(
                "stub embedder dimension must be positive".into(),
            ));
        }
        Ok(Self { spec })
    }
}

/// The text-hash stub vector (before normalisation).
pub fn text_hash_vector(text: &str, dim: usize) -> Vec<f32> {
    let digest = Sha256::digest(text.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn feature_hash_vector(text: &str, dim: usize) -> Vec<f32> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for tok in crate::metrics::rouge_tokens(text) {
        *counts.entry(tok).or_insert(0) += 1;
    }
    let mut v = vec![0f32; dim];
    for (tok, n) in counts {
        let h = Sha256::digest(tok.as_bytes());
        let idx = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) % dim as u64;
        let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
        v[idx as usize] += sign * (1.0 + (n as f32).ln());
    }
    if v.iter().all(|&x| x == 0.0) {
        v[0] = 1.0;
    }
    v
}

impl EmbeddingBackend for StubEmbedder {
    fn embed_raw(&self, _model: &str, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts
            .iter()
            .map(|t| match self.spec {
                StubEmbedderSpec::TextHash { dim } => text_hash_vector(t, dim),
                StubEmbedderSpec::FeatureHash { dim } => feature_hash_vector(t, dim),
            })
            .collect())
    }

    fn describe(&self) -> String {
        format!(
            "stub:{}",
            serde_json::to_string(&self.spec).unwrap_or_default()
        )
    }
}

fn duplicate_error(e: &Error) -> Error {
    match e {
        Error::Transport { status, message } => Error::Transport {
            status: *status,
            message: message.clone(),
        },
        Error::Protocol(m) => Error::Protocol(m.clone()),
        Error::Config(m) => Error::Config(m.clone()),
        Error::Argument(m) => Error::Argument(m.clone()),
        Error::Data(m) => Error::Data(m.clone()),
        other => Error::Transport {
            status: None,
            message: other.to_string(),
        },
    }
}

type InFlight = Arc<OnceLock<Result<String, Error>>>;

/// Cached, deduplicating front for a [`ChatBackend`].
pub struct ChatGateway {
    backend: Arc<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    inflight: Mutex<HashMap<String, InFlight>>,
    backend_calls: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl fmt::Debug for ChatGateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChatGateway")
            .field("backend", &self.backend.describe())
            .field("cache", &self.cache)
            .finish()
    }
}

impl ChatGateway {
    pub fn new(backend: Arc<dyn ChatBackend>, cache: Option<ResponseCache>) -> Self {
        Self {
            backend,
            cache,
            inflight: Mutex::new(HashMap::new()),
            backend_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        }
    }

    pub fn describe(&self) -> String {
        self.backend.describe()
    }

    /// Requests that reached the backend (cache misses).
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::SeqCst)
    }

    fn lookup(&self, hash: &str) -> Result<Option<String>> {
        match &self.cache {
            Some(cache) => Ok(cache.get::<CachedCompletion>(hash)?.map(|c| c.text)),
            None => Ok(None),
        }
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<String> {
        let hash = req.request_hash();
        if let Some(text) = self.lookup(&hash)? {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(text);
        }
        let cell = {
            let mut map = self.inflight.lock().expect("inflight lock");
            map.entry(hash.clone()).or_default().clone()
        };
        let mut ran = false;
        let result = cell.get_or_init(|| {
            ran = true;
            if let Ok(Some(text)) = self.lookup(&hash) {
                return Ok(text);
            }
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            let text = self.backend.complete(req)?;
            if let Some(cache) = &self.cache {
                cache.put(
                    &hash,
                    &CachedCompletion {
                        request: req.wire_body(),
                        text: text.clone(),
                    },
                )?;
            }
            Ok(text)
        });
        if ran {
            self.inflight.lock().expect("inflight lock").remove(&hash);
        }
        match result {
            Ok(text) => Ok(text.clone()),
            Err(e) => Err(duplicate_error(e)),
        }
    }
}

/// Cached front for an [`EmbeddingBackend`]; implements [`Embedder`].
pub struct EmbeddingGateway {
    backend: Arc<dyn EmbeddingBackend>,
    model: String,
    cache: Option<ResponseCache>,
    memory: Mutex<HashMap<String, Embedding>>,
    batch_size: usize,
    backend_calls: AtomicUsize,
}

impl fmt::Debug for EmbeddingGateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmbeddingGateway")
            .field("backend", &self.backend.describe())
            .field("model", &self.model)
            .finish()
    }
}

impl EmbeddingGateway {
    pub fn new(
        backend: Arc<dyn EmbeddingBackend>,
        model: impl Into<String>,
        cache: Option<ResponseCache>,
    ) -> Self {
        Self {
            backend,
            model: model.into(),
            cache,
            memory: Mutex::new(HashMap::new()),
            batch_size: 64,
            backend_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_batch_size(mut self, n: usize) -> Self {
        self.batch_size = n.max(1);
        self
    }

    pub fn describe(&self) -> String {
        format!("{} model={}", self.backend.describe(), self.model)
    }

    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    fn key(&self, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.model.as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }
}

impl Embedder for EmbeddingGateway {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        if texts.is_empty() {
            return Err(Error::Argument("nothing to embed".into()));
        }
        let keys: Vec<String> = texts.iter().map(|t| self.key(t)).collect();
        let mut found: HashMap<String, Embedding> = HashMap::new();
        {
            let memory = self.memory.lock().expect("embedding memo lock");
            for k in &keys {
                if let Some(e) = memory.get(k) {
                    found.insert(k.clone(), e.clone());
                }
            }
        }
        let mut missing: Vec<usize> = Vec::new();
        for (i, k) in keys.iter().enumerate() {
            if found.contains_key(k) || missing.iter().any(|&j| keys[j] == *k) {
                continue;
            }
            if let Some(cache) = &self.cache {
                if let Some(entry) = cache.get::<CachedEmbedding>(k)? {
                    found.insert(k.clone(), Embedding::new(entry.vector)?);
                    continue;
                }
            }
            missing.push(i);
        }
        for batch in missing.chunks(self.batch_size) {
            let inputs: Vec<String> = batch.iter().map(|&i| texts[i].clone()).collect();
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            let raw = self.backend.embed_raw(&self.model, &inputs)?;
            if raw.len() != inputs.len() {
                return Err(Error::Protocol(format!(
                    "embedder returned {} vectors for {} inputs",
                    raw.len(),
                    inputs.len()
                )));
            }
            for (&i, vec) in batch.iter().zip(raw) {
                let emb = Embedding::new(vec).map_err(|e| Error::Protocol(e.to_string()))?;
                if let Some(cache) = &self.cache {
                    cache.put(
                        &keys[i],
                        &CachedEmbedding {
                            model: self.model.clone(),
                            vector: emb.values().to_vec(),
                        },
                    )?;
                }
                found.insert(keys[i].clone(), emb);
            }
        }
        let mut memory = self.memory.lock().expect("embedding memo lock");
        keys.iter()
            .map(|k| {
                let e = found.get(k).cloned().expect("every key resolved");
                memory.entry(k.clone()).or_insert_with(|| e.clone());
                Ok(e)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruncationStrategy {
    #[default]
    DropMiddle,
    DropLeft,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowPolicy {
    pub window_tokens: usize,
    pub strategy: TruncationStrategy,
    /// Inserted where drop-middle removed text; its tokens count against
    /// the window.
    pub elision_marker: String,
}

impl Default for WindowPolicy {
    fn default() -> Self {
        Self {
            window_tokens: crate::rope::TARGET_CONTEXT,
            strategy: TruncationStrategy::DropMiddle,
            elision_marker: "…".into(),
        }
    }
}

impl WindowPolicy {
    pub fn new(window_tokens: usize, strategy: TruncationStrategy) -> Self {
        Self {
            window_tokens,
            strategy,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptParts {
    pub instruction: String,
    pub document: String,
    pub question: String,
}

impl PromptParts {
    pub fn join(&self, document: &str) -> String {
        [self.instruction.as_str(), document, self.question.as_str()]
            .into_iter()
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FittedPrompt {
    pub prompt: String,
    pub prompt_tokens: usize,
    pub document_tokens: usize,
    pub dropped_tokens: usize,
    /// Document token range removed, if any.
    pub dropped_range: Option<(usize, usize)>,
}

/// Truncates the document so instruction, document and question fit.
pub fn fit_to_window(
    parts: &PromptParts,
    policy: &WindowPolicy,
    tokenizer: &Tokenizer,
) -> Result<FittedPrompt> {
    if policy.window_tokens == 0 {
        return Err(Error::Config("window_tokens must be positive".into()));
    }
    let fixed = tokenizer.count(&parts.instruction) + tokenizer.count(&parts.question);
    let spans = tokenizer.spans(&parts.document);
    let n = spans.len();
    if fixed > policy.window_tokens
        || (fixed + n > policy.window_tokens && policy.strategy == TruncationStrategy::Error)
    {
        return Err(Error::Overflow {
            needed: fixed + n,
            window: policy.window_tokens,
        });
    }
    let budget = policy.window_tokens - fixed;
    if n <= budget {
        let prompt = parts.join(&parts.document);
        return Ok(FittedPrompt {
            prompt_tokens: fixed + n,
            prompt,
            document_tokens: n,
            dropped_tokens: 0,
            dropped_range: None,
        });
    }
    let (document, kept, range) = match policy.strategy {
        TruncationStrategy::DropLeft => {
            let doc = slice_spans(&parts.document, &spans, n - budget, n)?.to_string();
            (doc, budget, (0, n - budget))
        }
        TruncationStrategy::DropMiddle => {
            let marker_len = tokenizer.count(&policy.elision_marker);
            if budget <= marker_len {
                (String::new(), 0, (0, n))
            } else {
                let keep = budget - marker_len;
                let head = keep / 2;
                let tail = keep - head;
                let mut doc = slice_spans(&parts.document, &spans, 0, head)?.to_string();
                for piece in [
                    policy.elision_marker.as_str(),
                    slice_spans(&parts.document, &spans, n - tail, n)?,
                ] {
                    if !piece.is_empty() {
                        if !doc.is_empty() {
                            doc.push('\n');
                        }
                        doc.push_str(piece);
                    }
                }
                (doc, keep + marker_len, (head, n - tail))
            }
        }
        TruncationStrategy::Error => unreachable!("handled above"),
    };
    Ok(FittedPrompt {
        prompt: parts.join(&document),
        prompt_tokens: fixed + kept,
        document_tokens: n,
        dropped_tokens: range.1 - range.0,
        dropped_range: Some(range),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Rag,
    Full,
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptMode::Rag => "rag",
            PromptMode::Full => "full",
        })
    }
}

/// Generation settings attached to every request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatSettings {
    pub model: String,
    pub temperature: f64,
    pub system_prompt: Option<String>,
    pub max_tokens_qa: usize,
    pub max_tokens_mc: usize,
    pub max_tokens_summ: usize,
    pub max_tokens_dialogue: usize,
}

impl Default for ChatSettings {
    fn default() -> Self {
        Self {
            model: "default".into(),
            temperature: 0.0,
            system_prompt: None,
            max_tokens_qa: 64,
            max_tokens_mc: 16,
            max_tokens_summ: 1024,
            max_tokens_dialogue: 64,
        }
    }
}

impl ChatSettings {
    pub fn max_tokens_for(&self, t: TaskType) -> usize {
        match t {
            TaskType::Qa => self.max_tokens_qa,
            TaskType::Mc => self.max_tokens_mc,
            TaskType::Summ => self.max_tokens_summ,
            TaskType::Dialogue => self.max_tokens_dialogue,
        }
    }

    pub fn request(&self, task_type: TaskType, prompt: String) -> ChatRequest {
        let mut messages = Vec::new();
        if let Some(sys) = &self.system_prompt {
            messages.push(Message::new(Role::System, sys.clone()));
        }
        messages.push(Message::new(Role::User, prompt));
        ChatRequest {
            model: self.model.clone(),
            messages,
            temperature: self.temperature,
            max_output_tokens: self.max_tokens_for(task_type),
        }
    }
}

/// Template text for a task; context always precedes the question.
pub fn prompt_parts(mode: PromptMode, task: &EvalTask, context: &str) -> Result<PromptParts> {
    if context.trim().is_empty() {
        return Err(Error::Argument(format!(
            "task {:?}: empty context",
            task.id
        )));
    }
    let source = match mode {
        PromptMode::Rag => "retrieved passages",
        PromptMode::Full => "document",
    };
    let question = task.question.as_deref().unwrap_or("").trim();
    let (instruction, q) = match task.task_type {
        TaskType::Qa => (
            format!("Answer the question using the {source} below. Give a short answer."),
            format!("Question: {question}\nAnswer:"),
        ),
        TaskType::Dialogue => (
            format!("The {source} below come from a script with several speakers. Answer the question about it."),
            format!("Question: {question}\nAnswer:"),
        ),
        TaskType::Mc => {
            let choices = task
                .choices
                .as_deref()
                .ok_or_else(|| Error::Data(format!("task {:?} has no choices", task.id)))?;
            let listed: Vec<String> = choices
                .iter()
                .enumerate()
                .map(|(i, c)| format!("{}. {c}", crate::metrics::choice_label(i)))
                .collect();
            (
                format!("Read the {source} below and answer the multiple-choice question with the letter of the correct choice."),
                format!("Question: {question}\n{}\nAnswer:", listed.join("\n")),
            )
        }
        TaskType::Summ => (
            format!("Summarize the {source} below."),
            if question.is_empty() {
                "Summary:".to_string()
            } else {
                format!("{question}\nSummary:")
            },
        ),
    };
    Ok(PromptParts {
        instruction,
        document: context.to_string(),
        question: q,
    })
}

/// Untruncated prompt for `task` over `context`.
pub fn build_prompt(
    mode: PromptMode,
    task: &EvalTask,
    context: &str,
    settings: &ChatSettings,
) -> Result<ChatRequest> {
    let parts = prompt_parts(mode, task, context)?;
    Ok(settings.request(task.task_type, parts.join(&parts.document)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricKind;
    use proptest::prelude::*;

    fn words(n: usize) -> String {
        (0..n)
            .map(|i| format!("t{i}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn parts(doc: String) -> PromptParts {
        PromptParts {
            instruction: "read".into(),
            document: doc,
            question: "q ?".into(),
        }
    }

    fn task(task_type: TaskType) -> EvalTask {
        EvalTask {
            id: "t".into(),
            dataset: "d".into(),
            document: "doc".into(),
            question: Some("Which one?".into()),
            answers: vec!["x".into()],
            choices: Some(vec![
                "red".into(),
                "green".into(),
                "blue".into(),
                "black".into(),
            ]),
            correct_choice: Some(1),
            task_type,
            metric: MetricKind::Em,
        }
    }

    struct Counting(AtomicUsize);

    impl ChatBackend for Counting {
        fn complete(&self, _req: &ChatRequest) -> Result<String> {
            std::thread::sleep(Duration::from_millis(30));
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok("answer".into())
        }
        fn describe(&self) -> String {
            "counting".into()
        }
    }

    fn req(content: &str) -> ChatRequest {
        ChatSettings::default().request(TaskType::Qa, content.into())
    }

    #[test]
    fn hash_ignores_key_order() {
        let r = req("hello");
        let body = r.canonical_json();
        assert!(!body.contains(' ') || body.contains("hello"));
        let reordered: serde_json::Value = serde_json::from_str(
            r#"{"temperature":0.0,"messages":[{"content":"hello","role":"user"}],"max_tokens":64,"model":"default"}"#,
        )
        .unwrap();
        assert_eq!(
            sha256_hex(serde_json::to_string(&reordered).unwrap().as_bytes()),
            r.request_hash()
        );
        assert_eq!(r.temperature, 0.0);
    }

    #[test]
    fn cache_layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let hash = "abcdef";
        assert_eq!(
            cache.path_for(hash),
            dir.path().join("ab").join("abcdef.json")
        );
        cache.put(hash, &"text ✓".to_string()).unwrap();
        assert_eq!(
            cache.get::<String>(hash).unwrap().as_deref(),
            Some("text ✓")
        );
        assert_eq!(cache.get::<String>("ffff").unwrap(), None);
    }

    #[test]
    fn second_identical_request_is_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Arc::new(Counting(AtomicUsize::new(0)));
        let gw = ChatGateway::new(backend.clone(), Some(ResponseCache::new(dir.path())));
        assert_eq!(gw.complete(&req("a")).unwrap(), "answer");
        assert_eq!(gw.complete(&req("a")).unwrap(), "answer");
        assert_eq!(backend.0.load(Ordering::SeqCst), 1);
        assert_eq!(gw.cache_hits(), 1);
        // a fresh gateway over the same directory needs no backend call
        let gw2 = ChatGateway::new(backend.clone(), Some(ResponseCache::new(dir.path())));
        gw2.complete(&req("a")).unwrap();
        assert_eq!(gw2.backend_calls(), 0);
    }

    #[test]
    fn concurrent_identical_requests_share_one_call() {
        let backend = Arc::new(Counting(AtomicUsize::new(0)));
        let gw = ChatGateway::new(backend.clone(), None);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| gw.complete(&req("same")).unwrap());
            }
        });
        assert_eq!(backend.0.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn needle_extractor_returns_payload() {
        let stub = StubChat::new(StubModelSpec::needle_extractor()).unwrap();
        let prompt =
            "filler. The pass key is 385243. Remember it. 385243 is the pass key. more filler.";
        assert_eq!(stub.complete(&req(prompt)).unwrap(), "385243");
        let sandwich = "x The best thing to do in San Francisco is eat a sandwich and sit in Dolores Park on a sunny day. y";
        assert_eq!(
            stub.complete(&req(sandwich)).unwrap(),
            "eat a sandwich and sit in Dolores Park"
        );
        assert_eq!(stub.complete(&req("nothing here")).unwrap(), "");
    }

    #[test]
    fn other_stubs() {
        let echo = StubChat::new(StubModelSpec::EchoFirstK { k: 2 }).unwrap();
        assert_eq!(echo.complete(&req("one, two three")).unwrap(), "one,");
        let fixed = StubChat::new(StubModelSpec::FixedAnswer {
            answer: "42".into(),
        })
        .unwrap();
        assert_eq!(fixed.complete(&req("?")).unwrap(), "42");
        assert!(StubChat::new(StubModelSpec::NeedleExtractor {
            patterns: vec!["(".into()]
        })
        .is_err());
    }

    #[test]
    fn hashing_embedder_is_stable_and_ordered() {
        let backend = Arc::new(StubEmbedder::new(StubEmbedderSpec::TextHash { dim: 16 }).unwrap());
        let gw = EmbeddingGateway::new(backend, "stub", None);
        let texts = vec!["alpha".to_string(), "beta".to_string(), "alpha".to_string()];
        let v = gw.embed(&texts).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v[0], v[2]);
        assert_ne!(v[0], v[1]);
        assert_eq!(v[0], Embedding::new(text_hash_vector("alpha", 16)).unwrap());
        assert_eq!(gw.backend_calls(), 1);
        gw.embed(&texts[..1]).unwrap();
        assert_eq!(gw.backend_calls(), 1);
        assert!(gw.embed(&[]).is_err());
    }

    #[test]
    fn feature_hash_prefers_shared_words() {
        let e = StubEmbedder::new(StubEmbedderSpec::FeatureHash { dim: 256 }).unwrap();
        let raw = e
            .embed_raw(
                "m",
                &[
                    "red apple pie".into(),
                    "apple pie recipe".into(),
                    "quantum field".into(),
                ],
            )
            .unwrap();
        let v: Vec<Embedding> = raw
            .into_iter()
            .map(|r| Embedding::new(r).unwrap())
            .collect();
        assert!(v[0].cosine(&v[1]) > v[0].cosine(&v[2]));
    }

    #[test]
    fn fit_leaves_fitting_documents_alone() {
        let tok = Tokenizer::default_rule();
        let p = parts(words(5));
        let fitted = fit_to_window(
            &p,
            &WindowPolicy::new(100, TruncationStrategy::DropMiddle),
            &tok,
        )
        .unwrap();
        assert_eq!(fitted.prompt, format!("read\n\n{}\n\nq ?", words(5)));
        assert_eq!(fitted.dropped_tokens, 0);
    }

    #[test]
    fn drop_middle_keeps_equal_halves() {
        let tok = Tokenizer::default_rule();
        // instruction (1) + question (2) + 6 document tokens
        let policy = WindowPolicy {
            elision_marker: String::new(),
            ..WindowPolicy::new(9, TruncationStrategy::DropMiddle)
        };
        let fitted = fit_to_window(&parts(words(10)), &policy, &tok).unwrap();
        assert_eq!(fitted.prompt, "read\n\nt0 t1 t2\nt7 t8 t9\n\nq ?");
        assert_eq!(fitted.dropped_range, Some((3, 7)));
        assert_eq!(fitted.dropped_tokens, 4);

        let marked = fit_to_window(
            &parts(words(10)),
            &WindowPolicy::new(9, TruncationStrategy::DropMiddle),
            &tok,
        )
        .unwrap();
        assert_eq!(marked.prompt, "read\n\nt0 t1\n…\nt7 t8 t9\n\nq ?");
        assert_eq!(tok.count(&marked.prompt), 9);
    }

    #[test]
    fn drop_left_keeps_suffix() {
        let tok = Tokenizer::default_rule();
        let fitted = fit_to_window(
            &parts(words(10)),
            &WindowPolicy::new(7, TruncationStrategy::DropLeft),
            &tok,
        )
        .unwrap();
        assert_eq!(fitted.prompt, "read\n\nt6 t7 t8 t9\n\nq ?");
        assert_eq!(fitted.dropped_range, Some((0, 6)));
    }

    #[test]
    fn error_strategy_reports_counts() {
        let tok = Tokenizer::default_rule();
        let err = fit_to_window(
            &parts(words(10)),
            &WindowPolicy::new(7, TruncationStrategy::Error),
            &tok,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::Overflow {
                needed: 13,
                window: 7
            }
        ));
        let err = fit_to_window(
            &parts(words(1)),
            &WindowPolicy::new(2, TruncationStrategy::DropMiddle),
            &tok,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Overflow { .. }));
    }

    #[test]
    fn templates() {
        let s = ChatSettings::default();
        let mc = build_prompt(PromptMode::Full, &task(TaskType::Mc), "ctx", &s).unwrap();
        let text = mc.last_user_message();
        for line in ["A. red", "B. green", "C. blue", "D. black"] {
            assert!(text.contains(line), "{text}");
        }
        assert!(text.find("ctx").unwrap() < text.find("Question:").unwrap());
        let again = build_prompt(PromptMode::Full, &task(TaskType::Mc), "ctx", &s).unwrap();
        assert_eq!(again.canonical_json(), mc.canonical_json());
        let rag = build_prompt(PromptMode::Rag, &task(TaskType::Qa), "ctx", &s).unwrap();
        assert!(rag.last_user_message().contains("retrieved passages"));
        assert!(build_prompt(PromptMode::Rag, &task(TaskType::Qa), "  ", &s).is_err());
        let mut no_choices = task(TaskType::Mc);
        no_choices.choices = None;
        assert!(build_prompt(PromptMode::Full, &no_choices, "ctx", &s).is_err());
    }

    proptest! {
        #[test]
        fn fitted_prompt_never_exceeds_window(doc_len in 0usize..200, window in 3usize..120, strat in 0u8..2, marker in "[ .…]{0,3}") {
            let tok = Tokenizer::default_rule();
            let policy = WindowPolicy {
                window_tokens: window,
                strategy: if strat == 0 { TruncationStrategy::DropMiddle } else { TruncationStrategy::DropLeft },
                elision_marker: marker,
            };
            let fitted = fit_to_window(&parts(words(doc_len)), &policy, &tok).unwrap();
            let n = tok.count(&fitted.prompt);
            prop_assert!(n <= window);
            prop_assert_eq!(n, fitted.prompt_tokens);
        }
    }
}
