//! Command-line front end for the `lcl` binary.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::bench::{self, Harness, RunConfig};
use crate::corpus::{
    self, RawDocument, SeparatorPolicy, TrainingHyperparams, TrainingManifest, UpsampleConfig,
};
use crate::error::{Error, Result};
use crate::gateway::{
    sha256_hex, ChatBackend, ChatGateway, EmbeddingBackend, EmbeddingGateway, Endpoint, HttpClient,
    PromptMode, ResponseCache, RetryPolicy, StubChat, StubEmbedder, StubEmbedderSpec,
    StubModelSpec, TruncationStrategy, WindowPolicy,
};
use crate::metrics::{self, MetricKind, NormalizationRule};
use crate::niah::{self, NiahVariant};
use crate::retrieval::{self, OrderPolicy, RetrievalConfig};
use crate::rope::{self, RopeConfig, ScalingMethod};
use crate::sft::{self, StageBlend, SynthConfig};
use crate::task::read_tasks;
use crate::tokenize::{Tokenizer, TokenizerSpec};

#[derive(Debug, Parser)]
#[command(
    name = "lcl",
    version,
    about = "Long-context data, retrieval and evaluation tools"
)]
pub struct Cli {
    /// Newline-delimited vocabulary file; the rule tokenizer is used otherwise.
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Token counting and slicing.
    #[command(subcommand)]
    Tok(TokCmd),
    /// Pretraining corpus preparation.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// RoPE frequency math.
    #[command(subcommand)]
    Rope(RopeCmd),
    /// Chunking, embedding and retrieval.
    #[command(subcommand)]
    Rag(RagCmd),
    /// Score predictions against gold answers; CSV on stdout.
    Score(ScoreArgs),
    /// Needle-in-a-haystack grids.
    #[command(subcommand)]
    Niah(NiahCmd),
    /// Synthetic long SFT data.
    #[command(subcommand)]
    Sft(SftCmd),
    /// Benchmark runs.
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Debug, Subcommand)]
pub enum TokCmd {
    /// Count tokens in a file
    Count { file: PathBuf },
    /// Print the text of a token range
    Slice {
        file: PathBuf,
        #[arg(long)]
        start: usize,
        #[arg(long)]
        end: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SeparatorKind {
    Special,
    BosEos,
    None,
}

#[derive(Debug, Subcommand)]
pub enum CorpusCmd {
    /// Emit a document stream with long documents upsampled.
    Upsample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = corpus::DEFAULT_LONG_SHARE)]
        share: f64,
        #[arg(long, default_value_t = corpus::DEFAULT_LONG_THRESHOLD)]
        threshold: usize,
        #[arg(long, default_value_t = corpus::DEFAULT_TOTAL_TOKENS)]
        total_tokens: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSONL output; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Pack documents into fixed-length sequences.
    Pack {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = rope::TARGET_CONTEXT)]
        target_len: usize,
        #[arg(long, default_value = corpus::DEFAULT_SEPARATOR)]
        separator: String,
        #[arg(long, value_enum, default_value = "special")]
        separator_policy: SeparatorKind,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Flat token-id dump, one sequence per line; needs --vocab.
        #[arg(long)]
        token_ids: Option<PathBuf>,
        /// Training manifest JSON with default hyperparameters.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Document count, token totals and long-document share
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = corpus::DEFAULT_LONG_THRESHOLD)]
        threshold: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScaleMethodArg {
    Ntk,
    Pi,
    Explicit,
}

#[derive(Debug, Subcommand)]
pub enum RopeCmd {
    /// Frequencies and maximum wavelength for a RoPE config
    Info {
        #[arg(long, default_value_t = rope::DEFAULT_HEAD_DIM)]
        dim: usize,
        #[arg(long, default_value_t = rope::LLAMA3_ROPE_BASE)]
        base: f64,
        #[arg(long)]
        target_ctx: Option<usize>,
    },
    /// Suggest a base for a longer context
    Scale {
        #[arg(long, value_enum)]
        method: ScaleMethodArg,
        #[arg(long)]
        from: usize,
        #[arg(long)]
        to: usize,
        #[arg(long, default_value_t = rope::DEFAULT_HEAD_DIM)]
        dim: usize,
        #[arg(long, default_value_t = rope::LLAMA3_ROPE_BASE)]
        base: f64,
        /// New base for --method explicit.
        #[arg(long, default_value_t = rope::EXTENDED_ROPE_BASE)]
        new_base: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OrderArg {
    Doc,
    Relevance,
}

impl From<OrderArg> for OrderPolicy {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::Doc => OrderPolicy::DocumentOrder,
            OrderArg::Relevance => OrderPolicy::RelevanceOrder,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum RagCmd {
    /// Split JSONL documents into token chunks.
    Chunk {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = retrieval::DEFAULT_CHUNK_SIZE)]
        chunk_size: usize,
        #[arg(long, default_value_t = 0)]
        overlap: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Embed chunk JSONL; writes `{hash, chunk, vector}` lines.
    Embed {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Retrieve the top chunks of each JSONL document for a query.
    Retrieve {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = retrieval::DEFAULT_CHUNK_SIZE)]
        chunk_size: usize,
        #[arg(long, default_value_t = retrieval::DEFAULT_TOP_K)]
        top_k: usize,
        #[arg(long, value_enum, default_value = "doc")]
        order: OrderArg,
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub metric: MetricKind,
    /// JSONL of `{"id", "prediction"}`.
    #[arg(long)]
    pub pred_file: PathBuf,
    /// JSONL of `{"id", "answers"}`, plus `choices`/`correct_choice` for mc.
    #[arg(long)]
    pub gold_file: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Full,
    Rag,
}

impl From<ModeArg> for PromptMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => PromptMode::Full,
            ModeArg::Rag => PromptMode::Rag,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Passkey,
    Sandwich,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TruncationArg {
    DropMiddle,
    DropLeft,
    Error,
}

impl From<TruncationArg> for TruncationStrategy {
    fn from(t: TruncationArg) -> Self {
        match t {
            TruncationArg::DropMiddle => TruncationStrategy::DropMiddle,
            TruncationArg::DropLeft => TruncationStrategy::DropLeft,
            TruncationArg::Error => TruncationStrategy::Error,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum NiahCmd {
    /// Run a length x depth grid; writes niah_grid.csv, niah_grid.svg and cells.jsonl
    Run {
        #[arg(long, value_enum, default_value = "passkey")]
        variant: VariantArg,
        #[arg(long, default_value_t = rope::TARGET_CONTEXT)]
        max_len: usize,
        /// Number of evenly spaced depths in [0, 1].
        #[arg(long, default_value_t = 10)]
        depths: usize,
        /// Number of log-spaced lengths from 1K to --max-len.
        #[arg(long, default_value_t = 8)]
        lengths: usize,
        #[arg(long, value_enum, default_value = "full")]
        mode: ModeArg,
        /// JSONL filler corpus; synthetic filler when omitted.
        #[arg(long)]
        filler: Option<PathBuf>,
        #[arg(long, default_value_t = rope::TARGET_CONTEXT)]
        window: usize,
        #[arg(long, value_enum, default_value = "drop-middle")]
        truncation: TruncationArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum SftCmd {
    /// Pad short QA sources into long samples
    Synth {
        /// JSONL of SFT sources.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = sft::LONG_SFT_MIN_TOKENS)]
        min_tokens: usize,
        #[arg(long, default_value_t = sft::LONG_SFT_MAX_TOKENS)]
        max_tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSONL corpus of distractor documents; enables padding.
        #[arg(long)]
        distractors: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Manifest JSON summarising the run.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Mix datasets into staged training manifests
    Blend {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub tasks: PathBuf,
    /// JSON run config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long, value_enum)]
    pub order: Option<OrderArg>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, value_enum)]
    pub truncation: Option<TruncationArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; `runs/<timestamp>` when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    /// Evaluate every task once; writes config.json, results.csv and report.md
    Run {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[command(flatten)]
        common: BenchArgs,
    },
    /// Grid over chunk size and top-k; writes results.csv and curve.svg
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_SWEEP_CHUNK_SIZES)]
        chunk_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_SWEEP_TOP_K)]
        top_ks: Vec<usize>,
        #[command(flatten)]
        common: BenchArgs,
    },
    /// RAG against full-context on the same tasks
    Compare {
        #[command(flatten)]
        common: BenchArgs,
    },
}

// Backend selection shared by every command that talks to a model.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Offline chat model: `needle`, `echo:K` or `fixed:TEXT`.
    #[arg(long)]
    pub stub: Option<String>,
    /// Chat endpoint; overrides LCL_API_BASE.
    #[arg(long)]
    pub api_base: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Offline embedder: `feature-hash[:DIM]` or `text-hash[:DIM]`.
    #[arg(long)]
    pub embed_stub: Option<String>,
    /// Embedding endpoint; overrides LCL_EMBED_API_BASE.
    #[arg(long)]
    pub embed_api_base: Option<String>,
    #[arg(long, default_value = "default")]
    pub embed_model: String,
    #[arg(long, default_value = "cache")]
    pub cache: PathBuf,
    #[arg(long)]
    pub no_cache: bool,
    #[arg(long, default_value_t = 4)]
    pub parallelism: usize,
    #[arg(long, default_value_t = 3)]
    pub max_retries: u32,
}

fn parse_stub_model(s: &str) -> Result<StubModelSpec> {
    match s.split_once(':') {
        None if s == "needle" => Ok(StubModelSpec::needle_extractor()),
        Some(("echo", k)) => Ok(StubModelSpec::EchoFirstK {
            k: k.parse()
                .map_err(|_| Error::Argument(format!("bad echo length {k:?}")))?,
        }),
        Some(("fixed", text)) => Ok(StubModelSpec::FixedAnswer {
            answer: text.to_string(),
        }),
        _ => Err(Error::Argument(format!("unknown stub model {s:?}"))),
    }
}

fn parse_stub_embedder(s: &str) -> Result<StubEmbedderSpec> {
    let (kind, dim) = match s.split_once(':') {
        Some((k, d)) => (
            k,
            d.parse()
                .map_err(|_| Error::Argument(format!("bad dimension {d:?}")))?,
        ),
        None => (s, 256),
    };
    match kind {
        "feature-hash" => Ok(StubEmbedderSpec::FeatureHash { dim }),
        "text-hash" => Ok(StubEmbedderSpec::TextHash { dim }),
        _ => Err(Error::Argument(format!("unknown stub embedder {s:?}"))),
    }
}

impl ModelArgs {
    fn cache(&self) -> Option<ResponseCache> {
        (!self.no_cache).then(|| ResponseCache::new(&self.cache))
    }

    fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            ..Default::default()
        }
    }

    fn chat_backend(&self) -> Result<Arc<dyn ChatBackend>> {
        if let Some(stub) = &self.stub {
            return Ok(Arc::new(StubChat::new(parse_stub_model(stub)?)?));
        }
        let endpoint = match &self.api_base {
            Some(base) => Endpoint::new(base, std::env::var(crate::gateway::ENV_API_KEY).ok()),
            None => Endpoint::chat_from_env().ok_or_else(|| {
                Error::Config(
                    "no chat endpoint: set LCL_API_BASE, pass --api-base or use --stub".into(),
                )
            })?,
        };
        Ok(Arc::new(HttpClient::new(endpoint, self.retry())))
    }

    fn embedder(&self) -> Result<Option<EmbeddingGateway>> {
        let backend: Arc<dyn EmbeddingBackend> = if let Some(stub) = &self.embed_stub {
            Arc::new(StubEmbedder::new(parse_stub_embedder(stub)?)?)
        } else if let Some(base) = &self.embed_api_base {
            let key = std::env::var(crate::gateway::ENV_EMBED_API_KEY).ok();
            Arc::new(HttpClient::new(Endpoint::new(base, key), self.retry()))
        } else if let Some(ep) = Endpoint::embed_from_env().or_else(|| {
            self.api_base
                .as_ref()
                .map(|b| Endpoint::new(b, std::env::var(crate::gateway::ENV_API_KEY).ok()))
        }) {
            Arc::new(HttpClient::new(ep, self.retry()))
        } else if self.stub.is_some() {
            Arc::new(StubEmbedder::new(StubEmbedderSpec::FeatureHash {
                dim: 256,
            })?)
        } else {
            return Ok(None);
        };
        Ok(Some(EmbeddingGateway::new(
            backend,
            &self.embed_model,
            self.cache(),
        )))
    }

    fn require_embedder(&self) -> Result<EmbeddingGateway> {
        self.embedder()?.ok_or_else(|| {
            Error::Config(
                "no embedder: set LCL_EMBED_API_BASE, pass --embed-api-base or use --embed-stub"
                    .into(),
            )
        })
    }

    fn harness(&self, tokenizer: Tokenizer, need_embedder: bool) -> Result<Harness> {
        let chat = ChatGateway::new(self.chat_backend()?, self.cache());
        let embedder = if need_embedder {
            Some(self.require_embedder()?)
        } else {
            self.embedder()?
        };
        Ok(Harness::new(chat, embedder, tokenizer))
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_out(path: Option<&Path>, contents: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(p, contents).map_err(|e| Error::io(p, e))
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(contents.as_bytes())
                .map_err(|e| Error::io(Path::new("<stdout>"), e))
        }
    }
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Result<String> {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(&item)?);
        s.push('\n');
    }
    Ok(s)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn pretty<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    let tokenizer = match &cli.vocab {
        Some(p) => Tokenizer::new(&TokenizerSpec::ExternalVocab { path: p.clone() })?,
        None => Tokenizer::default_rule(),
    };
    match cli.command {
        Command::Tok(cmd) => run_tok(cmd, &tokenizer),
        Command::Corpus(cmd) => run_corpus(cmd, &tokenizer),
        Command::Rope(cmd) => run_rope(cmd),
        Command::Rag(cmd) => run_rag(cmd, &tokenizer),
        Command::Score(args) => run_score(args, &tokenizer),
        Command::Niah(cmd) => run_niah(cmd, tokenizer),
        Command::Sft(cmd) => run_sft(cmd, &tokenizer),
        Command::Bench(cmd) => run_bench(cmd, tokenizer),
    }
}

fn run_tok(cmd: TokCmd, tok: &Tokenizer) -> Result<i32> {
    match cmd {
        TokCmd::Count { file } => println!("{}", tok.count(&read_text(&file)?)),
        TokCmd::Slice { file, start, end } => {
            let text = read_text(&file)?;
            println!("{}", tok.slice(&text, start, end)?);
        }
    }
    Ok(0)
}

fn separator(kind: SeparatorKind, token: &str) -> Result<SeparatorPolicy> {
    match kind {
        SeparatorKind::Special => SeparatorPolicy::special(token),
        SeparatorKind::BosEos => Ok(SeparatorPolicy::BosEos),
        SeparatorKind::None => Ok(SeparatorPolicy::None),
    }
}

fn run_corpus(cmd: CorpusCmd, tok: &Tokenizer) -> Result<i32> {
    match cmd {
        CorpusCmd::Upsample {
            input,
            share,
            threshold,
            total_tokens,
            seed,
            output,
        } => {
            let docs = corpus::read_corpus(&input, tok)?;
            let cfg = UpsampleConfig {
                long_threshold_tokens: threshold,
                long_token_share: share,
                target_total_tokens: total_tokens,
                seed,
            };
            let mut sampler = corpus::upsample(&docs, &cfg)?;
            let mut out = String::new();
            for d in sampler.by_ref() {
                out.push_str(&serde_json::to_string(&RawDocument {
                    id: d.id.clone(),
                    text: d.text.clone(),
                })?);
                out.push('\n');
            }
            log::info!(
                "emitted {} tokens, long share {:.4}",
                sampler.emitted_tokens(),
                sampler.realised_share()
            );
            write_out(output.as_deref(), &out)?;
        }
        CorpusCmd::Pack {
            input,
            target_len,
            separator: sep_token,
            separator_policy,
            output,
            token_ids,
            manifest,
        } => {
            let docs = corpus::read_document_stream(&input, tok)?;
            let sep = separator(separator_policy, &sep_token)?;
            let seqs = corpus::pack(&docs, target_len, &sep)?;
            write_out(output.as_deref(), &jsonl(&seqs)?)?;
            if let Some(path) = token_ids {
                let by_id: BTreeMap<&str, &corpus::Document> =
                    docs.iter().map(|d| (d.id.as_str(), d)).collect();
                let mut dump = String::new();
                for seq in &seqs {
                    let ids =
                        corpus::sequence_token_ids(seq, &sep, tok, |id| by_id.get(id).copied())?;
                    dump.push_str(&ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" "));
                    dump.push('\n');
                }
                write_out(Some(&path), &dump)?;
            }
            if let Some(path) = manifest {
                let hp = TrainingHyperparams {
                    sequence_length: target_len,
                    separator: sep,
                    ..Default::default()
                };
                let m = TrainingManifest::new(hp, corpus::PackedStats::from_sequences(&seqs));
                corpus::emit_training_manifest(&path, &m)?;
            }
        }
        CorpusCmd::Stats { input, threshold } => {
            let docs = corpus::read_corpus(&input, tok)?;
            print!("{}", pretty(&corpus::corpus_stats(&docs, threshold))?);
        }
    }
    Ok(0)
}

fn run_rope(cmd: RopeCmd) -> Result<i32> {
    match cmd {
        RopeCmd::Info {
            dim,
            base,
            target_ctx,
        } => {
            let cfg = RopeConfig::new(dim, base)?;
            let s = rope::summarize(&cfg, target_ctx);
            println!("head_dim        {}", s.head_dim);
            println!("base            {}", s.base);
            println!("min frequency   {:e}", s.min_frequency);
            println!("max wavelength  {:.3}", s.max_wavelength);
            if let (Some(t), Some(ok)) = (s.target_context, s.supports_target) {
                println!(
                    "target context  {t} ({})",
                    if ok { "supported" } else { "NOT supported" }
                );
            }
        }
        RopeCmd::Scale {
            method,
            from,
            to,
            dim,
            base,
            new_base,
        } => {
            let cfg = RopeConfig::new(dim, base)?;
            let method = match method {
                ScaleMethodArg::Ntk => ScalingMethod::NtkAware,
                ScaleMethodArg::Pi => ScalingMethod::PositionInterpolation,
                ScaleMethodArg::Explicit => ScalingMethod::ExplicitBase { base: new_base },
            };
            let scaled = rope::scale_base_for_context(&cfg, from, to, method)?;
            println!("method          {method}");
            println!("context ratio   {}", scaled.context_ratio);
            println!("base            {}", scaled.config.base);
            println!("position scale  {}", scaled.position_scale);
            println!(
                "max wavelength  {:.3}",
                rope::max_supported_context(&scaled.config) * scaled.position_scale
            );
        }
    }
    Ok(0)
}

#[derive(Serialize)]
struct EmbeddedChunk<'a> {
    hash: String,
    chunk: String,
    vector: &'a [f32],
}

fn run_rag(cmd: RagCmd, tok: &Tokenizer) -> Result<i32> {
    match cmd {
        RagCmd::Chunk {
            input,
            chunk_size,
            overlap,
            output,
        } => {
            let cfg = RetrievalConfig {
                chunk_size_tokens: chunk_size,
                overlap_tokens: overlap,
                ..Default::default()
            };
            let docs: Vec<RawDocument> = read_jsonl(&input)?;
            let mut out = String::new();
            for d in &docs {
                out.push_str(&jsonl(retrieval::chunk_document(
                    &d.id, &d.text, &cfg, tok,
                )?)?);
            }
            write_out(output.as_deref(), &out)?;
        }
        RagCmd::Embed {
            input,
            output,
            model,
        } => {
            let chunks: Vec<retrieval::Chunk> = read_jsonl(&input)?;
            if chunks.is_empty() {
                return Err(Error::Data(format!("{} has no chunks", input.display())));
            }
            let prefix = RetrievalConfig::default().passage_prefix;
            let texts: Vec<String> = chunks
                .iter()
                .map(|c| format!("{prefix}{}", c.text))
                .collect();
            let embedder = model.require_embedder()?;
            let vectors = retrieval::Embedder::embed(&embedder, &texts)?;
            let mut out = String::new();
            for ((c, t), v) in chunks.iter().zip(&texts).zip(&vectors) {
                out.push_str(&serde_json::to_string(&EmbeddedChunk {
                    hash: sha256_hex(t.as_bytes()),
                    chunk: c.id().to_string(),
                    vector: v.values(),
                })?);
                out.push('\n');
            }
            write_out(output.as_deref(), &out)?;
        }
        RagCmd::Retrieve {
            input,
            query,
            chunk_size,
            top_k,
            order,
            model,
        } => {
            let cfg = RetrievalConfig {
                chunk_size_tokens: chunk_size,
                top_k,
                order_policy: order.into(),
                ..Default::default()
            };
            let embedder = model.require_embedder()?;
            let docs: Vec<RawDocument> = read_jsonl(&input)?;
            let mut out = String::new();
            for d in &docs {
                let r = retrieval::retrieve(&d.id, &d.text, &query, &cfg, tok, &embedder)?;
                out.push_str(&serde_json::to_string(&r)?);
                out.push('\n');
            }
            write_out(None, &out)?;
        }
    }
    Ok(0)
}

#[derive(Debug, Deserialize)]
struct PredRecord {
    id: String,
    prediction: String,
}

#[derive(Debug, Deserialize)]
struct GoldRecord {
    id: String,
    #[serde(default)]
    answers: Vec<String>,
    #[serde(default)]
    choices: Option<Vec<String>>,
    #[serde(default)]
    correct_choice: Option<usize>,
}

/// Per-item CSV rows plus a `mean` row; P/R columns stay empty where the
/// metric has none.
pub fn score_files(
    metric: MetricKind,
    preds: &Path,
    golds: &Path,
    tok: &Tokenizer,
) -> Result<String> {
    let preds: Vec<PredRecord> = read_jsonl(preds)?;
    let golds: Vec<GoldRecord> = read_jsonl(golds)?;
    if golds.is_empty() {
        return Err(Error::Data("gold file is empty".into()));
    }
    let by_id: BTreeMap<&str, &str> = preds
        .iter()
        .map(|p| (p.id.as_str(), p.prediction.as_str()))
        .collect();
    let rule = NormalizationRule::default();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "metric", "score", "precision", "recall"])?;
    let mut sum = 0.0;
    for g in &golds {
        let pred = by_id
            .get(g.id.as_str())
            .ok_or_else(|| Error::Data(format!("no prediction for {:?}", g.id)))?;
        let best = |f: &dyn Fn(&str) -> metrics::MetricResult| {
            g.answers
                .iter()
                .map(|a| f(a))
                .max_by(|a, b| a.score.total_cmp(&b.score))
                .ok_or_else(|| Error::Data(format!("{:?} has no answers", g.id)))
        };
        let (score, p, r) = match metric {
            MetricKind::F1 => (metrics::token_f1(pred, &g.answers, &rule, tok)?, None, None),
            MetricKind::Em => (metrics::exact_match(pred, &g.answers, &rule)?, None, None),
            MetricKind::RougeLsum => {
                let m = best(&|a| metrics::rouge_l_sum(pred, a))?;
                (m.score, m.precision, m.recall)
            }
            MetricKind::RougeGeo => {
                let s = g
                    .answers
                    .iter()
                    .map(|a| metrics::rouge_geo_mean(pred, a))
                    .fold(0.0, f64::max);
                (s, None, None)
            }
            MetricKind::Mc => {
                let choices = g
                    .choices
                    .as_deref()
                    .ok_or_else(|| Error::Data(format!("{:?} has no choices", g.id)))?;
                let c = g
                    .correct_choice
                    .ok_or_else(|| Error::Data(format!("{:?} has no correct_choice", g.id)))?;
                (metrics::mc_accuracy(pred, c, choices)?, None, None)
            }
        };
        sum += score;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        w.write_record([
            g.id.clone(),
            metric.to_string(),
            format!("{score:.6}"),
            opt(p),
            opt(r),
        ])?;
    }
    w.write_record([
        "mean".to_string(),
        metric.to_string(),
        format!("{:.6}", sum / golds.len() as f64),
        String::new(),
        String::new(),
    ])?;
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn run_score(args: ScoreArgs, tok: &Tokenizer) -> Result<i32> {
    print!(
        "{}",
        score_files(args.metric, &args.pred_file, &args.gold_file, tok)?
    );
    Ok(0)
}

fn run_niah(cmd: NiahCmd, tok: Tokenizer) -> Result<i32> {
    let NiahCmd::Run {
        variant,
        max_len,
        depths,
        lengths,
        mode,
        filler,
        window,
        truncation,
        seed,
        out,
        model,
    } = cmd;
    let variant = match variant {
        VariantArg::Passkey => NiahVariant::Passkey,
        VariantArg::Sandwich => NiahVariant::Sandwich,
    };
    let (lens, deps) = niah::default_grid(max_len, lengths, depths);
    let cases = niah::make_standard_cases(variant, &lens, &deps)?;
    let filler = match filler {
        Some(p) => read_jsonl::<RawDocument>(&p)?
            .into_iter()
            .map(|d| d.text)
            .collect(),
        None => vec![niah::synthetic_filler(max_len + max_len / 8, seed, &tok)],
    };
    let mode: PromptMode = mode.into();
    let harness = model.harness(tok, mode == PromptMode::Rag)?;
    let cfg = RunConfig {
        mode,
        window: Some(WindowPolicy::new(window, truncation.into())),
        seed,
        parallelism: model.parallelism,
        chat: crate::gateway::ChatSettings {
            model: model.model.clone().unwrap_or_else(|| "default".into()),
            ..Default::default()
        },
        ..Default::default()
    };
    let result = niah::run_grid(&cases, &filler, &cfg, mode, &harness)?;
    let dir = out.unwrap_or_else(|| bench::timestamped_dir(Path::new("runs")));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_out(Some(&dir.join("niah_grid.csv")), &result.grid.to_csv()?)?;
    let title = format!("{variant:?} needle, {mode} mode");
    write_out(
        Some(&dir.join("niah_grid.svg")),
        &result.grid.to_svg(&title),
    )?;
    write_out(Some(&dir.join("cells.jsonl")), &jsonl(&result.cells)?)?;
    println!(
        "{} cells, mean score {}; written to {}",
        result.cells.len(),
        result
            .grid
            .mean()
            .map_or("n/a".into(), |m| format!("{m:.4}")),
        dir.display()
    );
    Ok(0)
}

#[derive(Debug, Deserialize)]
struct BlendFile {
    #[serde(flatten)]
    blend: StageBlend,
    /// Dataset id to JSONL path, relative to the config file.
    datasets: BTreeMap<String, PathBuf>,
    #[serde(default)]
    seed: u64,
}

fn count_lines(path: &Path) -> Result<usize> {
    let text = read_text(path)?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).count())
}

#[derive(Serialize)]
struct SynthManifest {
    samples: usize,
    failed: Vec<String>,
    min_tokens: usize,
    max_tokens: usize,
    seed: u64,
    padded: usize,
    tokenizer: String,
}

fn run_sft(cmd: SftCmd, tok: &Tokenizer) -> Result<i32> {
    match cmd {
        SftCmd::Synth {
            input,
            min_tokens,
            max_tokens,
            seed,
            distractors,
            output,
            manifest,
        } => {
            let sources = sft::read_sources(&input)?;
            let pool = match &distractors {
                Some(p) => sft::distractor_paragraphs(&read_jsonl::<RawDocument>(p)?),
                None => Vec::new(),
            };
            let cfg = SynthConfig {
                min_tokens,
                max_tokens,
                use_distractors: distractors.is_some(),
            };
            let results = sft::synthesize_all(&sources, &cfg, &pool, seed, tok);
            let mut samples = Vec::new();
            let mut failed = Vec::new();
            for (src, r) in sources.iter().zip(results) {
                match r {
                    Ok(s) => samples.push(s),
                    Err(e) => {
                        log::warn!("{e}");
                        failed.push(src.id.clone());
                    }
                }
            }
            write_out(Some(&output), &jsonl(&samples)?)?;
            if let Some(m) = manifest {
                let summary = SynthManifest {
                    samples: samples.len(),
                    padded: samples.iter().filter(|s| s.provenance.padded).count(),
                    failed: failed.clone(),
                    min_tokens,
                    max_tokens,
                    seed,
                    tokenizer: tok.spec().to_string(),
                };
                write_out(Some(&m), &pretty(&summary)?)?;
            }
            eprintln!(
                "{} samples written, {} sources failed",
                samples.len(),
                failed.len()
            );
            return Ok(if failed.is_empty() { 0 } else { 2 });
        }
        SftCmd::Blend { config, output } => {
            let file: BlendFile = serde_json::from_str(&read_text(&config)?)?;
            let root = config.parent().unwrap_or(Path::new("."));
            let mut sizes = BTreeMap::new();
            for (id, path) in &file.datasets {
                sizes.insert(id.clone(), count_lines(&root.join(path))?);
            }
            let manifest = sft::blend_stages(&file.blend, &sizes, file.seed)?;
            write_out(output.as_deref(), &manifest.to_jsonl()?)?;
        }
    }
    Ok(0)
}

fn bench_config(common: &BenchArgs, mode: Option<PromptMode>) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &common.config {
        Some(p) => serde_json::from_str(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(m) = mode {
        cfg.mode = m;
    }
    let retrieval = cfg.retrieval.get_or_insert_with(RetrievalConfig::default);
    if let Some(c) = common.chunk_size {
        retrieval.chunk_size_tokens = c;
    }
    if let Some(k) = common.top_k {
        retrieval.top_k = k;
    }
    if let Some(o) = common.order {
        retrieval.order_policy = o.into();
    }
    if common.window.is_some() || common.truncation.is_some() {
        let w = cfg.window.get_or_insert_with(WindowPolicy::default);
        if let Some(n) = common.window {
            w.window_tokens = n;
        }
        if let Some(t) = common.truncation {
            w.strategy = t.into();
        }
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = &common.model.model {
        cfg.chat.model = m.clone();
    }
    cfg.parallelism = common.model.parallelism;
    Ok(cfg)
}

fn report_dir(common: &BenchArgs) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| bench::timestamped_dir(Path::new("runs")))
}

fn run_bench(cmd: BenchCmd, tok: Tokenizer) -> Result<i32> {
    match cmd {
        BenchCmd::Run { mode, common } => {
            let cfg = bench_config(&common, mode.map(Into::into))?;
            let tasks = read_tasks(&common.tasks)?;
            let harness = common.model.harness(tok, cfg.mode == PromptMode::Rag)?;
            let run = bench::run_eval(&tasks, &cfg, &harness)?;
            let dir = report_dir(&common);
            bench::write_report(&run, &dir)?;
            print!("{}", bench::results_csv(&run.rows)?);
            eprintln!(
                "written to {} ({} backend calls, {} cache hits)",
                dir.display(),
                harness.chat.backend_calls(),
                harness.chat.cache_hits()
            );
            if !run.valid() {
                eprintln!("run is INVALID: failure rate above threshold");
                return Ok(2);
            }
        }
        BenchCmd::Sweep {
            chunk_sizes,
            top_ks,
            common,
        } => {
            let cfg = bench_config(&common, Some(PromptMode::Rag))?;
            let tasks = read_tasks(&common.tasks)?;
            let harness = common.model.harness(tok, true)?;
            let sweep = bench::sweep(&tasks, &cfg, &chunk_sizes, &top_ks, &harness)?;
            let dir = report_dir(&common);
            bench::write_sweep(&sweep, &dir)?;
            fs::write(dir.join("config.json"), pretty(&cfg)?).map_err(|e| Error::io(&dir, e))?;
            print!("{}", sweep.to_csv()?);
        }
        BenchCmd::Compare { common } => {
            let rag = bench_config(&common, Some(PromptMode::Rag))?;
            let full = RunConfig {
                mode: PromptMode::Full,
                window: Some(rag.window.clone().unwrap_or_default()),
                ..rag.clone()
            };
            let tasks = read_tasks(&common.tasks)?;
            let harness = common.model.harness(tok, true)?;
            let cmp = bench::compare_modes(&tasks, &rag, &full, &harness)?;
            let dir = report_dir(&common);
            bench::write_comparison(&cmp, &dir)?;
            let cfgs = serde_json::json!({ "rag": rag, "full": full });
            fs::write(dir.join("config.json"), pretty(&cfgs)?).map_err(|e| Error::io(&dir, e))?;
            print!("{}", cmp.to_markdown());
        }
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn stub_parsing() {
        assert_eq!(
            parse_stub_model("needle").unwrap(),
            StubModelSpec::needle_extractor()
        );
        assert_eq!(
            parse_stub_model("echo:3").unwrap(),
            StubModelSpec::EchoFirstK { k: 3 }
        );
        assert_eq!(
            parse_stub_model("fixed:a:b").unwrap(),
            StubModelSpec::FixedAnswer {
                answer: "a:b".into()
            }
        );
        assert!(parse_stub_model("gpt").is_err());
        assert_eq!(
            parse_stub_embedder("text-hash:8").unwrap(),
            StubEmbedderSpec::TextHash { dim: 8 }
        );
        assert!(parse_stub_embedder("x").is_err());
    }

    #[test]
    fn score_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        let g = dir.path().join("g.jsonl");
        fs::write(
            &p,
            "{\"id\":\"1\",\"prediction\":\"Paris\"}\n{\"id\":\"2\",\"prediction\":\"Rome\"}\n",
        )
        .unwrap();
        fs::write(
            &g,
            "{\"id\":\"1\",\"answers\":[\"paris\"]}\n{\"id\":\"2\",\"answers\":[\"Milan\"]}\n",
        )
        .unwrap();
        let csv = score_files(MetricKind::Em, &p, &g, &Tokenizer::default_rule()).unwrap();
        assert_eq!(
            csv,
            "id,metric,score,precision,recall\n1,em,1.000000,,\n2,em,0.000000,,\nmean,em,0.500000,,\n"
        );
        fs::write(&p, "{\"id\":\"1\",\"prediction\":\"Paris\"}\n").unwrap();
        assert!(score_files(MetricKind::Em, &p, &g, &Tokenizer::default_rule()).is_err());
    }
}
