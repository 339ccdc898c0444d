//! Benchmark runs: answer every task under one configuration, aggregate
//! per dataset, sweep retrieval settings and compare RAG with full
//! context.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{
    fit_to_window, prompt_parts, ChatGateway, ChatSettings, EmbeddingGateway, PromptMode,
    ResponseCache, StubChat, StubEmbedder, StubEmbedderSpec, StubModelSpec, WindowPolicy,
    TEMPLATE_VERSION,
};
use crate::niah::xml_escape;
use crate::retrieval::{retrieve, Embedder, RetrievalConfig};
use crate::task::EvalTask;
use crate::tokenize::Tokenizer;

pub const DEFAULT_SWEEP_CHUNK_SIZES: [usize; 3] = [300, 600, 1200];
pub const DEFAULT_SWEEP_TOP_K: [usize; 4] = [5, 10, 20, 40];
pub const DEFAULT_MAX_FAILURE_RATE: f64 = 0.1;

/// Everything a run talks to.
pub struct Harness {
    pub chat: ChatGateway,
    pub embedder: Option<Arc<dyn Embedder>>,
    pub tokenizer: Tokenizer,
    embedder_name: Option<String>,
}

impl Harness {
    pub fn new(
        chat: ChatGateway,
        embedder: Option<EmbeddingGateway>,
        tokenizer: Tokenizer,
    ) -> Self {
        let embedder_name = embedder.as_ref().map(EmbeddingGateway::describe);
        Self {
            chat,
            embedder: embedder.map(|e| Arc::new(e) as Arc<dyn Embedder>),
            tokenizer,
            embedder_name,
        }
    }

    /// Needle-extracting stub model and feature-hash embeddings.
    pub fn offline(cache: Option<ResponseCache>) -> Result<Self> {
        let chat = ChatGateway::new(
            Arc::new(StubChat::new(StubModelSpec::needle_extractor())?),
            cache.clone(),
        );
        let embed = EmbeddingGateway::new(
            Arc::new(StubEmbedder::new(StubEmbedderSpec::FeatureHash {
                dim: 256,
            })?),
            "stub",
            cache,
        );
        Ok(Self::new(chat, Some(embed), Tokenizer::default_rule()))
    }

    pub fn embedder_name(&self) -> Option<&str> {
        self.embedder_name.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: PromptMode,
    /// Required in RAG mode.
    pub retrieval: Option<RetrievalConfig>,
    /// Required in full mode; in RAG mode `None` sends prompts untruncated.
    pub window: Option<WindowPolicy>,
    pub chat: ChatSettings,
    pub seed: u64,
    pub parallelism: usize,
    pub max_failure_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: PromptMode::Rag,
            retrieval: Some(RetrievalConfig::default()),
            window: Some(WindowPolicy::default()),
            chat: ChatSettings::default(),
            seed: 0,
            parallelism: 4,
            max_failure_rate: DEFAULT_MAX_FAILURE_RATE,
        }
    }
}

impl RunConfig {
    pub fn full_context(window: WindowPolicy) -> Self {
        Self {
            mode: PromptMode::Full,
            retrieval: None,
            window: Some(window),
            ..Default::default()
        }
    }

    pub fn rag(retrieval: RetrievalConfig) -> Self {
        Self {
            retrieval: Some(retrieval),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == PromptMode::Rag {
            self.retrieval
                .as_ref()
                .ok_or_else(|| Error::Config("rag mode requires a retrieval section".into()))?
                .validate()?;
        }
        if self.mode == PromptMode::Full && self.window.is_none() {
            return Err(Error::Config("full mode requires a window policy".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return Err(Error::Config("max_failure_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.parallelism.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

/// One model answer plus how its prompt was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub response: String,
    pub prompt_tokens: usize,
    pub retrieved_tokens: usize,
    pub dropped_tokens: usize,
    pub dropped_range: Option<(usize, usize)>,
}

pub fn answer_task(task: &EvalTask, cfg: &RunConfig, harness: &Harness) -> Result<Answer> {
    let tok = &harness.tokenizer;
    let (context, retrieved_tokens) = match cfg.mode {
        PromptMode::Full => (task.document.clone(), 0),
        PromptMode::Rag => {
            let rcfg = cfg
                .retrieval
                .as_ref()
                .ok_or_else(|| Error::Config("rag mode requires a retrieval section".into()))?;
            let embedder = harness
                .embedder
                .as_deref()
                .ok_or_else(|| Error::Config("rag mode requires an embedder".into()))?;
            let query = task
                .question
                .as_deref()
                .unwrap_or("Summarize the document.");
            let r = retrieve(&task.id, &task.document, query, rcfg, tok, embedder)?;
            (r.context, r.retrieved_tokens)
        }
    };
    let parts = prompt_parts(cfg.mode, task, &context)?;
    let (prompt, prompt_tokens, dropped_tokens, dropped_range) = match &cfg.window {
        Some(policy) => {
            let fit = fit_to_window(&parts, policy, tok)?;
            (
                fit.prompt,
                fit.prompt_tokens,
                fit.dropped_tokens,
                fit.dropped_range,
            )
        }
        None => {
            let p = parts.join(&parts.document);
            let n = tok.count(&p);
            (p, n, 0, None)
        }
    };
    let response = harness
        .chat
        .complete(&cfg.chat.request(task.task_type, prompt))?;
    Ok(Answer {
        response,
        prompt_tokens,
        retrieved_tokens,
        dropped_tokens,
        dropped_range,
    })
}

fn is_item_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::Transport { .. } | Error::Protocol(_) | Error::Overflow { .. }
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub dataset: String,
    /// In `[0, 1]`; `None` when the item failed.
    pub score: Option<f64>,
    pub prediction: Option<String>,
    pub error: Option<String>,
    pub prompt_tokens: usize,
    pub retrieved_tokens: usize,
    pub dropped_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub mode: PromptMode,
    pub chunk_size: Option<usize>,
    pub top_k: Option<usize>,
    /// `k × chunk_size` in RAG mode, 0 otherwise.
    pub total_retrieved_tokens: usize,
    /// Mean item score × 100.
    pub score: f64,
    pub n_items: usize,
    pub n_failed: usize,
    pub truncated_items: usize,
    pub dropped_tokens: usize,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub template_version: String,
    pub tokenizer: String,
    pub chat_backend: String,
    pub embedder: Option<String>,
    pub seed: u64,
    /// Datasets where every item failed.
    pub empty_datasets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub config: RunConfig,
    pub metadata: RunMetadata,
    pub rows: Vec<ResultRow>,
    pub items: Vec<ItemResult>,
}

impl EvalRun {
    pub fn valid(&self) -> bool {
        self.metadata.empty_datasets.is_empty() && self.rows.iter().all(|r| r.valid)
    }

    pub fn row(&self, dataset: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.dataset == dataset)
    }
}

pub fn fmt_score(v: f64) -> String {
    format!("{v:.4}")
}

/// Answers and scores every task under `cfg`.
pub fn run_eval(tasks: &[EvalTask], cfg: &RunConfig, harness: &Harness) -> Result<EvalRun> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Argument("no tasks to run".into()));
    }
    for t in tasks {
        t.validate()?;
    }
    let results: Vec<Result<ItemResult>> = cfg.pool()?.install(|| {
        tasks
            .par_iter()
            .map(|task| {
                let mut item = ItemResult {
                    id: task.id.clone(),
                    dataset: task.dataset.clone(),
                    score: None,
                    prediction: None,
                    error: None,
                    prompt_tokens: 0,
                    retrieved_tokens: 0,
                    dropped_tokens: 0,
                };
                match answer_task(task, cfg, harness) {
                    Ok(a) => {
                        item.score = Some(task.score(&a.response, &harness.tokenizer)?);
                        item.prediction = Some(a.response);
                        item.prompt_tokens = a.prompt_tokens;
                        item.retrieved_tokens = a.retrieved_tokens;
                        item.dropped_tokens = a.dropped_tokens;
                    }
                    Err(e) if is_item_failure(&e) => {
                        log::warn!("item {} failed: {e}", task.id);
                        item.error = Some(e.to_string());
                    }
                    Err(e) => return Err(e),
                }
                Ok(item)
            })
            .collect()
    });
    let mut items = results.into_iter().collect::<Result<Vec<_>>>()?;
    items.sort_by(|a, b| (&a.dataset, &a.id).cmp(&(&b.dataset, &b.id)));

    let mut by_dataset: BTreeMap<&str, Vec<&ItemResult>> = BTreeMap::new();
    for item in &items {
        by_dataset
            .entry(item.dataset.as_str())
            .or_default()
            .push(item);
    }
    let (chunk_size, top_k) = match (cfg.mode, &cfg.retrieval) {
        (PromptMode::Rag, Some(r)) => (Some(r.chunk_size_tokens), Some(r.top_k)),
        _ => (None, None),
    };
    let mut rows = Vec::new();
    let mut empty_datasets = Vec::new();
    for (dataset, group) in by_dataset {
        let ok: Vec<f64> = group.iter().filter_map(|i| i.score).collect();
        let n_failed = group.len() - ok.len();
        if ok.is_empty() {
            log::error!("dataset {dataset}: every item failed");
            empty_datasets.push(dataset.to_string());
            continue;
        }
        rows.push(ResultRow {
            dataset: dataset.to_string(),
            mode: cfg.mode,
            chunk_size,
            top_k,
            total_retrieved_tokens: chunk_size.zip(top_k).map_or(0, |(c, k)| c * k),
            score: 100.0 * ok.iter().sum::<f64>() / ok.len() as f64,
            n_items: ok.len(),
            n_failed,
            truncated_items: group.iter().filter(|i| i.dropped_tokens > 0).count(),
            dropped_tokens: group.iter().map(|i| i.dropped_tokens).sum(),
            valid: n_failed as f64 <= cfg.max_failure_rate * group.len() as f64,
        });
    }
    Ok(EvalRun {
        config: cfg.clone(),
        metadata: RunMetadata {
            template_version: TEMPLATE_VERSION.to_string(),
            tokenizer: harness.tokenizer.spec().to_string(),
            chat_backend: harness.chat.describe(),
            embedder: harness.embedder_name().map(str::to_string),
            seed: cfg.seed,
            empty_datasets,
        },
        rows,
        items,
    })
}

pub fn results_csv(rows: &[ResultRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "dataset",
        "mode",
        "chunk_size",
        "top_k",
        "total_retrieved_tokens",
        "score",
        "n_items",
        "n_failed",
        "truncated_items",
        "dropped_tokens",
        "valid",
    ])?;
    let opt = |v: Option<usize>| v.map_or(String::new(), |v| v.to_string());
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.mode.to_string(),
            opt(r.chunk_size),
            opt(r.top_k),
            r.total_retrieved_tokens.to_string(),
            fmt_score(r.score),
            r.n_items.to_string(),
            r.n_failed.to_string(),
            r.truncated_items.to_string(),
            r.dropped_tokens.to_string(),
            r.valid.to_string(),
        ])?;
    }
    csv_string(w)
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn results_markdown(run: &EvalRun) -> String {
    let mut s = String::new();
    let m = &run.metadata;
    let _ = writeln!(s, "# Benchmark run\n");
    let _ = writeln!(s, "- mode: {}", run.config.mode);
    if let (PromptMode::Rag, Some(r)) = (run.config.mode, &run.config.retrieval) {
        let _ = writeln!(
            s,
            "- chunk size: {} tokens, top-k: {}, order: {}",
            r.chunk_size_tokens, r.top_k, r.order_policy
        );
    }
    if let Some(w) = &run.config.window {
        let _ = writeln!(s, "- window: {} tokens ({:?})", w.window_tokens, w.strategy);
    }
    let _ = writeln!(
        s,
        "- model: {} via {}",
        run.config.chat.model, m.chat_backend
    );
    if let Some(e) = &m.embedder {
        let _ = writeln!(s, "- embedder: {e}");
    }
    let _ = writeln!(s, "- tokenizer: {}", m.tokenizer);
    let _ = writeln!(s, "- template: {}, seed: {}", m.template_version, m.seed);
    let _ = writeln!(s, "- valid: {}\n", run.valid());
    let _ = writeln!(
        s,
        "| dataset | score | n_items | n_failed | truncated | valid |"
    );
    let _ = writeln!(s, "|---|---:|---:|---:|---:|---|");
    for r in &run.rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} |",
            r.dataset,
            fmt_score(r.score),
            r.n_items,
            r.n_failed,
            r.truncated_items,
            r.valid
        );
    }
    for d in &m.empty_datasets {
        let _ = writeln!(s, "\nDataset `{d}` produced no scored items.");
    }
    s
}

/// `root/<timestamp>`, with a numeric suffix if that already exists.
pub fn timestamped_dir(root: &Path) -> PathBuf {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
    let mut dir = root.join(&stamp);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{stamp}-{n}"));
        n += 1;
    }
    dir
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `config.json`, `results.csv` and `report.md` under `dir`.
pub fn write_report(run: &EvalRun, dir: &Path) -> Result<()> {
    if run.rows.is_empty() {
        return Err(Error::Data("run has no result rows".into()));
    }
    ensure_dir(dir)?;
    let config = serde_json::json!({ "config": run.config, "metadata": run.metadata });
    write_file(
        &dir.join("config.json"),
        &serde_json::to_string_pretty(&config)?,
    )?;
    write_file(&dir.join("results.csv"), &results_csv(&run.rows)?)?;
    write_file(&dir.join("report.md"), &results_markdown(run))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub chunk_size: usize,
    pub top_k: usize,
    pub retrieved_tokens: usize,
    pub dataset: String,
    pub score: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub points: Vec<SweepPoint>,
}

impl Sweep {
    /// Mean over datasets per `(chunk_size, top_k)`, ordered by chunk size then k.
    pub fn curve(&self) -> Vec<(usize, usize, usize, f64)> {
        let mut acc: BTreeMap<(usize, usize), (usize, f64, usize)> = BTreeMap::new();
        for p in &self.points {
            let e = acc
                .entry((p.chunk_size, p.top_k))
                .or_insert((p.retrieved_tokens, 0.0, 0));
            e.1 += p.score;
            e.2 += 1;
        }
        acc.into_iter()
            .map(|((c, k), (tokens, sum, n))| (c, k, tokens, sum / n as f64))
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "chunk_size",
            "top_k",
            "retrieved_tokens",
            "dataset",
            "score",
            "valid",
        ])?;
        for p in &self.points {
            w.write_record([
                p.chunk_size.to_string(),
                p.top_k.to_string(),
                p.retrieved_tokens.to_string(),
                p.dataset.clone(),
                fmt_score(p.score),
                p.valid.to_string(),
            ])?;
        }
        csv_string(w)
    }

    /// Score against retrieved tokens, one line per chunk size.
    pub fn to_svg(&self) -> String {
        let curve = self.curve();
        let (w, h, left, bottom, top, right) = (640.0, 400.0, 60.0, 50.0, 30.0, 120.0);
        let max_x = curve.iter().map(|c| c.2).max().unwrap_or(1).max(1) as f64;
        let max_y = curve.iter().map(|c| c.3).fold(0.0f64, f64::max).max(1.0);
        let px = |x: f64| left + (w - left - right) * x / max_x;
        let py = |y: f64| h - bottom - (h - bottom - top) * y / max_y;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(
            s,
            r#"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{0}" stroke="black"/>"#,
            h - bottom,
            w - right
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">retrieved tokens</text>"#,
            (left + w - right) / 2.0,
            h - 12.0
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" transform="rotate(-90 14 {0})" text-anchor="middle">score</text>"#,
            (top + h - bottom) / 2.0
        );
        let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
        let mut sizes: Vec<usize> = curve.iter().map(|c| c.0).collect();
        sizes.dedup();
        for (i, size) in sizes.iter().enumerate() {
            let color = palette[i % palette.len()];
            let pts: Vec<String> = curve
                .iter()
                .filter(|c| c.0 == *size)
                .map(|c| format!("{:.1},{:.1}", px(c.2 as f64), py(c.3)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                pts.join(" ")
            );
            for c in curve.iter().filter(|c| c.0 == *size) {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                    px(c.2 as f64),
                    py(c.3)
                );
            }
            let ly = top + 16.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#,
                w - right + 10.0,
                xml_escape(&format!("chunk {size}"))
            );
        }
        for c in &curve {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
                px(c.2 as f64),
                h - bottom + 14.0,
                c.2
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Runs `base` once per `(chunk_size, k)` pair.
pub fn sweep(
    tasks: &[EvalTask],
    base: &RunConfig,
    chunk_sizes: &[usize],
    top_ks: &[usize],
    harness: &Harness,
) -> Result<Sweep> {
    if chunk_sizes.is_empty() || top_ks.is_empty() {
        return Err(Error::Argument(
            "sweep needs chunk sizes and top-k values".into(),
        ));
    }
    let mut points = Vec::new();
    for &chunk_size in chunk_sizes {
        for &top_k in top_ks {
            let cfg = RunConfig {
                mode: PromptMode::Rag,
                retrieval: Some(RetrievalConfig {
                    chunk_size_tokens: chunk_size,
                    top_k,
                    ..base.retrieval.clone().unwrap_or_default()
                }),
                ..base.clone()
            };
            let run = run_eval(tasks, &cfg, harness)?;
            points.extend(run.rows.iter().map(|r| SweepPoint {
                chunk_size,
                top_k,
                retrieved_tokens: r.total_retrieved_tokens,
                dataset: r.dataset.clone(),
                score: r.score,
                valid: r.valid,
            }));
        }
    }
    Ok(Sweep { points })
}

pub fn write_sweep(sweep: &Sweep, dir: &Path) -> Result<()> {
    if sweep.points.is_empty() {
        return Err(Error::Data("sweep has no points".into()));
    }
    ensure_dir(dir)?;
    write_file(&dir.join("results.csv"), &sweep.to_csv()?)?;
    write_file(&dir.join("curve.svg"), &sweep.to_svg())?;
    let mut md = String::from("# Retrieval sweep\n\n| chunk_size | top_k | retrieved_tokens | mean score |\n|---:|---:|---:|---:|\n");
    for (c, k, t, s) in sweep.curve() {
        let _ = writeln!(md, "| {c} | {k} | {t} | {} |", fmt_score(s));
    }
    write_file(&dir.join("report.md"), &md)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub dataset: String,
    pub rag: Option<f64>,
    pub long_context: Option<f64>,
}

impl ComparisonRow {
    /// Long context minus RAG.
    pub fn delta(&self) -> Option<f64> {
        Some(self.long_context? - self.rag?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub top_k: usize,
    pub rows: Vec<ComparisonRow>,
    pub rag_valid: bool,
    pub long_context_valid: bool,
}

impl Comparison {
    fn cell(v: Option<f64>) -> String {
        v.map_or("-".to_string(), fmt_score)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "| dataset | RAG (top-{}) | Long context | delta |\n|---|---:|---:|---:|\n",
            self.top_k
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} |",
                r.dataset,
                Self::cell(r.rag),
                Self::cell(r.long_context),
                Self::cell(r.delta())
            );
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["dataset", "rag", "long_context", "delta"])?;
        let cell = |v: Option<f64>| v.map_or(String::new(), fmt_score);
        for r in &self.rows {
            w.write_record([
                r.dataset.clone(),
                cell(r.rag),
                cell(r.long_context),
                cell(r.delta()),
            ])?;
        }
        csv_string(w)
    }
}

pub fn compare_modes(
    tasks: &[EvalTask],
    rag: &RunConfig,
    full: &RunConfig,
    harness: &Harness,
) -> Result<Comparison> {
    if rag.mode != PromptMode::Rag || full.mode != PromptMode::Full {
        return Err(Error::Config(
            "compare needs one rag and one full configuration".into(),
        ));
    }
    let a = run_eval(tasks, rag, harness)?;
    let b = run_eval(tasks, full, harness)?;
    let mut datasets: Vec<&str> = tasks.iter().map(|t| t.dataset.as_str()).collect();
    datasets.sort_unstable();
    datasets.dedup();
    Ok(Comparison {
        top_k: rag.retrieval.as_ref().map_or(0, |r| r.top_k),
        rows: datasets
            .into_iter()
            .map(|d| ComparisonRow {
                dataset: d.to_string(),
                rag: a.row(d).map(|r| r.score),
                long_context: b.row(d).map(|r| r.score),
            })
            .collect(),
        rag_valid: a.valid(),
        long_context_valid: b.valid(),
    })
}

pub fn write_comparison(cmp: &Comparison, dir: &Path) -> Result<()> {
    if cmp.rows.is_empty() {
        return Err(Error::Data("comparison has no rows".into()));
    }
    ensure_dir(dir)?;
    write_file(&dir.join("results.csv"), &cmp.to_csv()?)?;
    write_file(&dir.join("report.md"), &cmp.to_markdown())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatBackend, ChatRequest, TruncationStrategy};
    use crate::metrics::MetricKind;
    use crate::task::TaskType;

    fn needle_task(id: &str, dataset: &str, code: &str, pad: usize) -> EvalTask {
        let filler: Vec<String> = (0..pad)
            .map(|i| format!("Line {i} is about the weather."))
            .collect();
        let mut doc = filler[..pad / 2].join(" ");
        doc.push_str(&format!(" The access code for the north vault is {code}. "));
        doc.push_str(&filler[pad / 2..].join(" "));
        EvalTask {
            id: id.into(),
            dataset: dataset.into(),
            document: doc,
            question: Some("What is the access code for the north vault?".into()),
            answers: vec![code.into()],
            choices: None,
            correct_choice: None,
            task_type: TaskType::Qa,
            metric: MetricKind::Em,
        }
    }

    #[test]
    fn full_context_run_scores_and_sorts() {
        let h = Harness::offline(None).unwrap();
        let tasks = vec![
            needle_task("b", "z", "K2", 20),
            needle_task("a", "z", "K1", 20),
            needle_task("c", "y", "K3", 20),
        ];
        let run = run_eval(
            &tasks,
            &RunConfig::full_context(WindowPolicy::default()),
            &h,
        )
        .unwrap();
        assert_eq!(run.rows.len(), 2);
        assert_eq!(run.rows[0].dataset, "y");
        assert_eq!(run.rows[1].score, 100.0);
        assert_eq!(run.items[1].id, "a");
        assert_eq!(run.rows[0].total_retrieved_tokens, 0);
        assert!(run.valid());
    }

    #[test]
    fn drop_middle_loses_the_needle() {
        let h = Harness::offline(None).unwrap();
        let tasks = vec![needle_task("a", "d", "K1", 400)];
        let cfg = RunConfig::full_context(WindowPolicy::new(200, TruncationStrategy::DropMiddle));
        let run = run_eval(&tasks, &cfg, &h).unwrap();
        assert_eq!(run.rows[0].score, 0.0);
        assert_eq!(run.rows[0].truncated_items, 1);
    }

    #[test]
    fn rag_row_reports_budget() {
        let h = Harness::offline(None).unwrap();
        let tasks = vec![needle_task("a", "d", "K1", 300)];
        let cfg = RunConfig::rag(RetrievalConfig {
            chunk_size_tokens: 50,
            top_k: 3,
            ..Default::default()
        });
        let run = run_eval(&tasks, &cfg, &h).unwrap();
        assert_eq!(run.rows[0].total_retrieved_tokens, 150);
        assert_eq!(run.rows[0].chunk_size, Some(50));
    }

    struct Flaky;
    impl ChatBackend for Flaky {
        fn complete(&self, req: &ChatRequest) -> Result<String> {
            if req.last_user_message().contains("K1") {
                Err(Error::Transport {
                    status: Some(503),
                    message: "down".into(),
                })
            } else {
                Ok("K".into())
            }
        }
        fn describe(&self) -> String {
            "flaky".into()
        }
    }

    #[test]
    fn failures_are_excluded_and_invalidate() {
        let h = Harness::new(
            ChatGateway::new(Arc::new(Flaky), None),
            None,
            Tokenizer::default_rule(),
        );
        let tasks = vec![
            needle_task("a", "d", "K1", 10),
            needle_task("b", "d", "K2", 10),
        ];
        let run = run_eval(
            &tasks,
            &RunConfig::full_context(WindowPolicy::default()),
            &h,
        )
        .unwrap();
        let row = &run.rows[0];
        assert_eq!((row.n_items, row.n_failed), (1, 1));
        assert!(!row.valid);
        assert!(run.items[0].error.is_some());
        let only = vec![needle_task("a", "d", "K1", 10)];
        let run = run_eval(&only, &RunConfig::full_context(WindowPolicy::default()), &h).unwrap();
        assert!(run.rows.is_empty() && !run.valid());
        assert!(write_report(&run, &tempfile::tempdir().unwrap().path().join("r")).is_err());
    }

    #[test]
    fn rag_needs_an_embedder() {
        let h = Harness::new(
            ChatGateway::new(Arc::new(Flaky), None),
            None,
            Tokenizer::default_rule(),
        );
        let tasks = vec![needle_task("a", "d", "K2", 10)];
        assert!(matches!(
            run_eval(&tasks, &RunConfig::default(), &h),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn report_files_and_markdown_match_csv() {
        let h = Harness::offline(None).unwrap();
        let mut wrong = needle_task("b", "d", "K2", 20);
        wrong.answers = vec!["other".into()];
        let tasks = vec![needle_task("a", "d", "K1", 20), wrong];
        let run = run_eval(
            &tasks,
            &RunConfig::full_context(WindowPolicy::default()),
            &h,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_report(&run, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
        let score = csv
            .lines()
            .nth(1)
            .unwrap()
            .split(',')
            .nth(5)
            .unwrap()
            .to_string();
        assert_eq!(score, "50.0000");
        assert!(md.contains(&format!("| d | {score} |")));
    }

    #[test]
    fn compare_table() {
        let h = Harness::offline(None).unwrap();
        let tasks = vec![needle_task("a", "d", "K1", 200)];
        let rag = RunConfig::rag(RetrievalConfig {
            chunk_size_tokens: 40,
            top_k: 1,
            ..Default::default()
        });
        let cmp = compare_modes(
            &tasks,
            &rag,
            &RunConfig::full_context(WindowPolicy::default()),
            &h,
        )
        .unwrap();
        assert_eq!(cmp.rows[0].long_context, Some(100.0));
        assert!(cmp.to_markdown().contains("RAG (top-1)"));
        assert!(compare_modes(&tasks, &rag, &rag, &h).is_err());
    }
}
