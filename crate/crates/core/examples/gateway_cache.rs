//! Cached, deduplicated completions: eight threads ask the same question,
//! the backend sees it once, and a second gateway over the same cache
//! directory sees it zero times.
//!
//! Point `LCL_API_BASE` at an OpenAI-style server to use a real model;
//! otherwise a fixed-answer stub is used.

use std::sync::Arc;
use std::thread;

use lcl::gateway::{
    ChatBackend, ChatGateway, ChatSettings, Endpoint, HttpClient, ResponseCache, RetryPolicy,
    StubChat, StubModelSpec,
};
use lcl::task::TaskType;

fn backend() -> lcl::Result<Arc<dyn ChatBackend>> {
    Ok(match Endpoint::chat_from_env() {
        Some(ep) => Arc::new(HttpClient::new(ep, RetryPolicy::default())),
        None => Arc::new(StubChat::new(StubModelSpec::FixedAnswer {
            answer: "42".into(),
        })?),
    })
}

fn main() -> lcl::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| lcl::Error::Data(e.to_string()))?;
    let req = ChatSettings::default().request(TaskType::Qa, "What is six times seven?".into());

    let gw = Arc::new(ChatGateway::new(
        backend()?,
        Some(ResponseCache::new(dir.path())),
    ));
    let answers: Vec<String> = (0..8)
        .map(|_| {
            let gw = gw.clone();
            let req = req.clone();
            thread::spawn(move || gw.complete(&req))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .map(|h| h.join().expect("worker panicked"))
        .collect::<lcl::Result<_>>()?;
    println!(
        "{} answers, backend calls {}",
        answers.len(),
        gw.backend_calls()
    );

    let warm = ChatGateway::new(backend()?, Some(ResponseCache::new(dir.path())));
    println!(
        "warm answer {:?}, backend calls {}",
        warm.complete(&req)?,
        warm.backend_calls()
    );
    println!(
        "cache entry {}",
        ResponseCache::new(dir.path())
            .path_for(&req.request_hash())
            .display()
    );
    Ok(())
}
