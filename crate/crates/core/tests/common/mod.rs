//! Shared fixtures for integration tests.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use lcl::gateway::text_hash_vector;
use lcl::metrics::MetricKind;
use lcl::task::{EvalTask, TaskType};
use serde_json::{json, Value};

static ACCESS_CODE: std::sync::LazyLock<regex::Regex> = std::sync::LazyLock::new(|| {
    regex::Regex::new(r"The access code for the \w+ vault is (\w+)\.").unwrap()
});

/// Minimal OpenAI-style server on localhost that counts every request.
pub struct MockServer {
    pub base_url: String,
    hits: Arc<AtomicUsize>,
}

impl MockServer {
    pub fn start() -> Self {
        Self::start_failing(0)
    }

    /// The first `failures` requests get a 503.
    pub fn start_failing(failures: usize) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
        let base_url = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let counter = counter.clone();
                thread::spawn(move || handle(stream, &counter, failures));
            }
        });
        Self { base_url, hits }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

fn handle(stream: TcpStream, hits: &AtomicUsize, failures: usize) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let path = request_line
            .split_whitespace()
            .nth(1)
            .unwrap_or("")
            .to_string();
        let mut len = 0;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((k, v)) = line.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0; len];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let n = hits.fetch_add(1, Ordering::SeqCst);
        let mut out = stream.try_clone().unwrap();
        if n < failures {
            let _ = write!(
                out,
                "HTTP/1.1 503 Service Unavailable\r\nContent-Length: 0\r\n\r\n"
            );
            continue;
        }
        let req: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
        let reply = if path.ends_with("/chat/completions") {
            let prompt = req["messages"]
                .as_array()
                .and_then(|m| m.last())
                .and_then(|m| m["content"].as_str())
                .unwrap_or("");
            let re = &*ACCESS_CODE;
            let answer = re
                .captures(prompt)
                .map_or("unknown".to_string(), |c| c[1].to_string());
            json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": answer}}]})
        } else if path.ends_with("/embeddings") {
            let data: Vec<Value> = req["input"]
                .as_array()
                .map(|xs| {
                    xs.iter()
                        .enumerate()
                        .map(|(i, t)| json!({"index": i, "embedding": text_hash_vector(t.as_str().unwrap_or(""), 16)}))
                        .collect()
                })
                .unwrap_or_default();
            json!({"data": data})
        } else {
            json!({"error": "not found"})
        };
        let body = reply.to_string();
        let _ = write!(
            out,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
            body.len()
        );
        let _ = out.flush();
    }
}

/// A QA item whose document holds one evidence sentence among filler,
/// including near-miss sentences about other vaults.
pub fn evidence_task(id: usize, filler_sentences: usize) -> EvalTask {
    let vaults = ["north", "south", "east", "west", "river", "hill"];
    let vault = vaults[id % vaults.len()];
    let code = format!("C{id:04}X");
    let evidence_at = (id * 7919) % filler_sentences.max(1);
    let mut sentences = Vec::with_capacity(filler_sentences + 1);
    for i in 0..filler_sentences {
        if i == evidence_at {
            sentences.push(format!("The access code for the {vault} vault is {code}."));
        }
        let s = match (i * 31 + id) % 9 {
            0 => format!(
                "The access code for the {} vault was changed in spring.",
                vaults[i % vaults.len()]
            ),
            1 => format!("Guards of the {vault} vault rotate every {i} days."),
            _ => format!("Record {i} notes that the weather stayed mild near the old market."),
        };
        sentences.push(s);
    }
    EvalTask {
        id: format!("item{id:03}"),
        dataset: "evidence".into(),
        document: sentences.join(" "),
        question: Some(format!("What is the access code for the {vault} vault?")),
        answers: vec![code],
        choices: None,
        correct_choice: None,
        task_type: TaskType::Qa,
        metric: MetricKind::Em,
    }
}
