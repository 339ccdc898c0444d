//! Chunk-size x top-k sweep and a RAG vs long-context comparison over
//! synthetic single-evidence QA items, fully offline.

use lcl::bench::{self, Harness, RunConfig};
use lcl::gateway::WindowPolicy;
use lcl::metrics::MetricKind;
use lcl::retrieval::RetrievalConfig;
use lcl::task::{EvalTask, TaskType};

fn item(i: usize) -> EvalTask {
    let mut doc = String::new();
    for s in 0..1500 {
        if s == (i * 97) % 1500 {
            doc.push_str(&format!("The access code for the north vault is K{i}Q. "));
        }
        doc.push_str(&format!(
            "Entry {s} logs that the north vault door was inspected. "
        ));
    }
    EvalTask {
        id: format!("q{i:02}"),
        dataset: "vaults".into(),
        document: doc,
        question: Some("What is the access code for the north vault?".into()),
        answers: vec![format!("K{i}Q")],
        choices: None,
        correct_choice: None,
        task_type: TaskType::Qa,
        metric: MetricKind::Em,
    }
}

fn main() -> lcl::Result<()> {
    let harness = Harness::offline(None)?;
    let tasks: Vec<EvalTask> = (0..12).map(item).collect();

    let sweep = bench::sweep(
        &tasks,
        &RunConfig::default(),
        &bench::DEFAULT_SWEEP_CHUNK_SIZES,
        &bench::DEFAULT_SWEEP_TOP_K,
        &harness,
    )?;
    for (chunk, k, tokens, score) in sweep.curve() {
        println!("chunk {chunk:>4} k {k:>2} tokens {tokens:>5} score {score:6.2}");
    }

    let rag = RunConfig::rag(RetrievalConfig::default());
    let full = RunConfig::full_context(WindowPolicy::new(8192, Default::default()));
    let cmp = bench::compare_modes(&tasks, &rag, &full, &harness)?;
    print!("\n{}", cmp.to_markdown());
    Ok(())
}
