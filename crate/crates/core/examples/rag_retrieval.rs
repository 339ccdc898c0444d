//! Chunk a long document, embed with the offline feature-hash embedder and
//! pull the top chunks for a question.

use std::sync::Arc;

use lcl::gateway::{EmbeddingGateway, StubEmbedder, StubEmbedderSpec};
use lcl::retrieval::{self, OrderPolicy, RetrievalConfig};
use lcl::tokenize::Tokenizer;

fn main() -> lcl::Result<()> {
    let mut text = String::new();
    for i in 0..3000 {
        text.push_str(&format!(
            "Paragraph {i} describes the coastal weather in some detail. "
        ));
        if i == 2211 {
            text.push_str("The lighthouse keeper's name was Ada Thorne. ");
        }
    }
    let tok = Tokenizer::default_rule();
    let embedder = EmbeddingGateway::new(
        Arc::new(StubEmbedder::new(StubEmbedderSpec::FeatureHash {
            dim: 512,
        })?),
        "stub",
        None,
    );
    let cfg = RetrievalConfig {
        chunk_size_tokens: 300,
        top_k: 3,
        order_policy: OrderPolicy::DocumentOrder,
        ..Default::default()
    };
    let r = retrieval::retrieve(
        "coast",
        &text,
        "What was the lighthouse keeper's name?",
        &cfg,
        &tok,
        &embedder,
    )?;
    println!(
        "{} chunks, retrieved {} tokens",
        r.total_chunks, r.retrieved_tokens
    );
    for hit in &r.ranked {
        println!("  {} score {:.4}", hit.id, hit.score);
    }
    println!(
        "context mentions keeper: {}",
        r.context.contains("Ada Thorne")
    );
    Ok(())
}
