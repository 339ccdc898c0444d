//! Upsample long documents to a 10% token share, then pack into
//! fixed-length sequences separated by `<s>`.

use lcl::corpus::{
    self, Document, PackedStats, SeparatorPolicy, TrainingHyperparams, TrainingManifest,
    UpsampleConfig,
};
use rand::{Rng, SeedableRng};

fn main() -> lcl::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let docs: Vec<Document> = (0..2000)
        .map(|i| {
            let n = if i % 50 == 0 {
                rng.random_range(9000..40_000)
            } else {
                rng.random_range(100..3000)
            };
            Document::with_length(format!("doc{i}"), n)
        })
        .collect();

    let stats = corpus::corpus_stats(&docs, corpus::DEFAULT_LONG_THRESHOLD);
    println!(
        "corpus: {} docs, {} tokens, long share {:.3}",
        stats.doc_count, stats.total_tokens, stats.long_token_share
    );

    let cfg = UpsampleConfig {
        target_total_tokens: 2_000_000,
        seed: 1,
        ..Default::default()
    };
    let mut stream = corpus::upsample(&docs, &cfg)?;
    let sampled: Vec<&Document> = stream.by_ref().collect();
    println!(
        "upsampled: {} draws, long share {:.4}",
        sampled.len(),
        stream.realised_share()
    );

    let seqs = corpus::pack(sampled.iter().copied(), 32_768, &SeparatorPolicy::default())?;
    let packed = PackedStats::from_sequences(&seqs);
    println!(
        "packed: {} sequences, {} document tokens, {} separator tokens",
        packed.sequences, packed.document_tokens, packed.separator_tokens
    );

    let manifest = TrainingManifest::new(TrainingHyperparams::default(), packed);
    print!("{}", manifest.to_json()?);
    Ok(())
}
