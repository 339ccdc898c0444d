//! Build a padded long SFT sample and a cumulative three-stage blend.

use std::collections::BTreeMap;

use lcl::corpus::RawDocument;
use lcl::sft::{self, BlendEntry, QaPair, SftSource, Stage, StageBlend, SynthConfig};
use lcl::tokenize::Tokenizer;

fn main() -> lcl::Result<()> {
    let tok = Tokenizer::default_rule();
    let source = SftSource {
        id: "harbor".into(),
        paragraphs: vec![
            "The harbor was dredged in 1911 to admit larger ships.".into(),
            "By 1930 it handled most of the region's grain exports.".into(),
        ],
        summary: "Summary: a dredged harbor became the regional grain port.".into(),
        qa_pairs: vec![QaPair {
            question: "When was the harbor dredged?".into(),
            answers: vec!["1911".into()],
        }],
    };
    let distractors: Vec<RawDocument> = (0..200)
        .map(|i| RawDocument {
            id: format!("filler{i}"),
            text: format!(
                "Unrelated note {i} about mountain trails.\n\nAnother note {i} about river fish."
            ),
        })
        .collect();
    let pool = sft::distractor_paragraphs(&distractors);
    let cfg = SynthConfig {
        min_tokens: 500,
        max_tokens: 800,
        use_distractors: true,
    };
    let sample = sft::synthesize_long_sample(&source, &cfg, &pool, 42, &tok)?;
    println!(
        "sample: {} tokens, summary at token {}, {} distractor paragraphs",
        sample.token_count,
        sample.summary_position,
        sample.provenance.distractors.len()
    );

    let stage = |name: &str, ds: &str| Stage {
        name: name.into(),
        datasets: vec![BlendEntry {
            dataset: ds.into(),
            weight: None,
        }],
        examples: None,
    };
    let blend = StageBlend {
        stages: vec![
            stage("sft", "instructions"),
            stage("chat", "conversational_qa"),
            stage("long", "long_sft"),
        ],
        cumulative: true,
    };
    let sizes: BTreeMap<String, usize> = [
        ("instructions", 600),
        ("conversational_qa", 300),
        ("long_sft", 100),
    ]
    .map(|(k, v)| (k.to_string(), v))
    .into();
    let manifest = sft::blend_stages(&blend, &sizes, 0)?;
    for ((stage, ds), n) in manifest.counts() {
        println!("{stage:>5} {ds:<18} {n}");
    }
    Ok(())
}
