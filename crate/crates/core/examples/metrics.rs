//! QA and summarization metrics on a handful of predictions.

use lcl::metrics::{self, NormalizationRule};
use lcl::tokenize::Tokenizer;

fn main() -> lcl::Result<()> {
    let tok = Tokenizer::default_rule();
    let rule = NormalizationRule::default();
    let gold = vec!["Dolores Park".to_string()];
    for pred in ["dolores park", "Sit in Dolores Park.", "Golden Gate Park"] {
        println!(
            "{pred:<22} EM {:.2}  F1 {:.3}",
            metrics::exact_match(pred, &gold, &rule)?,
            metrics::token_f1(pred, &gold, &rule, &tok)?
        );
    }

    let reference = "The storm hit the coast on Monday.\nPower was restored by Wednesday.";
    let summary = "A storm struck the coast Monday. Power came back Wednesday.";
    let lsum = metrics::rouge_l_sum(summary, reference);
    println!(
        "ROUGE-Lsum {:.4} (P {:?}, R {:?})",
        lsum.score, lsum.precision, lsum.recall
    );
    println!(
        "ROUGE geometric mean {:.4}",
        metrics::rouge_geo_mean(summary, reference)
    );

    let choices: Vec<String> = ["Paris", "Lyon", "Nice", "Lille"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for pred in [
        "B",
        "The answer is (A)",
        "It must be Paris",
        "Paris or Lyon",
    ] {
        println!(
            "mc {pred:<18} -> {}",
            metrics::mc_accuracy(pred, 0, &choices)?
        );
    }
    Ok(())
}
