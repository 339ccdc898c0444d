//! Synthetic long SFT samples and stage-blending manifests.
//!
//! A sample is the source's related paragraphs in order with the gold
//! summary dropped in at a random paragraph boundary. Padding with
//! distractor paragraphs is optional and recorded in the provenance.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::RawDocument;
use crate::error::{Error, Result};
use crate::tokenize::Tokenizer;

pub const LONG_SFT_MIN_TOKENS: usize = 32_768;
pub const LONG_SFT_MAX_TOKENS: usize = 131_072;
pub const PARAGRAPH_JOINER: &str = "\n\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftSource {
    pub id: String,
    pub paragraphs: Vec<String>,
    pub summary: String,
    #[serde(default)]
    pub qa_pairs: Vec<QaPair>,
}

impl SftSource {
    pub fn validate(&self) -> Result<()> {
        if self.paragraphs.is_empty() {
            return Err(Error::Data(format!(
                "source {:?} has no paragraphs",
                self.id
            )));
        }
        if self.summary.trim().is_empty() {
            return Err(Error::Data(format!(
                "source {:?} has an empty summary",
                self.id
            )));
        }
        if let Some(qa) = self.qa_pairs.iter().find(|q| q.answers.is_empty()) {
            return Err(Error::Data(format!(
                "source {:?}: question {:?} has no answers",
                self.id, qa.question
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    /// Distractor paragraph ids, in insertion order.
    #[serde(default)]
    pub distractors: Vec<String>,
    pub padded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftSample {
    pub document: String,
    pub token_count: usize,
    pub qa_pairs: Vec<QaPair>,
    pub summary_position: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub use_distractors: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            min_tokens: LONG_SFT_MIN_TOKENS,
            max_tokens: LONG_SFT_MAX_TOKENS,
            use_distractors: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config(format!(
                "token range [{}, {}] is empty",
                self.min_tokens, self.max_tokens
            )));
        }
        Ok(())
    }
}

/// Per-source RNG seed: the global seed xor a hash of the source id.
pub fn sample_seed(global: u64, source_id: &str) -> u64 {
    let digest = Sha256::digest(source_id.as_bytes());
    global ^ u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Splits distractor documents into blank-line paragraphs tagged `doc#i`.
pub fn distractor_paragraphs(docs: &[RawDocument]) -> Vec<(String, String)> {
    docs.iter()
        .flat_map(|d| {
            d.text
                .split("\n\n")
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .enumerate()
                .map(move |(i, p)| (format!("{}#{i}", d.id), p.to_string()))
        })
        .collect()
}

pub fn synthesize_long_sample(
    src: &SftSource,
    cfg: &SynthConfig,
    distractors: &[(String, String)],
    global_seed: u64,
    tokenizer: &Tokenizer,
) -> Result<SftSample> {
    src.validate()?;
    cfg.validate()?;
    if src.paragraphs.iter().any(|p| p.contains(&src.summary)) {
        return Err(Error::Data(format!(
            "source {:?}: summary text occurs inside a paragraph",
            src.id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(global_seed, &src.id));

    // (text, token count, is summary)
    let mut segments: Vec<(&str, usize, bool)> = src
        .paragraphs
        .iter()
        .map(|p| (p.as_str(), tokenizer.count(p), false))
        .collect();
    let at = rng.random_range(0..=segments.len());
    segments.insert(at, (&src.summary, tokenizer.count(&src.summary), true));
    let mut total: usize = segments.iter().map(|s| s.1).sum();
    if total > cfg.max_tokens {
        return Err(Error::Data(format!(
            "source {:?} has {total} tokens, above the maximum {}",
            src.id, cfg.max_tokens
        )));
    }

    let mut used = Vec::new();
    if total < cfg.min_tokens && cfg.use_distractors {
        let mut order: Vec<usize> = (0..distractors.len()).collect();
        order.shuffle(&mut rng);
        for i in order {
            if total >= cfg.min_tokens {
                break;
            }
            let (id, text) = &distractors[i];
            if text.contains(&src.summary) {
                continue;
            }
            let n = tokenizer.count(text);
            if n == 0 || total + n > cfg.max_tokens {
                continue;
            }
            let pos = rng.random_range(0..=segments.len());
            segments.insert(pos, (text, n, false));
            total += n;
            used.push(id.clone());
        }
    }
    if total < cfg.min_tokens {
        return Err(Error::Data(format!(
            "source {:?} reaches {total} tokens, below the minimum {}",
            src.id, cfg.min_tokens
        )));
    }

    let summary_position = segments.iter().take_while(|s| !s.2).map(|s| s.1).sum();
    let document = segments
        .iter()
        .map(|s| s.0)
        .collect::<Vec<_>>()
        .join(PARAGRAPH_JOINER);
    if document.matches(src.summary.as_str()).count() != 1 {
        return Err(Error::Data(format!(
            "source {:?}: summary is not unique in the sample",
            src.id
        )));
    }
    Ok(SftSample {
        document,
        token_count: total,
        qa_pairs: src.qa_pairs.clone(),
        summary_position,
        provenance: Provenance {
            source: src.id.clone(),
            padded: !used.is_empty(),
            distractors: used,
        },
    })
}

/// Synthesizes every source in parallel; output order follows input order.
pub fn synthesize_all(
    sources: &[SftSource],
    cfg: &SynthConfig,
    distractors: &[(String, String)],
    global_seed: u64,
    tokenizer: &Tokenizer,
) -> Vec<Result<SftSample>> {
    sources
        .par_iter()
        .map(|s| synthesize_long_sample(s, cfg, distractors, global_seed, tokenizer))
        .collect()
}

pub fn read_sources(path: &Path) -> Result<Vec<SftSource>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let src: SftSource = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        src.validate()?;
        out.push(src);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendEntry {
    pub dataset: String,
    /// Defaults to the dataset size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub datasets: Vec<BlendEntry>,
    /// Examples to draw; defaults to the summed size of the stage's datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub examples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBlend {
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub cumulative: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub dataset: String,
    pub index: usize,
    /// Sampling probability of `dataset` within the stage.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendManifest {
    pub entries: Vec<ManifestEntry>,
}

impl BlendManifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }

    /// Example counts per `(stage, dataset)`.
    pub fn counts(&self) -> BTreeMap<(String, String), usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry((e.stage.clone(), e.dataset.clone())).or_insert(0) += 1;
        }
        m
    }

    pub fn stage(&self, name: &str) -> impl Iterator<Item = &ManifestEntry> {
        let name = name.to_string();
        self.entries.iter().filter(move |e| e.stage == name)
    }
}

/// Weighted dataset choice per example; each dataset is walked in order,
/// wrapping around when exhausted.
pub fn blend_stages(
    blend: &StageBlend,
    sizes: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<BlendManifest> {
    if blend.stages.is_empty() {
        return Err(Error::Config("blend has no stages".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut active: Vec<BlendEntry> = Vec::new();
    let mut entries = Vec::new();
    for stage in &blend.stages {
        if !blend.cumulative {
            active.clear();
        }
        for e in &stage.datasets {
            match active.iter_mut().find(|a| a.dataset == e.dataset) {
                Some(a) => a.weight = e.weight,
                None => active.push(e.clone()),
            }
        }
        if active.is_empty() {
            return Err(Error::Config(format!(
                "stage {:?} has no datasets",
                stage.name
            )));
        }
        let mut resolved = Vec::with_capacity(active.len());
        for e in &active {
            let size = *sizes
                .get(&e.dataset)
                .ok_or_else(|| Error::Config(format!("unknown dataset {:?}", e.dataset)))?;
            if size == 0 {
                return Err(Error::Data(format!("dataset {:?} is empty", e.dataset)));
            }
            let w = e.weight.unwrap_or(size as f64);
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Config(format!(
                    "dataset {:?}: weight must be positive",
                    e.dataset
                )));
            }
            resolved.push((e.dataset.as_str(), size, w));
        }
        let total_w: f64 = resolved.iter().map(|r| r.2).sum();
        let n = stage
            .examples
            .unwrap_or_else(|| resolved.iter().map(|r| r.1).sum());
        let dist = WeightedIndex::new(resolved.iter().map(|r| r.2))
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut cursor = vec![0usize; resolved.len()];
        for _ in 0..n {
            let d = if resolved.len() == 1 {
                0
            } else {
                dist.sample(&mut rng)
            };
            let (name, size, w) = resolved[d];
            entries.push(ManifestEntry {
                stage: stage.name.clone(),
                dataset: name.to_string(),
                index: cursor[d] % size,
                weight: w / total_w,
            });
            cursor[d] += 1;
        }
    }
    Ok(BlendManifest { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn source(n_par: usize, words_per: usize) -> SftSource {
        SftSource {
            id: "s1".into(),
            paragraphs: (0..n_par)
                .map(|p| {
                    (0..words_per)
                        .map(|w| format!("p{p}w{w}"))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect(),
            summary: "In short the answer is fortytwo.".into(),
            qa_pairs: vec![QaPair {
                question: "What word?".into(),
                answers: vec!["p0w1".into()],
            }],
        }
    }

    fn cfg(min: usize, max: usize, distractors: bool) -> SynthConfig {
        SynthConfig {
            min_tokens: min,
            max_tokens: max,
            use_distractors: distractors,
        }
    }

    fn pool(n: usize) -> Vec<(String, String)> {
        let docs: Vec<RawDocument> = (0..n)
            .map(|i| RawDocument {
                id: format!("d{i}"),
                text: format!("filler {i} alpha beta\n\nmore filler {i} gamma delta epsilon"),
            })
            .collect();
        distractor_paragraphs(&docs)
    }

    #[test]
    fn single_paragraph_goes_either_side() {
        let tok = Tokenizer::default_rule();
        let src = source(1, 5);
        let mut seen = std::collections::HashSet::new();
        for seed in 0..32 {
            let s = synthesize_long_sample(&src, &cfg(0, 1000, false), &[], seed, &tok).unwrap();
            assert_eq!(s.document.split(PARAGRAPH_JOINER).count(), 2);
            seen.insert(s.summary_position);
        }
        assert_eq!(seen, [0, 5].into_iter().collect());
    }

    #[test]
    fn deterministic_per_seed() {
        let tok = Tokenizer::default_rule();
        let src = source(6, 10);
        let c = cfg(100, 200, true);
        let a = synthesize_long_sample(&src, &c, &pool(20), 9, &tok).unwrap();
        let b = synthesize_long_sample(&src, &c, &pool(20), 9, &tok).unwrap();
        assert_eq!(a, b);
        assert!(a.provenance.padded);
        assert!((100..=200).contains(&a.token_count));
    }

    #[test]
    fn range_errors() {
        let tok = Tokenizer::default_rule();
        let src = source(3, 10);
        assert!(matches!(
            synthesize_long_sample(&src, &cfg(100, 200, false), &[], 1, &tok),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            synthesize_long_sample(&src, &cfg(0, 20, false), &[], 1, &tok),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            synthesize_long_sample(&src, &cfg(10_000, 20_000, true), &pool(3), 1, &tok),
            Err(Error::Data(_))
        ));
        assert!(synthesize_long_sample(&src, &cfg(5, 4, false), &[], 1, &tok).is_err());
    }

    proptest! {
        #[test]
        fn sample_invariants(n_par in 1usize..8, words in 1usize..20, seed in any::<u64>(), min in 0usize..150) {
            let tok = Tokenizer::default_rule();
            let src = source(n_par, words);
            let c = cfg(min, min + 60, true);
            if let Ok(s) = synthesize_long_sample(&src, &c, &pool(30), seed, &tok) {
                prop_assert!(s.token_count >= c.min_tokens && s.token_count <= c.max_tokens);
                prop_assert_eq!(tok.count(&s.document), s.token_count);
                prop_assert_eq!(s.document.matches(src.summary.as_str()).count(), 1);
                let n_sum = tok.count(&src.summary);
                let at = tok.slice(&s.document, s.summary_position, s.summary_position + n_sum).unwrap();
                prop_assert_eq!(at, src.summary.as_str());
                for p in &src.paragraphs {
                    prop_assert!(s.document.contains(p.as_str()));
                }
                for a in src.qa_pairs.iter().flat_map(|q| &q.answers) {
                    let in_source = src.paragraphs.iter().any(|p| p.contains(a.as_str()));
                    prop_assert!(!in_source || s.document.contains(a.as_str()));
                }
                // related paragraphs keep source order
                let pos: Vec<usize> = src.paragraphs.iter().map(|p| s.document.find(p.as_str()).unwrap()).collect();
                prop_assert!(pos.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    fn sizes(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn single_dataset_is_verbatim() {
        let blend = StageBlend {
            stages: vec![Stage {
                name: "s1".into(),
                datasets: vec![BlendEntry {
                    dataset: "a".into(),
                    weight: Some(1.0),
                }],
                examples: None,
            }],
            cumulative: false,
        };
        let m = blend_stages(&blend, &sizes(&[("a", 7)]), 0).unwrap();
        let idx: Vec<usize> = m.entries.iter().map(|e| e.index).collect();
        assert_eq!(idx, (0..7).collect::<Vec<_>>());
        assert!(m
            .entries
            .iter()
            .all(|e| e.weight == 1.0 && e.dataset == "a"));
    }

    #[test]
    fn cumulative_stage_three_sees_everything() {
        let entry = |d: &str| BlendEntry {
            dataset: d.into(),
            weight: None,
        };
        let blend = StageBlend {
            stages: vec![
                Stage {
                    name: "s1".into(),
                    datasets: vec![entry("sft")],
                    examples: None,
                },
                Stage {
                    name: "s2".into(),
                    datasets: vec![entry("chat")],
                    examples: None,
                },
                Stage {
                    name: "s3".into(),
                    datasets: vec![entry("long")],
                    examples: None,
                },
            ],
            cumulative: true,
        };
        let m = blend_stages(
            &blend,
            &sizes(&[("sft", 50), ("chat", 30), ("long", 20)]),
            3,
        )
        .unwrap();
        let s3: std::collections::BTreeSet<&str> =
            m.stage("s3").map(|e| e.dataset.as_str()).collect();
        assert_eq!(s3.len(), 3);
        assert_eq!(m.stage("s3").count(), 100);
        let weights: Vec<f64> = ["sft", "chat", "long"]
            .iter()
            .map(|d| m.stage("s3").find(|e| e.dataset == *d).unwrap().weight)
            .collect();
        assert_eq!(weights, [0.5, 0.3, 0.2]);
        let mut blend = blend;
        blend.cumulative = false;
        let m = blend_stages(
            &blend,
            &sizes(&[("sft", 50), ("chat", 30), ("long", 20)]),
            3,
        )
        .unwrap();
        assert!(m.stage("s3").all(|e| e.dataset == "long"));
    }

    #[test]
    fn equal_weights_split_evenly() {
        let blend = StageBlend {
            stages: vec![Stage {
                name: "s".into(),
                datasets: vec![
                    BlendEntry {
                        dataset: "a".into(),
                        weight: Some(1.0),
                    },
                    BlendEntry {
                        dataset: "b".into(),
                        weight: Some(1.0),
                    },
                ],
                examples: None,
            }],
            cumulative: false,
        };
        let m = blend_stages(&blend, &sizes(&[("a", 5000), ("b", 5000)]), 11).unwrap();
        let a =
            m.entries.iter().filter(|e| e.dataset == "a").count() as f64 / m.entries.len() as f64;
        assert!((a - 0.5).abs() <= 0.02, "share {a}");
    }

    #[test]
    fn unknown_dataset_and_bad_weight() {
        let mut blend = StageBlend {
            stages: vec![Stage {
                name: "s".into(),
                datasets: vec![BlendEntry {
                    dataset: "zzz".into(),
                    weight: None,
                }],
                examples: None,
            }],
            cumulative: false,
        };
        assert!(matches!(
            blend_stages(&blend, &sizes(&[("a", 1)]), 0),
            Err(Error::Config(_))
        ));
        blend.stages[0].datasets[0] = BlendEntry {
            dataset: "a".into(),
            weight: Some(0.0),
        };
        assert!(blend_stages(&blend, &sizes(&[("a", 1)]), 0).is_err());
    }
}
