//! Needle-in-a-haystack grids.
//!
//! A haystack is filler text cut to an exact token length with one needle
//! sentence spliced in at the sentence boundary nearest the requested
//! depth. Grids sweep context length × depth and record a 0/1 score per
//! cell.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{answer_task, Harness, RunConfig};
use crate::error::{Error, Result};
use crate::gateway::PromptMode;
use crate::metrics::{normalize, split_sentences, MetricKind, NormalizationRule};
use crate::task::{EvalTask, TaskType};
use crate::tokenize::{slice_spans, Tokenizer};

pub const SANDWICH_NEEDLE: &str =
    "The best thing to do in San Francisco is eat a sandwich and sit in Dolores Park on a sunny day.";
pub const SANDWICH_QUESTION: &str = "What is the best thing to do in San Francisco?";
pub const SANDWICH_ANSWER: &str = "eat a sandwich and sit in Dolores Park";

pub const PASSKEY_NEEDLE: &str = "The pass key is 385243. Remember it. 385243 is the pass key.";
pub const PASSKEY_QUESTION: &str = "What is the pass key?";
pub const PASSKEY_ANSWER: &str = "385243";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NiahVariant {
    Sandwich,
    Passkey,
}

impl NiahVariant {
    pub fn needle(self) -> (&'static str, &'static str, &'static str) {
        match self {
            NiahVariant::Sandwich => (SANDWICH_NEEDLE, SANDWICH_QUESTION, SANDWICH_ANSWER),
            NiahVariant::Passkey => (PASSKEY_NEEDLE, PASSKEY_QUESTION, PASSKEY_ANSWER),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahCase {
    pub context_len_tokens: usize,
    pub depth: f64,
    pub needle: String,
    pub question: String,
    pub expected_answer: String,
}

impl NiahCase {
    pub fn id(&self) -> String {
        format!("niah-{}-{:.4}", self.context_len_tokens, self.depth)
    }
}

pub fn make_standard_cases(
    variant: NiahVariant,
    lengths: &[usize],
    depths: &[f64],
) -> Result<Vec<NiahCase>> {
    if lengths.is_empty() || depths.is_empty() {
        return Err(Error::Argument(
            "NIAH grid needs at least one length and one depth".into(),
        ));
    }
    if let Some(d) = depths.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::Argument(format!("depth {d} outside [0, 1]")));
    }
    let (needle, question, answer) = variant.needle();
    Ok(lengths
        .iter()
        .flat_map(|&len| {
            depths.iter().map(move |&depth| NiahCase {
                context_len_tokens: len,
                depth,
                needle: needle.to_string(),
                question: question.to_string(),
                expected_answer: answer.to_string(),
            })
        })
        .collect())
}

/// `n_lengths` log-spaced lengths from 1024 up to `max_len` and
/// `n_depths` evenly spaced depths in `[0, 1]`.
pub fn default_grid(max_len: usize, n_lengths: usize, n_depths: usize) -> (Vec<usize>, Vec<f64>) {
    let min_len = 1024usize.min(max_len);
    let mut lengths: Vec<usize> = if n_lengths <= 1 || min_len == max_len {
        vec![max_len]
    } else {
        let (lo, hi) = ((min_len as f64).ln(), (max_len as f64).ln());
        (0..n_lengths)
            .map(|i| {
                (lo + (hi - lo) * i as f64 / (n_lengths - 1) as f64)
                    .exp()
                    .round() as usize
            })
            .collect()
    };
    lengths.dedup();
    let depths = if n_depths <= 1 {
        vec![0.5]
    } else {
        (0..n_depths)
            .map(|i| i as f64 / (n_depths - 1) as f64)
            .collect()
    };
    (lengths, depths)
}

const FILLER_SUBJECTS: [&str; 12] = [
    "The river",
    "A quiet town",
    "The old library",
    "Every spring",
    "The harbor",
    "Our neighbor",
    "The mountain road",
    "A small bakery",
    "The museum",
    "Most farmers",
    "The night train",
    "An early frost",
];
const FILLER_VERBS: [&str; 10] = [
    "changed",
    "shaped",
    "followed",
    "welcomed",
    "outlasted",
    "surprised",
    "described",
    "crossed",
    "remembered",
    "ignored",
];
const FILLER_OBJECTS: [&str; 12] = [
    "the valley",
    "many visitors",
    "the western hills",
    "a long winter",
    "the local market",
    "several old maps",
    "the county fair",
    "a narrow bridge",
    "the morning fog",
    "the stone walls",
    "a busy season",
    "the quiet fields",
];
const FILLER_TAILS: [&str; 8] = [
    "for many years",
    "without much notice",
    "in the late afternoon",
    "as the records show",
    "before the harvest",
    "during the long rains",
    "after the festival",
    "on most weekdays",
];

/// Deterministic essay-like filler of at least `min_tokens` tokens.
pub fn synthetic_filler(min_tokens: usize, seed: u64, tokenizer: &Tokenizer) -> String {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    let mut tokens = 0;
    while tokens < min_tokens {
        let sentence = format!(
            "{} {} {} {}.",
            FILLER_SUBJECTS[rng.random_range(0..FILLER_SUBJECTS.len())],
            FILLER_VERBS[rng.random_range(0..FILLER_VERBS.len())],
            FILLER_OBJECTS[rng.random_range(0..FILLER_OBJECTS.len())],
            FILLER_TAILS[rng.random_range(0..FILLER_TAILS.len())],
        );
        tokens += tokenizer.count(&sentence);
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&sentence);
    }
    out
}

/// Filler sentences with anything resembling the needle removed.
pub fn prepare_filler<'a>(filler: impl IntoIterator<Item = &'a str>, case: &NiahCase) -> String {
    let answer = case.expected_answer.to_lowercase();
    let needle = case.needle.to_lowercase();
    let mut out = String::new();
    for text in filler {
        for sentence in split_sentences(text) {
            let lower = sentence.to_lowercase();
            if (!answer.is_empty() && lower.contains(&answer)) || lower.contains(&needle) {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(sentence);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Haystack {
    pub text: String,
    /// Token offset of the needle's first token.
    pub needle_offset: usize,
    pub needle_tokens: usize,
    pub total_tokens: usize,
}

impl Haystack {
    pub fn needle_range(&self) -> (usize, usize) {
        (self.needle_offset, self.needle_offset + self.needle_tokens)
    }
}

fn is_sentence_end(tok: &str) -> bool {
    matches!(tok, "." | "!" | "?")
}

/// Builds the haystack for `case` from prepared filler text.
pub fn build_haystack(filler: &str, case: &NiahCase, tokenizer: &Tokenizer) -> Result<Haystack> {
    if !(0.0..=1.0).contains(&case.depth) {
        return Err(Error::Argument(format!(
            "depth {} outside [0, 1]",
            case.depth
        )));
    }
    let needle_tokens = tokenizer.count(&case.needle);
    if needle_tokens == 0 || needle_tokens >= case.context_len_tokens {
        return Err(Error::Argument(format!(
            "needle has {needle_tokens} tokens; context length is {}",
            case.context_len_tokens
        )));
    }
    let filler_len = case.context_len_tokens - needle_tokens;
    let spans = tokenizer.spans(filler);
    if spans.len() < filler_len {
        return Err(Error::Data(format!(
            "filler provides {} tokens, {filler_len} needed",
            spans.len()
        )));
    }
    let filler = slice_spans(filler, &spans, 0, filler_len)?;
    let spans = &spans[..filler_len];
    let target = (case.depth * filler_len as f64).round() as usize;
    let boundary = std::iter::once(0)
        .chain((1..filler_len).filter(|&i| is_sentence_end(&filler[spans[i - 1].clone()])))
        .chain(std::iter::once(filler_len))
        .min_by_key(|&b| (b.abs_diff(target), b))
        .expect("boundary set is non-empty");
    let text = if boundary == 0 {
        format!("{} {filler}", case.needle)
    } else if boundary == filler_len {
        format!("{filler} {}", case.needle)
    } else {
        let at = spans[boundary].start;
        format!(
            "{} {} {}",
            filler[..at].trim_end(),
            case.needle,
            &filler[at..]
        )
    };
    if text.matches(case.needle.as_str()).count() != 1 {
        return Err(Error::Data(
            "needle occurs more than once in the haystack".into(),
        ));
    }
    Ok(Haystack {
        total_tokens: filler_len + needle_tokens,
        text,
        needle_offset: boundary,
        needle_tokens,
    })
}

/// 1 when the normalised expected answer occurs in the normalised response.
pub fn score_case(response: &str, case: &NiahCase, rule: &NormalizationRule) -> f64 {
    let resp = normalize(response, rule);
    let expected = normalize(&case.expected_answer, rule);
    if resp.is_empty() {
        return 0.0;
    }
    (format!(" {resp} ").contains(&format!(" {expected} "))) as u8 as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahCell {
    pub context_len_tokens: usize,
    pub depth: f64,
    /// `None` when the request failed.
    pub score: Option<f64>,
    pub response: Option<String>,
    pub needle_range: (usize, usize),
    pub dropped_range: Option<(usize, usize)>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahGrid {
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    /// `scores[length_idx][depth_idx]`.
    pub scores: Vec<Vec<Option<f64>>>,
}

impl NiahGrid {
    pub fn mean(&self) -> Option<f64> {
        let vals: Vec<f64> = self.scores.iter().flatten().flatten().copied().collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["length", "depth", "score"])?;
        for (li, len) in self.lengths.iter().enumerate() {
            for (di, depth) in self.depths.iter().enumerate() {
                let score = self.scores[li][di].map_or(String::new(), |s| format!("{s}"));
                w.write_record([len.to_string(), format!("{depth:.4}"), score])?;
            }
        }
        Ok(
            String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?)
                .expect("csv is utf-8"),
        )
    }

    /// Standalone SVG heatmap: depth on the y axis, length on the x axis.
    pub fn to_svg(&self, title: &str) -> String {
        let (cell_w, cell_h, left, top) = (56.0, 26.0, 70.0, 40.0);
        let width = left + cell_w * self.lengths.len() as f64 + 20.0;
        let height = top + cell_h * self.depths.len() as f64 + 50.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{left}" y="20" font-size="14">{}</text>"#,
            xml_escape(title)
        );
        for (di, depth) in self.depths.iter().enumerate() {
            let y = top + cell_h * di as f64;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{:.0}%</text>"#,
                left - 6.0,
                y + cell_h * 0.65,
                depth * 100.0
            );
            for (li, _) in self.lengths.iter().enumerate() {
                let x = left + cell_w * li as f64;
                let fill = match self.scores[li][di] {
                    Some(v) => heat_color(v),
                    None => "#bbbbbb".to_string(),
                };
                let _ = writeln!(
                    s,
                    r#"<rect x="{x}" y="{y}" width="{cell_w}" height="{cell_h}" fill="{fill}" stroke="white"/>"#
                );
            }
        }
        let label_y = top + cell_h * self.depths.len() as f64 + 16.0;
        for (li, len) in self.lengths.iter().enumerate() {
            let x = left + cell_w * (li as f64 + 0.5);
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{label_y}" text-anchor="middle">{}</text>"#,
                short_len(*len)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">context length (tokens)</text>"#,
            left + cell_w * self.lengths.len() as f64 / 2.0,
            label_y + 20.0
        );
        s.push_str("</svg>\n");
        s
    }
}

fn short_len(n: usize) -> String {
    if n >= 1024 && n.is_multiple_of(1024) {
        format!("{}K", n / 1024)
    } else {
        n.to_string()
    }
}

fn heat_color(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let r = (220.0 * (1.0 - v) + 40.0 * v) as u8;
    let g = (60.0 * (1.0 - v) + 170.0 * v) as u8;
    let b = (60.0 * (1.0 - v) + 90.0 * v) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

pub(crate) fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahRun {
    pub grid: NiahGrid,
    pub cells: Vec<NiahCell>,
}

/// Evaluates every case; cells are independent and run with the
/// configured parallelism. Transport failures leave the cell empty.
pub fn run_grid(
    cases: &[NiahCase],
    filler: &[String],
    cfg: &RunConfig,
    mode: PromptMode,
    harness: &Harness,
) -> Result<NiahRun> {
    if cases.is_empty() {
        return Err(Error::Argument("no NIAH cases".into()));
    }
    let cfg = RunConfig {
        mode,
        ..cfg.clone()
    };
    cfg.validate()?;
    let rule = NormalizationRule::default();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let cells: Vec<Result<NiahCell>> = pool.install(|| {
        cases
            .par_iter()
            .map(|case| {
                let prepared = prepare_filler(filler.iter().map(String::as_str), case);
                let hay = build_haystack(&prepared, case, &harness.tokenizer)?;
                let task = EvalTask {
                    id: case.id(),
                    dataset: "niah".into(),
                    document: hay.text.clone(),
                    question: Some(case.question.clone()),
                    answers: vec![case.expected_answer.clone()],
                    choices: None,
                    correct_choice: None,
                    task_type: TaskType::Qa,
                    metric: MetricKind::Em,
                };
                let mut cell = NiahCell {
                    context_len_tokens: case.context_len_tokens,
                    depth: case.depth,
                    score: None,
                    response: None,
                    needle_range: hay.needle_range(),
                    dropped_range: None,
                    error: None,
                };
                match answer_task(&task, &cfg, harness) {
                    Ok(ans) => {
                        cell.score = Some(score_case(&ans.response, case, &rule));
                        cell.dropped_range = ans.dropped_range;
                        cell.response = Some(ans.response);
                    }
                    Err(
                        e @ (Error::Transport { .. } | Error::Protocol(_) | Error::Overflow { .. }),
                    ) => {
                        log::warn!("NIAH cell {} failed: {e}", case.id());
                        cell.error = Some(e.to_string());
                    }
                    Err(e) => return Err(e),
                }
                Ok(cell)
            })
            .collect()
    });
    let cells = cells.into_iter().collect::<Result<Vec<_>>>()?;

    let mut lengths: Vec<usize> = cases.iter().map(|c| c.context_len_tokens).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let mut depths: Vec<f64> = cases.iter().map(|c| c.depth).collect();
    depths.sort_by(f64::total_cmp);
    depths.dedup();
    let mut scores = vec![vec![None; depths.len()]; lengths.len()];
    for cell in &cells {
        let li = lengths
            .binary_search(&cell.context_len_tokens)
            .expect("length indexed");
        let di = depths
            .binary_search_by(|d| d.total_cmp(&cell.depth))
            .expect("depth indexed");
        scores[li][di] = cell.score;
    }
    Ok(NiahRun {
        grid: NiahGrid {
            lengths,
            depths,
            scores,
        },
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filler(n_sentences: usize) -> String {
        (0..n_sentences)
            .map(|i| format!("Sentence number {i} talks about rivers and hills."))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn case(len: usize, depth: f64) -> NiahCase {
        make_standard_cases(NiahVariant::Passkey, &[len], &[depth])
            .unwrap()
            .remove(0)
    }

    #[test]
    fn standard_needles() {
        let cases =
            make_standard_cases(NiahVariant::Passkey, &[1000, 2000], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(cases.len(), 6);
        assert_eq!(cases[0].expected_answer, "385243");
        assert_eq!(cases[0].question, "What is the pass key?");
        let s = make_standard_cases(NiahVariant::Sandwich, &[1000], &[0.5]).unwrap();
        assert_eq!(s[0].needle, SANDWICH_NEEDLE);
        assert_eq!(
            s[0].expected_answer,
            "eat a sandwich and sit in Dolores Park"
        );
        assert!(make_standard_cases(NiahVariant::Passkey, &[], &[0.5]).is_err());
        assert!(make_standard_cases(NiahVariant::Passkey, &[10], &[1.5]).is_err());
    }

    #[test]
    fn depth_extremes() {
        let tok = Tokenizer::default_rule();
        let f = filler(100);
        let start = build_haystack(&f, &case(300, 0.0), &tok).unwrap();
        assert!(start.text.starts_with(PASSKEY_NEEDLE));
        assert_eq!(start.needle_offset, 0);
        let end = build_haystack(&f, &case(300, 1.0), &tok).unwrap();
        assert!(end.text.ends_with(PASSKEY_NEEDLE));
    }

    #[test]
    fn haystack_has_exact_length_and_one_needle() {
        let tok = Tokenizer::default_rule();
        let f = filler(400);
        for len in [200, 333, 1000] {
            for depth in [0.0, 0.1, 0.37, 0.5, 0.9, 1.0] {
                let h = build_haystack(&f, &case(len, depth), &tok).unwrap();
                assert_eq!(tok.count(&h.text), len);
                assert_eq!(h.text.matches(PASSKEY_NEEDLE).count(), 1);
                let (a, b) = h.needle_range();
                assert_eq!(tok.slice(&h.text, a, b).unwrap(), PASSKEY_NEEDLE);
            }
        }
    }

    #[test]
    fn insufficient_filler_is_a_data_error() {
        let tok = Tokenizer::default_rule();
        assert!(matches!(
            build_haystack(&filler(2), &case(500, 0.5), &tok),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            build_haystack(&filler(2), &case(5, 0.5), &tok),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn filler_is_scrubbed_of_the_answer() {
        let c = case(100, 0.5);
        let dirty = "Rivers are long. My code is 385243 today. Hills are high.";
        assert_eq!(
            prepare_filler([dirty], &c),
            "Rivers are long. Hills are high."
        );
    }

    #[test]
    fn synthetic_filler_is_long_enough_and_stable() {
        let tok = Tokenizer::default_rule();
        let a = synthetic_filler(5000, 3, &tok);
        assert!(tok.count(&a) >= 5000);
        assert_eq!(a, synthetic_filler(5000, 3, &tok));
        let h = build_haystack(&a, &case(4096, 0.42), &tok).unwrap();
        assert_eq!(tok.count(&h.text), 4096);
    }

    #[test]
    fn scoring() {
        let rule = NormalizationRule::default();
        let c = case(100, 0.5);
        assert_eq!(score_case(PASSKEY_NEEDLE, &c, &rule), 1.0);
        assert_eq!(score_case("", &c, &rule), 0.0);
        assert_eq!(score_case("the key is 385243.", &c, &rule), 1.0);
        assert_eq!(score_case("3852430", &c, &rule), 0.0);
    }

    #[test]
    fn default_grid_shape() {
        let (lengths, depths) = default_grid(131_072, 8, 10);
        assert_eq!(lengths.first(), Some(&1024));
        assert_eq!(lengths.last(), Some(&131_072));
        assert_eq!(depths.len(), 10);
        assert_eq!((depths[0], depths[9]), (0.0, 1.0));
    }

    #[test]
    fn grid_csv_rows() {
        let grid = NiahGrid {
            lengths: vec![1024, 2048],
            depths: vec![0.0, 1.0],
            scores: vec![vec![Some(1.0), None], vec![Some(0.0), Some(1.0)]],
        };
        let csv = grid.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.contains("1024,1.0000,\n"));
        assert!(grid.to_svg("t").contains("<rect"));
    }
}
