//! Text-generation metrics: exact match, token F1, ROUGE-1/2/L,
//! summary-level ROUGE-Lsum, the ROUGE geometric mean and multiple-choice
//! accuracy.
//!
//! QA metrics normalise with the usual lowercase / strip punctuation /
//! drop articles / collapse whitespace recipe. ROUGE lowercases and keeps
//! only alphanumeric tokens.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum MetricKind {
    F1,
    Em,
    #[serde(rename = "rougeLsum")]
    RougeLsum,
    RougeGeo,
    Mc,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::F1 => "f1",
            MetricKind::Em => "em",
            MetricKind::RougeLsum => "rougeLsum",
            MetricKind::RougeGeo => "rougeGeo",
            MetricKind::Mc => "mc",
        })
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f1" => Ok(MetricKind::F1),
            "em" => Ok(MetricKind::Em),
            "rougeLsum" => Ok(MetricKind::RougeLsum),
            "rougeGeo" => Ok(MetricKind::RougeGeo),
            "mc" => Ok(MetricKind::Mc),
            other => Err(Error::Argument(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub name: String,
    pub score: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl MetricResult {
    fn prf(name: &str, overlap: usize, pred_total: usize, ref_total: usize) -> Self {
        let (p, r, f) = f_measure(overlap, pred_total, ref_total);
        Self {
            name: name.to_string(),
            score: f,
            precision: Some(p),
            recall: Some(r),
        }
    }
}

fn f_measure(overlap: usize, pred_total: usize, ref_total: usize) -> (f64, f64, f64) {
    if pred_total == 0 || ref_total == 0 || overlap == 0 {
        let p = if pred_total == 0 {
            0.0
        } else {
            overlap as f64 / pred_total as f64
        };
        let r = if ref_total == 0 {
            0.0
        } else {
            overlap as f64 / ref_total as f64
        };
        return (p, r, 0.0);
    }
    let p = overlap as f64 / pred_total as f64;
    let r = overlap as f64 / ref_total as f64;
    (p, r, 2.0 * p * r / (p + r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationRule {
    pub lowercase: bool,
    pub strip_punctuation: bool,
    pub strip_articles: bool,
    pub collapse_whitespace: bool,
}

impl Default for NormalizationRule {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punctuation: true,
            strip_articles: true,
            collapse_whitespace: true,
        }
    }
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Applies `rule`. Punctuation is any character that is neither
/// alphanumeric nor whitespace.
pub fn normalize(text: &str, rule: &NormalizationRule) -> String {
    let step = |t: &str| {
        let mut out = if rule.lowercase {
            t.to_lowercase()
        } else {
            t.to_string()
        };
        if rule.strip_punctuation {
            out.retain(|c| c.is_alphanumeric() || c.is_whitespace());
        }
        out
    };
    // lowercasing can expand to combining marks, so iterate to a fixed point
    let mut s = step(text);
    for _ in 0..4 {
        let next = step(&s);
        if next == s {
            break;
        }
        s = next;
    }
    if rule.strip_articles {
        s = s
            .split(char::is_whitespace)
            .map(|w| if ARTICLES.contains(&w) { "" } else { w })
            .collect::<Vec<_>>()
            .join(" ");
    }
    if rule.collapse_whitespace {
        s = s.split_whitespace().collect::<Vec<_>>().join(" ");
    }
    s
}

pub fn exact_match(pred: &str, golds: &[String], rule: &NormalizationRule) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::Argument(
            "exact match needs at least one gold answer".into(),
        ));
    }
    let p = normalize(pred, rule);
    Ok(golds.iter().any(|g| normalize(g, rule) == p) as u8 as f64)
}

fn counts<T: std::hash::Hash + Eq>(items: impl IntoIterator<Item = T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for it in items {
        *m.entry(it).or_insert(0) += 1;
    }
    m
}

fn multiset_overlap<T: std::hash::Hash + Eq>(
    a: &HashMap<T, usize>,
    b: &HashMap<T, usize>,
) -> usize {
    a.iter()
        .map(|(k, &n)| n.min(b.get(k).copied().unwrap_or(0)))
        .sum()
}

/// Token-level F1 against a single gold answer.
pub fn f1_single(pred: &str, gold: &str, rule: &NormalizationRule, tokenizer: &Tokenizer) -> f64 {
    let p = normalize(pred, rule);
    let g = normalize(gold, rule);
    let pt: Vec<&str> = tokenizer.tokenize(&p).into_iter().map(|t| t.text).collect();
    let gt: Vec<&str> = tokenizer.tokenize(&g).into_iter().map(|t| t.text).collect();
    if pt.is_empty() && gt.is_empty() {
        return 1.0;
    }
    let overlap = multiset_overlap(&counts(pt.iter().copied()), &counts(gt.iter().copied()));
    f_measure(overlap, pt.len(), gt.len()).2
}

/// Best token F1 over all gold answers.
pub fn token_f1(
    pred: &str,
    golds: &[String],
    rule: &NormalizationRule,
    tokenizer: &Tokenizer,
) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::Argument(
            "token F1 needs at least one gold answer".into(),
        ));
    }
    Ok(golds
        .iter()
        .map(|g| f1_single(pred, g, rule, tokenizer))
        .fold(0.0, f64::max))
}

/// Lowercased alphanumeric tokens used by every ROUGE variant.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    Tokenizer::default_rule()
        .tokenize(&lower)
        .into_iter()
        .filter(|t| t.text.chars().all(char::is_alphanumeric))
        .map(|t| t.text.to_string())
        .collect()
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    if tokens.len() < n {
        return HashMap::new();
    }
    counts(tokens.windows(n))
}

/// ROUGE-N with clipped n-gram counts. Texts with no n-grams score 0.
pub fn rouge_n(pred: &str, reference: &str, n: usize) -> Result<MetricResult> {
    if n == 0 {
        return Err(Error::Argument("ROUGE-N needs n >= 1".into()));
    }
    let pt = rouge_tokens(pred);
    let rt = rouge_tokens(reference);
    let pg = ngrams(&pt, n);
    let rg = ngrams(&rt, n);
    let overlap = multiset_overlap(&pg, &rg);
    Ok(MetricResult::prf(
        &format!("rouge{n}"),
        overlap,
        pg.values().sum(),
        rg.values().sum(),
    ))
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn lcs_table<T: PartialEq>(a: &[T], b: &[T]) -> Vec<Vec<usize>> {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t
}

/// Indices into `reference` of one LCS with `candidate`.
fn lcs_indices<T: PartialEq>(reference: &[T], candidate: &[T]) -> Vec<usize> {
    let t = lcs_table(reference, candidate);
    let (mut i, mut j) = (reference.len(), candidate.len());
    let mut out = Vec::new();
    while i > 0 && j > 0 {
        if reference[i - 1] == candidate[j - 1] {
            out.push(i - 1);
            i -= 1;
            j -= 1;
        } else if t[i][j - 1] > t[i - 1][j] {
            j -= 1;
        } else {
            i -= 1;
        }
    }
    out.reverse();
    out
}

/// Sentence-level ROUGE-L. Precision is relative to the prediction and
/// recall to the reference.
pub fn rouge_l(pred: &str, reference: &str) -> MetricResult {
    let pt = rouge_tokens(pred);
    let rt = rouge_tokens(reference);
    MetricResult::prf("rougeL", lcs_len(&pt, &rt), pt.len(), rt.len())
}

/// Splits on newlines and on `.`, `!` or `?` followed by whitespace.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for line in text.split('\n') {
        let mut start = 0;
        let mut chars = line.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            if matches!(c, '.' | '!' | '?') {
                if let Some(&(_, next)) = chars.peek() {
                    if next.is_whitespace() {
                        out.push(&line[start..i + 1]);
                        start = i + 1;
                    }
                }
            }
        }
        out.push(&line[start..]);
    }
    out.into_iter()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Summary-level ROUGE-L over sentence-split texts using union LCS.
pub fn rouge_l_sum(pred: &str, reference: &str) -> MetricResult {
    let ref_sents: Vec<Vec<String>> = split_sentences(reference)
        .into_iter()
        .map(rouge_tokens)
        .collect();
    let pred_sents: Vec<Vec<String>> = split_sentences(pred)
        .into_iter()
        .map(rouge_tokens)
        .collect();
    let m: usize = ref_sents.iter().map(Vec::len).sum();
    let n: usize = pred_sents.iter().map(Vec::len).sum();
    if m == 0 || n == 0 {
        return MetricResult::prf("rougeLsum", 0, n, m);
    }
    let mut ref_left = counts(ref_sents.iter().flatten().map(String::as_str));
    let mut pred_left = counts(pred_sents.iter().flatten().map(String::as_str));
    let mut hits = 0;
    for r in &ref_sents {
        let union: BTreeSet<usize> = pred_sents.iter().flat_map(|c| lcs_indices(r, c)).collect();
        for idx in union {
            let tok = r[idx].as_str();
            let (Some(pc), Some(rc)) = (pred_left.get(tok).copied(), ref_left.get(tok).copied())
            else {
                continue;
            };
            if pc > 0 && rc > 0 {
                hits += 1;
                pred_left.insert(tok, pc - 1);
                ref_left.insert(tok, rc - 1);
            }
        }
    }
    MetricResult::prf("rougeLsum", hits, n, m)
}

/// Geometric mean of ROUGE-1, ROUGE-2 and ROUGE-L F-scores.
pub fn rouge_geo_mean(pred: &str, reference: &str) -> f64 {
    let r1 = rouge_n(pred, reference, 1).map(|r| r.score).unwrap_or(0.0);
    let r2 = rouge_n(pred, reference, 2).map(|r| r.score).unwrap_or(0.0);
    let rl = rouge_l(pred, reference).score;
    geometric_mean3(r1, r2, rl)
}

pub fn geometric_mean3(a: f64, b: f64, c: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 || c <= 0.0 {
        0.0
    } else {
        (a * b * c).cbrt()
    }
}

/// Letter label for choice `i`: `A`, `B`, ...
pub fn choice_label(i: usize) -> char {
    (b'A' + (i % 26) as u8) as char
}

fn predicted_label(pred: &str, n_choices: usize) -> Option<usize> {
    static PATTERNS: LazyLock<[Regex; 3]> = LazyLock::new(|| {
        [
            // the whole prediction is a label: "B", "(B)", "B."
            Regex::new(r"^\s*\(?([A-Z])\)?[.:)]?\s*$").expect("static regex"),
            // a leading label followed by text: "(B) London", "B. London"
            Regex::new(r"^\s*(?:\(([A-Z])\)|([A-Z])[.:)])").expect("static regex"),
            // "Answer: B", "the correct option is (C)"
            Regex::new(
                r"(?i:answer|option|choice)(?:\s+is)?\s*[:\-]?\s*\(?([A-Z])\)?(?:[^A-Za-z0-9]|$)",
            )
            .expect("static regex"),
        ]
    });
    let c = PATTERNS.iter().find_map(|re| {
        let caps = re.captures(pred)?;
        caps.iter()
            .skip(1)
            .flatten()
            .next()
            .map(|m| m.as_str().as_bytes()[0])
    })?;
    let idx = (c - b'A') as usize;
    (idx < n_choices).then_some(idx)
}

/// Multiple-choice accuracy.
///
/// A leading letter label (`B`, `(B)`, `B.`, `Answer: B`) selects that
/// choice. Otherwise the prediction selects a choice when that choice's
/// normalised text occurs in it and no other choice's text does (choices
/// contained in a longer matched choice are ignored).
pub fn mc_accuracy(pred: &str, correct: usize, choices: &[String]) -> Result<f64> {
    if choices.is_empty() {
        return Err(Error::Argument("multiple choice needs choices".into()));
    }
    if correct >= choices.len() {
        return Err(Error::Argument(format!(
            "correct choice {correct} not among {} choices",
            choices.len()
        )));
    }
    if let Some(idx) = predicted_label(pred, choices.len()) {
        return Ok((idx == correct) as u8 as f64);
    }
    let rule = NormalizationRule::default();
    let padded = format!(" {} ", normalize(pred, &rule));
    let texts: Vec<String> = choices.iter().map(|c| normalize(c, &rule)).collect();
    let matched: Vec<usize> = texts
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.is_empty() && padded.contains(&format!(" {t} ")))
        .map(|(i, _)| i)
        .collect();
    let maximal: Vec<usize> = matched
        .iter()
        .copied()
        .filter(|&i| {
            !matched.iter().any(|&j| {
                j != i
                    && texts[j] != texts[i]
                    && format!(" {} ", texts[j]).contains(&format!(" {} ", texts[i]))
            })
        })
        .collect();
    Ok((maximal == [correct]) as u8 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn exact_match_examples() {
        let r = NormalizationRule::default();
        assert_eq!(
            exact_match("The Answer!", &g(&["answer"]), &r).unwrap(),
            1.0
        );
        assert_eq!(exact_match("x", &g(&["x"]), &r).unwrap(), 1.0);
        assert_eq!(exact_match("cat", &g(&["dog"]), &r).unwrap(), 0.0);
        assert_eq!(exact_match("cat", &g(&["dog", "Cat."]), &r).unwrap(), 1.0);
        assert!(matches!(
            exact_match("cat", &[], &r),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn f1_examples() {
        let r = NormalizationRule::default();
        let t = Tokenizer::default_rule();
        let keep_articles = NormalizationRule {
            strip_articles: false,
            ..r
        };
        assert!(close(
            token_f1("a b c", &g(&["b c d"]), &keep_articles, &t).unwrap(),
            2.0 / 3.0
        ));
        // "a" is an article under the default rule: P = 1, R = 2/3
        assert!(close(
            token_f1("a b c", &g(&["b c d"]), &r, &t).unwrap(),
            0.8
        ));
        assert_eq!(token_f1("red fox", &g(&["red fox"]), &r, &t).unwrap(), 1.0);
        assert_eq!(token_f1("red fox", &g(&["blue cat"]), &r, &t).unwrap(), 0.0);
        assert_eq!(token_f1("", &g(&[""]), &r, &t).unwrap(), 1.0);
        assert_eq!(token_f1("", &g(&["x"]), &r, &t).unwrap(), 0.0);
        assert!(token_f1("x", &[], &r, &t).is_err());
    }

    #[test]
    fn rouge_n_examples() {
        let r = rouge_n("a b", "a c", 1).unwrap();
        assert_eq!(
            (r.precision, r.recall, r.score),
            (Some(0.5), Some(0.5), 0.5)
        );
        assert_eq!(rouge_n("x y z", "x y z", 2).unwrap().score, 1.0);
        assert_eq!(rouge_n("x", "x", 2).unwrap().score, 0.0);
        assert!(rouge_n("x", "x", 0).is_err());
    }

    #[test]
    fn rouge_l_example() {
        let r = rouge_l("the cat sat", "the cat");
        assert!(close(r.score, 0.8));
        assert!(close(r.precision.unwrap(), 2.0 / 3.0));
        assert!(close(r.recall.unwrap(), 1.0));
        assert_eq!(rouge_l("alpha beta", "alpha beta").score, 1.0);
        assert_eq!(rouge_l_sum("alpha beta", "alpha beta").score, 1.0);
        // reversed distinct tokens share a single-token LCS
        let rev = rouge_l("d c b a", "a b c d");
        assert!(close(rev.score, 0.25));
    }

    #[test]
    fn rouge_lsum_union_lcs() {
        // worked example: ref "w1 w2 w3 w4 w5", candidates "w1 w2 w6 w7 w8" and "w1 w3 w8 w9 w5"
        // union LCS = w1 w2 w3 w5 => 4 hits over 5 reference and 10 candidate tokens
        let r = rouge_l_sum("w1 w2 w6 w7 w8\nw1 w3 w8 w9 w5", "w1 w2 w3 w4 w5");
        assert!(close(r.recall.unwrap(), 0.8));
        assert!(close(r.precision.unwrap(), 0.4));
        assert_eq!(rouge_l_sum("", "x").score, 0.0);
    }

    #[test]
    fn sentence_splitting() {
        assert_eq!(
            split_sentences("One. Two! Three?\nFour 3.5 five"),
            ["One.", "Two!", "Three?", "Four 3.5 five"]
        );
    }

    #[test]
    fn geometric_mean_examples() {
        assert_eq!(rouge_geo_mean("the cat sat down", "the cat sat down"), 1.0);
        assert_eq!(geometric_mean3(0.5, 0.0, 1.0), 0.0);
        assert!((geometric_mean3(0.5, 0.2, 0.4) - 0.341_995_189_335_339_4).abs() < 1e-12);
    }

    #[test]
    fn multiple_choice_examples() {
        let choices = g(&["Paris", "London", "Rome", "Berlin"]);
        assert_eq!(mc_accuracy("B", 1, &choices).unwrap(), 1.0);
        assert_eq!(mc_accuracy("(B) London", 1, &choices).unwrap(), 1.0);
        assert_eq!(mc_accuracy("Answer: C", 1, &choices).unwrap(), 0.0);
        assert_eq!(
            mc_accuracy("I think it is London.", 1, &choices).unwrap(),
            1.0
        );
        assert_eq!(mc_accuracy("London or Paris", 1, &choices).unwrap(), 0.0);
        assert_eq!(mc_accuracy("no idea", 1, &choices).unwrap(), 0.0);
        assert!(mc_accuracy("B", 4, &choices).is_err());
        assert!(mc_accuracy("B", 0, &[]).is_err());
        let nested = g(&["New York", "York", "Boston", "Austin"]);
        assert_eq!(mc_accuracy("It was New York.", 0, &nested).unwrap(), 1.0);
        // an article is not a label
        let animals = g(&["dog", "bird", "cat", "fish"]);
        assert_eq!(mc_accuracy("A cat, clearly.", 2, &animals).unwrap(), 1.0);
        assert_eq!(
            mc_accuracy("The correct option is (C).", 2, &animals).unwrap(),
            1.0
        );
    }

    #[test]
    fn metric_names_round_trip() {
        for m in [
            MetricKind::F1,
            MetricKind::Em,
            MetricKind::RougeLsum,
            MetricKind::RougeGeo,
            MetricKind::Mc,
        ] {
            assert_eq!(m.to_string().parse::<MetricKind>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{m}\""));
        }
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in "\\PC{0,40}") {
            let r = NormalizationRule::default();
            let once = normalize(&s, &r);
            prop_assert_eq!(normalize(&once, &r), once);
        }

        #[test]
        fn f1_is_symmetric_and_bounded(a in "[a-d ]{0,20}", b in "[a-d ]{0,20}") {
            let r = NormalizationRule::default();
            let t = Tokenizer::default_rule();
            let ab = f1_single(&a, &b, &r, &t);
            let ba = f1_single(&b, &a, &r, &t);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn rouge_scores_are_harmonic_means(a in "[a-e ]{0,30}", b in "[a-e .\n]{0,30}") {
            for m in [rouge_n(&a, &b, 1).unwrap(), rouge_n(&a, &b, 2).unwrap(), rouge_l(&a, &b), rouge_l_sum(&a, &b)] {
                let (p, r) = (m.precision.unwrap(), m.recall.unwrap());
                prop_assert!((0.0..=1.0).contains(&m.score));
                let hm = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
                prop_assert!((m.score - hm).abs() < 1e-12);
            }
        }
    }
}
