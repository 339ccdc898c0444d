//! Deterministic tokenization.
//!
//! Every token-denominated quantity in the toolkit (chunk sizes, packing
//! lengths, window budgets) is measured with a [`Tokenizer`]. The default
//! rule needs no model files:
//!
//! * whitespace separates tokens and is never emitted,
//! * each maximal run of letters/digits is one token,
//! * every other character is a token on its own.
//!
//! An external vocabulary can be plugged in instead. It refines each
//! default-rule token by greedy longest-match against the vocabulary, which
//! also yields token ids for flat dumps.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One token of a source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token<'a> {
    pub text: &'a str,
    pub byte_span: Range<usize>,
}

/// Which tokenizer to use.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TokenizerSpec {
    #[default]
    DefaultRule,
    /// Newline-delimited UTF-8 token strings; line number is the token id.
    ExternalVocab { path: PathBuf },
}

impl fmt::Display for TokenizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenizerSpec::DefaultRule => f.write_str("default-rule"),
            TokenizerSpec::ExternalVocab { path } => write!(f, "external-vocab:{}", path.display()),
        }
    }
}

#[derive(Debug, Clone)]
struct Vocab {
    ids: HashMap<String, u32>,
    max_piece_bytes: usize,
    len: u32,
}

impl Vocab {
    fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Config(format!("cannot read vocabulary {}: {e}", path.display()))
        })?;
        let text = String::from_utf8(bytes).map_err(|_| {
            Error::Config(format!("vocabulary {} is not valid UTF-8", path.display()))
        })?;
        let mut ids = HashMap::new();
        let mut max_piece_bytes = 0;
        let mut len = 0u32;
        for line in text.lines() {
            let piece = line.strip_suffix('\r').unwrap_or(line);
            if !piece.is_empty() && !piece.chars().any(char::is_whitespace) {
                max_piece_bytes = max_piece_bytes.max(piece.len());
                ids.entry(piece.to_string()).or_insert(len);
            }
            len += 1;
        }
        if ids.is_empty() {
            return Err(Error::Config(format!(
                "vocabulary {} contains no usable entries",
                path.display()
            )));
        }
        Ok(Self {
            ids,
            max_piece_bytes,
            len,
        })
    }

    /// Greedy longest-match split of `word`; unmatched characters become
    /// single-character pieces.
    fn split(&self, word: &str, base: usize, out: &mut Vec<Range<usize>>) {
        let mut pos = 0;
        while pos < word.len() {
            let rest = &word[pos..];
            let mut take = rest.chars().next().map_or(0, char::len_utf8);
            let limit = rest.len().min(self.max_piece_bytes);
            for end in (take + 1..=limit).rev() {
                if rest.is_char_boundary(end) && self.ids.contains_key(&rest[..end]) {
                    take = end;
                    break;
                }
            }
            out.push(base + pos..base + pos + take);
            pos += take;
        }
    }

    fn id(&self, piece: &str) -> u32 {
        self.ids.get(piece).copied().unwrap_or(self.len)
    }
}

/// Spans produced by the default rule.
struct RuleSpans<'a> {
    text: &'a str,
    pos: usize,
}

impl Iterator for RuleSpans<'_> {
    type Item = Range<usize>;

    fn next(&mut self) -> Option<Range<usize>> {
        let rest = &self.text[self.pos..];
        let mut chars = rest.char_indices();
        let (start, first) = loop {
            let (i, c) = chars.next()?;
            if !c.is_whitespace() {
                break (i, c);
            }
        };
        let mut end = start + first.len_utf8();
        if first.is_alphanumeric() {
            for (i, c) in chars {
                if !c.is_alphanumeric() {
                    break;
                }
                end = i + c.len_utf8();
            }
        }
        let span = self.pos + start..self.pos + end;
        self.pos += end;
        Some(span)
    }
}

/// A loaded tokenizer.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    spec: TokenizerSpec,
    vocab: Option<Vocab>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::default_rule()
    }
}

impl Tokenizer {
    pub fn new(spec: &TokenizerSpec) -> Result<Self> {
        let vocab = match spec {
            TokenizerSpec::DefaultRule => None,
            TokenizerSpec::ExternalVocab { path } => Some(Vocab::load(path)?),
        };
        Ok(Self {
            spec: spec.clone(),
            vocab,
        })
    }

    pub fn default_rule() -> Self {
        Self {
            spec: TokenizerSpec::DefaultRule,
            vocab: None,
        }
    }

    pub fn spec(&self) -> &TokenizerSpec {
        &self.spec
    }

    pub fn has_vocab(&self) -> bool {
        self.vocab.is_some()
    }

    /// Byte spans of every token, in order.
    pub fn spans(&self, text: &str) -> Vec<Range<usize>> {
        let rule = RuleSpans { text, pos: 0 };
        match &self.vocab {
            None => rule.collect(),
            Some(vocab) => {
                let mut out = Vec::new();
                for span in rule {
                    vocab.split(&text[span.clone()], span.start, &mut out);
                }
                out
            }
        }
    }

    pub fn tokenize<'a>(&self, text: &'a str) -> Vec<Token<'a>> {
        self.spans(text)
            .into_iter()
            .map(|span| Token {
                text: &text[span.clone()],
                byte_span: span,
            })
            .collect()
    }

    pub fn count(&self, text: &str) -> usize {
        let rule = RuleSpans { text, pos: 0 };
        match &self.vocab {
            None => rule.count(),
            Some(vocab) => {
                let mut buf = Vec::new();
                rule.map(|span| {
                    buf.clear();
                    vocab.split(&text[span.clone()], span.start, &mut buf);
                    buf.len()
                })
                .sum()
            }
        }
    }

    /// Substring covering tokens `[start, end)`.
    pub fn slice<'a>(&self, text: &'a str, start: usize, end: usize) -> Result<&'a str> {
        let spans = self.spans(text);
        slice_spans(text, &spans, start, end)
    }

    /// Token ids under the external vocabulary; `None` for the default rule.
    /// Pieces missing from the vocabulary map to id `vocab_len`.
    pub fn token_ids(&self, text: &str) -> Option<Vec<u32>> {
        let vocab = self.vocab.as_ref()?;
        Some(
            self.spans(text)
                .into_iter()
                .map(|span| vocab.id(&text[span]))
                .collect(),
        )
    }

    /// Id of a single vocabulary entry (special tokens such as `<s>`).
    pub fn piece_id(&self, piece: &str) -> Option<u32> {
        self.vocab.as_ref().map(|v| v.id(piece))
    }
}

/// Slice `text` by precomputed token spans.
pub fn slice_spans<'a>(
    text: &'a str,
    spans: &[Range<usize>],
    start: usize,
    end: usize,
) -> Result<&'a str> {
    if start > end || end > spans.len() {
        return Err(Error::Argument(format!(
            "token range {start}..{end} out of bounds for {} tokens",
            spans.len()
        )));
    }
    if start == end {
        return Ok("");
    }
    Ok(&text[spans[start].start..spans[end - 1].end])
}

pub fn tokenize<'a>(text: &'a str, spec: &TokenizerSpec) -> Result<Vec<Token<'a>>> {
    Ok(Tokenizer::new(spec)?.tokenize(text))
}

pub fn count_tokens(text: &str, spec: &TokenizerSpec) -> Result<usize> {
    Ok(Tokenizer::new(spec)?.count(text))
}

pub fn slice_by_tokens<'a>(
    text: &'a str,
    spec: &TokenizerSpec,
    start_token: usize,
    end_token: usize,
) -> Result<&'a str> {
    Tokenizer::new(spec)?.slice(text, start_token, end_token)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn texts(text: &str) -> Vec<&str> {
        Tokenizer::default_rule()
            .tokenize(text)
            .into_iter()
            .map(|t| t.text)
            .collect()
    }

    #[test]
    fn empty_text_has_no_tokens() {
        assert!(texts("").is_empty());
        assert_eq!(Tokenizer::default_rule().count(""), 0);
        assert!(texts(" \n\t ").is_empty());
    }

    #[test]
    fn default_rule_examples() {
        assert_eq!(texts("Hello, world"), ["Hello", ",", "world"]);
        assert_eq!(texts("pass key is 385243").len(), 4);
        assert_eq!(Tokenizer::default_rule().count("a b c"), 3);
        assert_eq!(texts("<s>"), ["<", "s", ">"]);
        assert_eq!(texts("naïve café—ok"), ["naïve", "café", "—", "ok"]);
    }

    #[test]
    fn slicing_examples() {
        let tok = Tokenizer::default_rule();
        assert_eq!(tok.slice("a b c", 0, 3).unwrap(), "a b c");
        assert_eq!(tok.slice("a b c", 1, 2).unwrap(), "b");
        assert_eq!(tok.slice("a b c", 2, 2).unwrap(), "");
        assert_eq!(tok.slice("  a b c \n", 0, 3).unwrap(), "a b c");
    }

    #[test]
    fn slicing_out_of_range_is_an_argument_error() {
        let tok = Tokenizer::default_rule();
        assert!(matches!(tok.slice("a b c", 0, 4), Err(Error::Argument(_))));
        assert!(matches!(tok.slice("a b c", 2, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn missing_vocab_is_a_configuration_error() {
        let spec = TokenizerSpec::ExternalVocab {
            path: "/nonexistent/vocab.txt".into(),
        };
        assert!(matches!(Tokenizer::new(&spec), Err(Error::Config(_))));
        assert!(matches!(tokenize("x", &spec), Err(Error::Config(_))));
    }

    #[test]
    fn corrupt_vocab_is_a_configuration_error() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(&[0xff, 0xfe, b'\n']).unwrap();
        let spec = TokenizerSpec::ExternalVocab {
            path: file.path().to_path_buf(),
        };
        assert!(matches!(Tokenizer::new(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn external_vocab_greedy_longest_match() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "pass\nkey\npasskey\n<s>\nis\n38\n5243").unwrap();
        let tok = Tokenizer::new(&TokenizerSpec::ExternalVocab {
            path: file.path().to_path_buf(),
        })
        .unwrap();
        let pieces: Vec<_> = tok
            .tokenize("passkey is 385243")
            .into_iter()
            .map(|t| t.text)
            .collect();
        assert_eq!(pieces, ["passkey", "is", "38", "5243"]);
        assert_eq!(
            tok.token_ids("passkey is 385243").unwrap(),
            vec![2, 4, 5, 6]
        );
        // unknown characters fall back to single pieces with the unk id
        assert_eq!(tok.token_ids("zz").unwrap(), vec![7, 7]);
        assert_eq!(tok.count("passkey zz"), 3);
        assert_eq!(tok.piece_id("<s>"), Some(3));
    }

    proptest! {
        #[test]
        fn spans_are_ordered_and_cover_non_whitespace(text in "\\PC{0,64}") {
            let tok = Tokenizer::default_rule();
            let spans = tok.spans(&text);
            let mut last = 0;
            let mut rebuilt = String::new();
            for span in &spans {
                prop_assert!(span.start < span.end);
                prop_assert!(span.start >= last);
                prop_assert!(text[last..span.start].chars().all(char::is_whitespace));
                rebuilt.push_str(&text[last..span.end]);
                last = span.end;
            }
            prop_assert!(text[last..].chars().all(char::is_whitespace));
            rebuilt.push_str(&text[last..]);
            prop_assert_eq!(rebuilt, text.clone());
            prop_assert_eq!(spans.len(), tok.count(&text));
        }

        #[test]
        fn split_counts_add_up(text in "[a-z0-9 ,.!?\n]{0,80}", frac in 0.0f64..=1.0) {
            let tok = Tokenizer::default_rule();
            let n = tok.count(&text);
            let k = (frac * n as f64).floor() as usize;
            let head = tok.slice(&text, 0, k).unwrap();
            let tail = tok.slice(&text, k, n).unwrap();
            prop_assert_eq!(tok.count(head) + tok.count(tail), n);
        }
    }
}
